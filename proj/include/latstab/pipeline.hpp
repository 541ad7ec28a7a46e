// Config-driven end-to-end run: data generation, reference stability
// analysis, CAE and ESN training, forecasting, latent stability analysis and
// the final comparison.
//
// Every stage writes fixed file names under the workspace and records a
// fingerprint in workspace/manifest.ini. A fingerprint covers the config
// sections the stage reads plus the fingerprints of its inputs, so a stage
// refuses upstream artifacts produced under a different configuration.
#pragma once

#include "latstab/cae.hpp"
#include "latstab/core.hpp"
#include "latstab/esn.hpp"
#include "latstab/ks.hpp"
#include "latstab/metrics.hpp"
#include "latstab/store.hpp"
#include "latstab/tangent.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace latstab::pipeline {

namespace fs = std::filesystem;

struct RunConfig {
    // [grid]
    double length = 22.0;
    int points = 64;
    // [simulation]
    double dt = 0.05;
    double t_total = 5000.0;
    double t_transient = 500.0;
    int sample_every = 1;
    std::uint64_t ic_seed = 0;
    double ic_noise = 1e-3;
    // [cae]
    int latent = 8;
    std::vector<int> channels = {8, 16, 32};
    int kernel = 5;
    int stride = 2;
    int epochs = 200;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double cae_validation_fraction = 0.1;
    std::uint64_t cae_seed = 0;
    int train_stride = 5;
    // [esn]
    int reservoir = 1000;
    double connectivity = 3.0;
    int washout = 200;
    std::vector<double> rho = {0.1, 0.3, 0.6, 0.9};
    std::vector<double> sigma_in = {0.01, 0.03, 0.1, 0.3, 1.0};
    std::vector<double> beta = {1e-9, 1e-6, 1e-3};
    int subsample = 5;
    double train_fraction = 0.7;
    double esn_validation_fraction = 0.15;
    std::uint64_t search_seed = 0;
    int members = 10;
    std::uint64_t first_member_seed = 0;
    int search_starts = 10;
    int search_steps = 400;
    long long_run_steps = 0;
    double range_tolerance = 1.0;
    // [predict]
    int predict_starts = 10;
    int predict_steps = 400;
    // [stability]
    int exponents = 14;
    double window_lt = 100.0;
    double transient_lt = 10.0;
    double backward_lt = 10.0;
    double tol_zero = 0.005;
    int ortho_every = 5;
    int esn_ortho_every = 1;
    double clv_interval = 2.5;
    std::uint64_t stability_seed = 0;
    bool project_mean = true;
    int warmup = 500;
    // [analysis]
    double lambda1 = 0.045;
    double threshold = 0.5;
    int histogram_bins = 90;
    // [paths]
    std::string workspace = "workspace";
    // [run]
    int workers = 1;

    double dt_sample() const { return dt * sample_every; }
    double dt_esn() const { return dt_sample() * subsample; }
    double lyapunov_time() const { return 1.0 / lambda1; }
};

// ---------------------------------------------------------------- config parsing

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        return store::parse_double(trim(v));
    } catch (const Error&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

template <class Int>
Int to_integer(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    Int out{};
    const auto r = std::from_chars(t.data(), t.data() + t.size(), out);
    if (r.ec != std::errc{} || r.ptr != t.data() + t.size() || t.empty())
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(trim(item));
    return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string out;
    for (const auto& x : v) {
        if (!out.empty()) out += ",";
        if constexpr (std::is_floating_point_v<T>)
            out += store::format_double(x);
        else
            out += std::to_string(x);
    }
    return out;
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field field(const std::string& section, const std::string& key, T RunConfig::*member) {
    const std::string name = section + "." + key;
    Field f{section, key, {}, {}};
    f.set = [member, name](RunConfig& c, const std::string& v) {
        if constexpr (std::is_same_v<T, double>)
            c.*member = to_double(name, v);
        else if constexpr (std::is_same_v<T, bool>)
            c.*member = to_bool(name, v);
        else if constexpr (std::is_same_v<T, std::string>)
            c.*member = trim(v);
        else if constexpr (std::is_same_v<T, std::vector<double>>) {
            std::vector<double> out;
            for (const auto& item : split_list(v)) out.push_back(to_double(name, item));
            c.*member = out;
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            std::vector<int> out;
            for (const auto& item : split_list(v)) out.push_back(to_integer<int>(name, item));
            c.*member = out;
        } else
            c.*member = to_integer<T>(name, v);
    };
    f.get = [member](const RunConfig& c) -> std::string {
        if constexpr (std::is_same_v<T, double>)
            return store::format_double(c.*member);
        else if constexpr (std::is_same_v<T, bool>)
            return c.*member ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>)
            return c.*member;
        else if constexpr (std::is_same_v<T, std::vector<double>> || std::is_same_v<T, std::vector<int>>)
            return join(c.*member);
        else
            return std::to_string(c.*member);
    };
    return f;
}

inline const std::vector<Field>& fields() {
    static const std::vector<Field> all = {
        field("grid", "length", &RunConfig::length),
        field("grid", "points", &RunConfig::points),
        field("simulation", "dt", &RunConfig::dt),
        field("simulation", "t_total", &RunConfig::t_total),
        field("simulation", "t_transient", &RunConfig::t_transient),
        field("simulation", "sample_every", &RunConfig::sample_every),
        field("simulation", "ic_seed", &RunConfig::ic_seed),
        field("simulation", "ic_noise", &RunConfig::ic_noise),
        field("cae", "latent", &RunConfig::latent),
        field("cae", "channels", &RunConfig::channels),
        field("cae", "kernel", &RunConfig::kernel),
        field("cae", "stride", &RunConfig::stride),
        field("cae", "epochs", &RunConfig::epochs),
        field("cae", "batch_size", &RunConfig::batch_size),
        field("cae", "learning_rate", &RunConfig::learning_rate),
        field("cae", "validation_fraction", &RunConfig::cae_validation_fraction),
        field("cae", "seed", &RunConfig::cae_seed),
        field("cae", "train_stride", &RunConfig::train_stride),
        field("esn", "reservoir", &RunConfig::reservoir),
        field("esn", "connectivity", &RunConfig::connectivity),
        field("esn", "washout", &RunConfig::washout),
        field("esn", "rho", &RunConfig::rho),
        field("esn", "sigma_in", &RunConfig::sigma_in),
        field("esn", "beta", &RunConfig::beta),
        field("esn", "subsample", &RunConfig::subsample),
        field("esn", "train_fraction", &RunConfig::train_fraction),
        field("esn", "validation_fraction", &RunConfig::esn_validation_fraction),
        field("esn", "search_seed", &RunConfig::search_seed),
        field("esn", "members", &RunConfig::members),
        field("esn", "first_member_seed", &RunConfig::first_member_seed),
        field("esn", "search_starts", &RunConfig::search_starts),
        field("esn", "search_steps", &RunConfig::search_steps),
        field("esn", "long_run_steps", &RunConfig::long_run_steps),
        field("esn", "range_tolerance", &RunConfig::range_tolerance),
        field("predict", "starts", &RunConfig::predict_starts),
        field("predict", "steps", &RunConfig::predict_steps),
        field("stability", "exponents", &RunConfig::exponents),
        field("stability", "window_lt", &RunConfig::window_lt),
        field("stability", "transient_lt", &RunConfig::transient_lt),
        field("stability", "backward_lt", &RunConfig::backward_lt),
        field("stability", "tol_zero", &RunConfig::tol_zero),
        field("stability", "ortho_every", &RunConfig::ortho_every),
        field("stability", "esn_ortho_every", &RunConfig::esn_ortho_every),
        field("stability", "clv_interval", &RunConfig::clv_interval),
        field("stability", "seed", &RunConfig::stability_seed),
        field("stability", "project_mean", &RunConfig::project_mean),
        field("stability", "warmup", &RunConfig::warmup),
        field("analysis", "lambda1", &RunConfig::lambda1),
        field("analysis", "threshold", &RunConfig::threshold),
        field("analysis", "histogram_bins", &RunConfig::histogram_bins),
        field("paths", "workspace", &RunConfig::workspace),
        field("run", "workers", &RunConfig::workers),
    };
    return all;
}

inline bool is_multiple(double span, double step) {
    const double n = span / step;
    return std::abs(n - std::round(n)) < 1e-9 * std::max(1.0, n);
}

}  // namespace detail

/// Range and consistency checks that the individual modules would otherwise
/// report late, deep inside a stage.
inline void validate(const RunConfig& c) {
    ks::make_grid(c.length, c.points);
    if (!(c.dt > 0.0)) throw ConfigError("simulation.dt must be positive");
    if (!(c.t_transient >= 0.0) || !(c.t_transient < c.t_total))
        throw ConfigError("simulation.t_transient must lie in [0, t_total)");
    if (c.sample_every < 1) throw ConfigError("simulation.sample_every must be >= 1");
    if (c.channels.empty()) throw ConfigError("cae.channels must list at least one stage");
    cae::CaeArchitecture arch;
    arch.n_x = c.points;
    arch.n_latent = c.latent;
    int in = 1;
    for (int ch : c.channels) {
        arch.encoder.push_back({in, ch, c.kernel, c.stride});
        in = ch;
    }
    arch.validate();
    if (c.epochs < 1 || c.batch_size < 1) throw ConfigError("cae.epochs and cae.batch_size must be >= 1");
    if (!(c.learning_rate > 0.0)) throw ConfigError("cae.learning_rate must be positive");
    if (!(c.cae_validation_fraction > 0.0 && c.cae_validation_fraction < 1.0))
        throw ConfigError("cae.validation_fraction must lie in (0, 1)");
    if (c.train_stride < 1 || c.subsample < 1) throw ConfigError("cae.train_stride and esn.subsample must be >= 1");
    if (c.rho.empty() || c.sigma_in.empty() || c.beta.empty())
        throw ConfigError("esn.rho, esn.sigma_in and esn.beta must each list at least one value");
    for (double r : c.rho) esn::EsnHyper{c.reservoir, 1.0, r, c.connectivity, 0.0, c.washout, 0}.validate(c.latent);
    for (double s : c.sigma_in) esn::EsnHyper{c.reservoir, s, 0.5, c.connectivity, 0.0, c.washout, 0}.validate(c.latent);
    for (double b : c.beta) esn::EsnHyper{c.reservoir, 1.0, 0.5, c.connectivity, b, c.washout, 0}.validate(c.latent);
    if (!(c.train_fraction > 0.0 && c.esn_validation_fraction > 0.0 &&
          c.train_fraction + c.esn_validation_fraction < 1.0))
        throw ConfigError("esn.train_fraction and esn.validation_fraction must be positive with a sum below 1");
    if (c.members < 1) throw ConfigError("esn.members must be >= 1");
    if (c.search_starts < 1 || c.search_steps < 1 || c.predict_starts < 1 || c.predict_steps < 1)
        throw ConfigError("forecast start and step counts must be >= 1");
    if (c.long_run_steps < 0 || !(c.range_tolerance >= 0.0))
        throw ConfigError("esn.long_run_steps and esn.range_tolerance must be non-negative");
    if (c.exponents < 1 || c.exponents > c.points)
        throw ConfigError("stability.exponents must lie in [1, grid.points]");
    if (c.exponents > c.reservoir) throw ConfigError("stability.exponents exceeds the reservoir size");
    if (!(c.window_lt > 0.0) || !(c.transient_lt >= 0.0) || !(c.backward_lt > 0.0))
        throw ConfigError("stability windows must be positive");
    if (!(c.tol_zero > 0.0)) throw ConfigError("stability.tol_zero must be positive");
    if (c.ortho_every < 1 || c.esn_ortho_every < 1) throw ConfigError("ortho_every values must be >= 1");
    if (!detail::is_multiple(c.clv_interval, c.ortho_every * c.dt) ||
        !detail::is_multiple(c.clv_interval, c.esn_ortho_every * c.dt_esn()))
        throw ConfigError("stability.clv_interval must be a whole number of QR intervals in both systems");
    if (c.warmup < 1) throw ConfigError("stability.warmup must be >= 1");
    if (!(c.lambda1 > 0.0)) throw ConfigError("analysis.lambda1 must be positive");
    if (!(c.threshold > 0.0)) throw ConfigError("analysis.threshold must be positive");
    if (c.histogram_bins < 1) throw ConfigError("analysis.histogram_bins must be >= 1");
    if (c.workers < 1) throw ConfigError("run.workers must be >= 1");
}

inline RunConfig parse_config(std::istream& in, const std::string& origin = "config") {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    RunConfig c;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError(origin + ": key '" + section + "' outside of any section");
        for (const auto& [key, value] : body) {
            const auto& all = detail::fields();
            auto it = std::find_if(all.begin(), all.end(),
                                   [&](const detail::Field& f) { return f.section == section && f.key == key; });
            if (it == all.end()) throw ConfigError(origin + ": unknown key '" + section + "." + key + "'");
            it->set(c, value.data());
        }
    }
    validate(c);
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse_config(in, path.string());
}

/// Sections in file order, keys in declaration order.
inline std::string canonical_text(const RunConfig& c, const std::vector<std::string>& sections = {}) {
    std::string out;
    std::string current;
    for (const auto& f : detail::fields()) {
        if (!sections.empty() && std::find(sections.begin(), sections.end(), f.section) == sections.end()) continue;
        if (f.section != current) {
            out += "[" + f.section + "]\n";
            current = f.section;
        }
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------- stages and manifest

enum class Stage { generate_data, stability_ref, train_cae, train_esn, predict, stability_latent, compare };

inline const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> s = {Stage::generate_data, Stage::stability_ref,  Stage::train_cae, Stage::train_esn,
                                         Stage::predict,       Stage::stability_latent, Stage::compare};
    return s;
}

inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::generate_data: return "generate-data";
        case Stage::stability_ref: return "stability-ref";
        case Stage::train_cae: return "train-cae";
        case Stage::train_esn: return "train-esn";
        case Stage::predict: return "predict";
        case Stage::stability_latent: return "stability-latent";
        case Stage::compare: return "compare";
    }
    return "?";
}

inline Stage stage_from_string(const std::string& s) {
    for (Stage st : all_stages())
        if (to_string(st) == s) return st;
    throw ConfigError("unknown command '" + s + "'");
}

inline std::vector<Stage> dependencies(Stage s) {
    switch (s) {
        case Stage::generate_data: return {};
        case Stage::stability_ref: return {Stage::generate_data};
        case Stage::train_cae: return {Stage::generate_data};
        case Stage::train_esn: return {Stage::train_cae};
        case Stage::predict: return {Stage::train_esn};
        case Stage::stability_latent: return {Stage::train_esn, Stage::stability_ref};
        case Stage::compare: return {Stage::stability_ref, Stage::stability_latent, Stage::predict};
    }
    return {};
}

inline std::vector<std::string> sections_read(Stage s) {
    switch (s) {
        case Stage::generate_data: return {"grid", "simulation"};
        case Stage::stability_ref: return {"stability", "analysis"};
        case Stage::train_cae: return {"cae"};
        case Stage::train_esn: return {"esn", "analysis"};
        case Stage::predict: return {"predict", "analysis"};
        case Stage::stability_latent: return {"stability", "analysis"};
        case Stage::compare: return {"analysis"};
    }
    return {};
}

inline std::string fingerprint(const RunConfig& c, Stage s) {
    std::string text = to_string(s) + "\n" + canonical_text(c, sections_read(s));
    for (Stage d : dependencies(s)) text += fingerprint(c, d) + "\n";
    char hex[9];
    std::snprintf(hex, sizeof hex, "%08lx", store::detail::Writer::checksum(text.data(), text.size()));
    return hex;
}

class Workspace {
public:
    explicit Workspace(fs::path root) : root_(std::move(root)) {}

    const fs::path& root() const { return root_; }
    fs::path path(const std::string& rel) const { return root_ / rel; }
    fs::path manifest_path() const { return root_ / "manifest.ini"; }

    std::map<std::string, std::string> manifest() const {
        std::map<std::string, std::string> out;
        if (!fs::exists(manifest_path())) return out;
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(manifest_path().string(), tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw LoadError(LoadError::Reason::format, e.what());
        }
        if (auto stages = tree.get_child_optional("stages"))
            for (const auto& [k, v] : *stages) out[k] = v.data();
        return out;
    }

    void record(Stage s, const std::string& print) const {
        auto m = manifest();
        m[to_string(s)] = print;
        std::string text = "[stages]\n";
        for (const auto& [k, v] : m) text += k + " = " + v + "\n";
        store::detail::write_text(manifest_path(), text);
    }

    void forget(Stage s) const {
        auto m = manifest();
        if (m.erase(to_string(s)) == 0) return;
        std::string text = "[stages]\n";
        for (const auto& [k, v] : m) text += k + " = " + v + "\n";
        store::detail::write_text(manifest_path(), text);
    }

    bool is_current(const RunConfig& c, Stage s) const {
        const auto m = manifest();
        auto it = m.find(to_string(s));
        return it != m.end() && it->second == fingerprint(c, s);
    }

    /// Throws a dependency error naming the first upstream stage that is
    /// missing or was produced under different settings.
    void require(const RunConfig& c, Stage s) const {
        const auto m = manifest();
        for (Stage d : dependencies(s)) {
            auto it = m.find(to_string(d));
            if (it == m.end())
                throw DependencyError("'" + to_string(s) + "' needs the output of '" + to_string(d) + "'; run `latstab " +
                                      to_string(d) + "` first");
            if (it->second != fingerprint(c, d))
                throw DependencyError("output of '" + to_string(d) + "' was produced with a different configuration; rerun `latstab " +
                                      to_string(d) + "`");
        }
    }

private:
    fs::path root_;
};

// file names
namespace files {
inline const char* physical = "data/physical.bin";
inline const char* reference_spectrum = "reference/spectrum.csv";
inline const char* reference_history = "reference/history.csv";
inline const char* reference_angles = "reference/angles.csv";
inline const char* reference_summary = "reference/summary.ini";
inline const char* cae_model = "models/cae.bin";
inline const char* cae_loss = "models/cae_loss.csv";
inline const char* latent = "latent/encoded.bin";
inline const char* search = "models/search.csv";
inline const char* esn_summary = "models/esn.ini";
inline const char* horizons = "predict/horizons.csv";
inline const char* errors = "predict/error.csv";
inline const char* predict_summary = "predict/summary.ini";
inline const char* report = "compare/report.ini";
inline const char* spectra = "compare/spectra.csv";
inline const char* histograms = "compare/histograms.csv";

inline std::string numbered(const std::string& stem, int k, const std::string& ext) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", k);
    return stem + buf + ext;
}
inline std::string esn_model(int k) { return numbered("models/esn_", k, ".bin"); }
inline std::string member_spectrum(int k) { return numbered("latent_stability/member_", k, "_spectrum.csv"); }
inline std::string member_history(int k) { return numbered("latent_stability/member_", k, "_history.csv"); }
inline std::string member_angles(int k) { return numbered("latent_stability/member_", k, "_angles.csv"); }
inline std::string predicted_latent(int k) { return numbered("predict/start_", k, "_latent.bin"); }
inline std::string predicted_physical(int k) { return numbered("predict/start_", k, "_physical.bin"); }
}  // namespace files

// ---------------------------------------------------------------- shared helpers

inline cae::CaeArchitecture architecture(const RunConfig& c) {
    cae::CaeArchitecture a;
    a.n_x = c.points;
    a.n_latent = c.latent;
    int in = 1;
    for (int ch : c.channels) {
        a.encoder.push_back({in, ch, c.kernel, c.stride});
        in = ch;
    }
    return a;
}

inline Matrix every_nth_row(const Matrix& m, int n) {
    Matrix out((m.rows() + n - 1) / n, m.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = m.row(i * n);
    return out;
}

/// Latent series split into contiguous train / validation / test blocks.
struct LatentSplit {
    Eigen::Index train_end = 0;
    Eigen::Index validation_end = 0;
    Eigen::Index size = 0;
};

inline LatentSplit split_latent(const RunConfig& c, Eigen::Index n) {
    LatentSplit s;
    s.size = n;
    s.train_end = static_cast<Eigen::Index>(std::floor(c.train_fraction * static_cast<double>(n)));
    s.validation_end = s.train_end + static_cast<Eigen::Index>(std::floor(c.esn_validation_fraction * static_cast<double>(n)));
    return s;
}

inline cae::LatentTrajectory rows_of(const cae::LatentTrajectory& t, Eigen::Index begin, Eigen::Index end) {
    cae::LatentTrajectory out = t;
    out.y = t.y.middleRows(begin, end - begin);
    out.t0 = t.t0 + static_cast<double>(begin) * t.dt_sample;
    return out;
}

inline std::vector<esn::EsnHyper> search_grid(const RunConfig& c) {
    esn::EsnHyper base;
    base.n_r = c.reservoir;
    base.connectivity = c.connectivity;
    base.washout = c.washout;
    base.seed = c.search_seed;
    return esn::make_grid(base, c.rho, c.sigma_in, c.beta);
}

inline std::string format_indices(const std::vector<int>& v) {
    std::string out;
    for (int i : v) out += (out.empty() ? "" : ",") + std::to_string(i);
    return out;
}

inline std::vector<int> parse_indices(const std::string& s) {
    std::vector<int> out;
    for (const auto& item : detail::split_list(s))
        if (!item.empty()) out.push_back(detail::to_integer<int>("index list", item));
    return out;
}

/// Runs `job(k)` for k in [0, n) on up to `workers` threads. The first error
/// is rethrown after all threads finish, prefixed by `label(k)`.
inline void run_parallel(int n, int workers, const std::function<void(int)>& job,
                         const std::function<std::string(int)>& label) {
    std::atomic<int> next{0};
    std::mutex mutex;
    std::exception_ptr first_error;
    int failed_index = -1;
    auto worker = [&] {
        for (int k = next++; k < n; k = next++) {
            try {
                job(k);
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!first_error || k < failed_index) {
                    first_error = std::current_exception();
                    failed_index = k;
                }
            }
        }
    };
    const int threads = std::max(1, std::min(workers, n));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (!first_error) return;
    try {
        std::rethrow_exception(first_error);
    } catch (const Error& e) {
        throw Error(e.kind(), label(failed_index) + ": " + e.what());
    }
}

struct StabilityRun {
    LyapunovSpectrum spectrum;
    std::vector<store::AngleRecord> angles;
};

/// Benettin spectrum plus CLV angles for the pairings present in `split`.
inline StabilityRun analyse(const Propagator& prop, const Vector& state0, const RunConfig& c, int ortho_every,
                            const SubspaceSplit* split_override, SubspaceSplit* split_out) {
    const double h = prop.step_interval;
    const double interval = ortho_every * h;
    const long window_steps = std::max<long>(1, steps_in(c.window_lt * c.lyapunov_time() / interval, 1.0)) * ortho_every;
    const long transient_steps = steps_in(c.transient_lt * c.lyapunov_time() / interval, 1.0) * ortho_every;
    const long checkpoint = std::max<long>(ortho_every, steps_in(c.lyapunov_time() / interval, 1.0) * ortho_every);

    StabilityRun run;
    run.spectrum = benettin_les(prop, state0, c.exponents, window_steps, ortho_every, checkpoint, c.stability_seed,
                                transient_steps);
    const SubspaceSplit split = split_override ? *split_override : classify_subspaces(run.spectrum, c.tol_zero);
    if (split_out) *split_out = split;

    const long stride = std::max<long>(1, steps_in(c.clv_interval / interval, 1.0));
    const long backward = std::max<long>(1, steps_in(c.backward_lt * c.lyapunov_time() / interval, 1.0));
    const ClvSet clvs = ginelli_clvs(prop, state0, c.exponents, transient_steps / ortho_every, window_steps / ortho_every,
                                     backward, ortho_every, c.stability_seed + 1, stride);
    for (Pairing p : all_pairings) {
        std::vector<double> theta;
        try {
            theta = angle_series(clvs, split, p);
        } catch (const ContractError&) {
            continue;  // a subspace of this pairing is empty
        }
        for (std::size_t k = 0; k < theta.size(); ++k) run.angles.push_back({clvs.times(static_cast<Eigen::Index>(k)), theta[k], p});
    }
    return run;
}

inline void export_history(const fs::path& path, const LyapunovSpectrum& s) {
    std::vector<std::string> header = {"time"};
    for (Eigen::Index i = 0; i < s.history.cols(); ++i) header.push_back("lambda_" + std::to_string(i + 1));
    Matrix rows(s.history.rows(), s.history.cols() + 1);
    rows.col(0) = s.history_times;
    rows.rightCols(s.history.cols()) = s.history;
    store::save_table_csv(path, header, rows);
}

inline std::map<Pairing, std::vector<double>> group_angles(const std::vector<store::AngleRecord>& records) {
    std::map<Pairing, std::vector<double>> out;
    for (const auto& r : records) out[r.pairing].push_back(r.theta_deg);
    return out;
}

inline SubspaceSplit reference_split(const Workspace& ws) {
    const auto kv = store::load_report(ws.path(files::reference_summary));
    SubspaceSplit s;
    s.unstable = parse_indices(store::detail::field(kv, "unstable", files::reference_summary));
    s.neutral = parse_indices(store::detail::field(kv, "neutral", files::reference_summary));
    s.stable = parse_indices(store::detail::field(kv, "stable", files::reference_summary));
    s.tol_zero = store::parse_double(store::detail::field(kv, "tol_zero", files::reference_summary));
    return s;
}

// ---------------------------------------------------------------- stages

struct StageContext {
    RunConfig config;
    Workspace workspace;
    std::ostream* log = nullptr;

    void say(const std::string& line) const {
        if (log) *log << line << std::endl;
    }
};

inline void generate_data(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto grid = ks::make_grid(c.length, c.points);
    const auto u0 = ks::default_initial_condition(grid, c.ic_seed, c.ic_noise);
    const auto traj = ks::simulate(grid, u0, c.dt, c.t_total, c.t_transient, c.sample_every);
    store::save_trajectory(ctx.workspace.path(files::physical), traj);
    const Vector energy = traj.u.rowwise().squaredNorm() / static_cast<double>(c.points);
    const double mean = energy.mean();
    const double sd = std::sqrt((energy.array() - mean).square().mean());
    std::ostringstream os;
    os << "stored " << traj.size() << " snapshots of " << c.points << " points, dt_sample=" << traj.dt_sample
       << ", t in [" << traj.t0 << ", " << traj.time(traj.size() - 1) << "]\n"
       << "energy <u^2>: mean " << mean << ", std " << sd << ", min " << energy.minCoeff() << ", max "
       << energy.maxCoeff();
    ctx.say(os.str());
}

inline void stability_ref(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto t_start = std::chrono::steady_clock::now();
    const auto data = store::load_physical(ctx.workspace.path(files::physical));
    const auto grid = ks::make_grid(c.length, c.points);
    const Propagator prop = ks::make_propagator(grid, c.dt, c.project_mean);
    const Vector state0 = data.u.row(data.size() - 1).transpose();
    SubspaceSplit split;
    const StabilityRun run = analyse(prop, state0, c, c.ortho_every, nullptr, &split);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    store::export_spectrum_csv(ctx.workspace.path(files::reference_spectrum), run.spectrum.lambdas);
    export_history(ctx.workspace.path(files::reference_history), run.spectrum);
    store::export_angles_csv(ctx.workspace.path(files::reference_angles), run.angles);
    const auto ky = kaplan_yorke(run.spectrum);
    store::KeyValues kv;
    kv["lambda1"] = store::format_double(run.spectrum.lambdas(0));
    kv["dky"] = store::format_double(ky.dimension);
    kv["ky_index"] = std::to_string(ky.index);
    kv["ky_saturated"] = ky.saturated ? "true" : "false";
    kv["unstable"] = format_indices(split.unstable);
    kv["neutral"] = format_indices(split.neutral);
    kv["stable"] = format_indices(split.stable);
    kv["tol_zero"] = store::format_double(split.tol_zero);
    kv["t_total"] = store::format_double(run.spectrum.t_total);
    kv["seconds"] = store::format_double(seconds);
    store::export_report(ctx.workspace.path(files::reference_summary), kv);

    std::ostringstream os;
    os << "reference exponents:";
    for (Eigen::Index i = 0; i < run.spectrum.size(); ++i) os << " " << run.spectrum.lambdas(i);
    os << "\nD_KY " << ky.dimension << "; unstable " << split.unstable.size() << ", neutral " << split.neutral.size()
       << ", stable " << split.stable.size() << "; " << seconds << " s";
    ctx.say(os.str());
}

inline void train_cae(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto data = store::load_physical(ctx.workspace.path(files::physical));
    cae::TrainingOptions opt;
    opt.learning_rate = c.learning_rate;
    opt.batch_size = c.batch_size;
    opt.epochs = c.epochs;
    opt.seed = c.cae_seed;
    opt.validation_fraction = c.cae_validation_fraction;
    const cae::CaeModel model = cae::train_cae(every_nth_row(data.u, c.train_stride), architecture(c), opt);
    store::save_model(ctx.workspace.path(files::cae_model), model);
    Matrix log(static_cast<Eigen::Index>(model.train_log.size()), 3);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < model.train_log.size(); ++i) {
        const auto& e = model.train_log[i];
        log.row(static_cast<Eigen::Index>(i)) << e.epoch, e.train_loss, e.validation_loss;
        best = std::min(best, e.validation_loss);
    }
    store::save_table_csv(ctx.workspace.path(files::cae_loss), {"epoch", "train_loss", "validation_loss"}, log);
    std::ostringstream os;
    os << "trained " << c.epochs << " epochs on " << (data.size() + c.train_stride - 1) / c.train_stride
       << " snapshots; final train loss " << model.train_log.back().train_loss << ", best validation loss " << best;
    ctx.say(os.str());
}

inline cae::LatentTrajectory encode_data(const RunConfig& c, const Workspace& ws) {
    const auto model = store::load_cae(ws.path(files::cae_model));
    auto data = store::load_physical(ws.path(files::physical));
    data.u = every_nth_row(data.u, c.subsample);
    data.dt_sample *= c.subsample;
    return cae::encode_trajectory(model, data);
}

inline void train_esn(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& ws = ctx.workspace;
    const cae::LatentTrajectory latent = encode_data(c, ws);
    store::save_trajectory(ws.path(files::latent), latent);
    const LatentSplit split = split_latent(c, latent.size());
    const auto train = rows_of(latent, 0, split.train_end);
    const auto validation = rows_of(latent, split.train_end, split.validation_end);

    esn::ScoringOptions opt;
    opt.lambda1 = c.lambda1;
    opt.threshold = c.threshold;
    opt.n_starts = c.search_starts;
    opt.horizon_steps = c.search_steps;
    opt.long_run_steps = c.long_run_steps;
    opt.range_tolerance = c.range_tolerance;
    const auto result = esn::hyper_search(train, validation, search_grid(c), opt);

    Matrix table(static_cast<Eigen::Index>(result.scores.size()), 5);
    for (std::size_t i = 0; i < result.scores.size(); ++i) {
        const auto& s = result.scores[i];
        table.row(static_cast<Eigen::Index>(i)) << s.hyper.rho, s.hyper.sigma_in, s.hyper.beta, s.score,
            s.failed ? 1.0 : 0.0;
    }
    store::save_table_csv(ws.path(files::search), {"rho", "sigma_in", "beta", "score_lt", "failed"}, table);
    std::ostringstream os;
    os << "search over " << result.scores.size() << " candidates: rho=" << result.best.rho
       << " sigma_in=" << result.best.sigma_in << " beta=" << result.best.beta;
    ctx.say(os.str());

    std::vector<double> excursion(static_cast<std::size_t>(c.members), 0.0);
    run_parallel(
        c.members, c.workers,
        [&](int k) {
            esn::EsnHyper h = result.best;
            h.seed = c.first_member_seed + static_cast<std::uint64_t>(k);
            const auto m = esn::train_esn(h, train);
            if (c.long_run_steps > 0)
                excursion[static_cast<std::size_t>(k)] = esn::long_run_excursion(m, train.y, c.long_run_steps);
            store::save_model(ws.path(files::esn_model(k)), m);
        },
        [&](int k) { return "ensemble member seed " + std::to_string(c.first_member_seed + k); });

    store::KeyValues kv;
    kv["rho"] = store::format_double(result.best.rho);
    kv["sigma_in"] = store::format_double(result.best.sigma_in);
    kv["beta"] = store::format_double(result.best.beta);
    kv["members"] = std::to_string(c.members);
    kv["train_rows"] = std::to_string(split.train_end);
    kv["validation_rows"] = std::to_string(split.validation_end - split.train_end);
    kv["test_rows"] = std::to_string(split.size - split.validation_end);
    int outside = 0;
    for (int k = 0; k < c.members; ++k) {
        const double e = excursion[static_cast<std::size_t>(k)];
        kv[files::numbered("member_", k, "_range_excursion")] = store::format_double(e);
        if (e > c.range_tolerance) ++outside;
    }
    store::export_report(ws.path(files::esn_summary), kv);
    std::string line = "trained " + std::to_string(c.members) + " ensemble members";
    if (c.long_run_steps > 0)
        line += "; " + std::to_string(outside) + " leave the training range within " + std::to_string(c.long_run_steps) + " steps";
    ctx.say(line);
}

inline std::vector<esn::EsnModel> load_members(const RunConfig& c, const Workspace& ws) {
    std::vector<esn::EsnModel> out;
    for (int k = 0; k < c.members; ++k) out.push_back(store::load_esn(ws.path(files::esn_model(k))));
    return out;
}

/// First rows of the closed-loop starts in the test block.
inline std::vector<Eigen::Index> forecast_starts(const RunConfig& c, const LatentSplit& split) {
    const Eigen::Index first = split.validation_end + std::max(1, c.washout);
    const Eigen::Index last = split.size - c.predict_steps;
    if (last < first)
        throw ConfigError("test block too short for " + std::to_string(c.predict_starts) + " forecasts of " +
                          std::to_string(c.predict_steps) + " steps");
    std::vector<Eigen::Index> starts;
    for (int k = 0; k < c.predict_starts; ++k)
        starts.push_back(first + (c.predict_starts > 1 ? (last - first) * k / (c.predict_starts - 1) : 0));
    return starts;
}

inline void predict(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& ws = ctx.workspace;
    const auto model = store::load_cae(ws.path(files::cae_model));
    const auto members = load_members(c, ws);
    const auto latent = store::load_latent(ws.path(files::latent));
    auto physical = store::load_physical(ws.path(files::physical));
    physical.u = every_nth_row(physical.u, c.subsample);
    physical.dt_sample *= c.subsample;
    const LatentSplit split = split_latent(c, latent.size());
    const auto starts = forecast_starts(c, split);
    const double dt = latent.dt_sample;

    Matrix horizons(static_cast<Eigen::Index>(members.size() * starts.size()), 4);
    Matrix errors(static_cast<Eigen::Index>(members.size() * starts.size()) * c.predict_steps, 4);
    std::vector<double> member0;
    std::vector<double> all;
    Eigen::Index hrow = 0, erow = 0;
    for (std::size_t mi = 0; mi < members.size(); ++mi) {
        const auto& m = members[mi];
        for (std::size_t si = 0; si < starts.size(); ++si) {
            const Eigen::Index s = starts[si];
            const long w = std::max(1, m.hyper.washout);
            const Vector r = w > 1 ? esn::warm_state(m, latent.y.middleRows(s - w, w - 1))
                                   : Vector(Vector::Zero(m.hyper.n_r));
            auto pred = esn::closed_loop(m, latent.y.row(s - 1).transpose(), r, c.predict_steps,
                                         latent.t0 + static_cast<double>(s - 1) * dt);
            const auto decoded = cae::decode_trajectory(model, pred.y, c.length);
            const Matrix reference = physical.u.middleRows(s, c.predict_steps);
            const Vector e = metrics::normalized_error(reference, decoded.u);
            const double h = metrics::prediction_horizon(e, dt, c.lambda1, c.threshold, dt);
            horizons.row(hrow++) << static_cast<double>(mi), static_cast<double>(si),
                latent.t0 + static_cast<double>(s) * dt, h;
            for (Eigen::Index i = 0; i < e.size(); ++i)
                errors.row(erow++) << static_cast<double>(mi), static_cast<double>(si),
                    static_cast<double>(i + 1) * dt * c.lambda1, e(i);
            all.push_back(h);
            if (mi == 0) {
                member0.push_back(h);
                store::save_trajectory(ws.path(files::predicted_latent(static_cast<int>(si))), pred.y);
                store::save_trajectory(ws.path(files::predicted_physical(static_cast<int>(si))), decoded);
            }
        }
    }
    store::save_table_csv(ws.path(files::horizons), {"member", "start", "t0", "horizon_lt"}, horizons);
    store::save_table_csv(ws.path(files::errors), {"member", "start", "time_lt", "error"}, errors);
    store::KeyValues kv;
    kv["median_horizon_lt"] = store::format_double(metrics::median(member0));
    kv["ensemble_median_horizon_lt"] = store::format_double(metrics::median(all));
    kv["starts"] = std::to_string(starts.size());
    kv["threshold"] = store::format_double(c.threshold);
    store::export_report(ws.path(files::predict_summary), kv);
    std::ostringstream os;
    os << "median horizon over " << starts.size() << " starts: " << metrics::median(member0)
       << " LT (member 0), " << metrics::median(all) << " LT (all members)";
    ctx.say(os.str());
}

inline void stability_latent(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& ws = ctx.workspace;
    const auto latent = store::load_latent(ws.path(files::latent));
    const LatentSplit split = split_latent(c, latent.size());
    const SubspaceSplit ref_split = reference_split(ws);
    const Eigen::Index warm = std::min<Eigen::Index>(c.warmup, split.train_end);
    const Matrix warm_inputs = latent.y.middleRows(split.train_end - warm, warm);

    run_parallel(
        c.members, c.workers,
        [&](int k) {
            const esn::EsnModel m = store::load_esn(ws.path(files::esn_model(k)));
            const Propagator prop = esn::make_propagator(m);
            const Vector r0 = esn::warm_state(m, warm_inputs);
            const StabilityRun run = analyse(prop, r0, c, c.esn_ortho_every, &ref_split, nullptr);
            store::export_spectrum_csv(ws.path(files::member_spectrum(k)), run.spectrum.lambdas);
            export_history(ws.path(files::member_history(k)), run.spectrum);
            store::export_angles_csv(ws.path(files::member_angles(k)), run.angles);
        },
        [&](int k) { return "ensemble member seed " + std::to_string(c.first_member_seed + k); });

    std::ostringstream os;
    os << "latent spectra for " << c.members << " members;";
    for (int k = 0; k < c.members; ++k) os << " " << store::load_spectrum_csv(ws.path(files::member_spectrum(k)))(0);
    ctx.say(os.str());
}

inline metrics::ComparisonReport build_report(const RunConfig& c, const Workspace& ws) {
    metrics::StabilityAnalysis reference;
    reference.lambdas = store::load_spectrum_csv(ws.path(files::reference_spectrum));
    reference.angles = group_angles(store::load_angles_csv(ws.path(files::reference_angles)));
    std::vector<metrics::StabilityAnalysis> members;
    for (int k = 0; k < c.members; ++k) {
        metrics::StabilityAnalysis a;
        a.lambdas = store::load_spectrum_csv(ws.path(files::member_spectrum(k)));
        a.angles = group_angles(store::load_angles_csv(ws.path(files::member_angles(k))));
        members.push_back(std::move(a));
    }
    const Matrix h = store::load_table_csv(ws.path(files::horizons), {"member", "start", "t0", "horizon_lt"});
    std::vector<double> horizons;
    for (Eigen::Index i = 0; i < h.rows(); ++i)
        if (h(i, 0) == 0.0) horizons.push_back(h(i, 3));
    return metrics::compare(reference, members, horizons);
}

inline void compare(const StageContext& ctx) {
    const auto& c = ctx.config;
    const auto& ws = ctx.workspace;
    const auto r = build_report(c, ws);

    const Eigen::Index k = r.le_reference.size();
    std::vector<std::string> header = {"index", "reference", "surrogate_mean", "surrogate_std"};
    for (std::size_t m = 0; m < r.le_surrogates.size(); ++m) header.push_back("member_" + std::to_string(m));
    Matrix rows(k, static_cast<Eigen::Index>(header.size()));
    for (Eigen::Index i = 0; i < k; ++i) {
        rows(i, 0) = static_cast<double>(i + 1);
        rows(i, 1) = r.le_reference(i);
        rows(i, 2) = r.le_surrogate_mean(i);
        rows(i, 3) = r.le_surrogate_std(i);
        for (std::size_t m = 0; m < r.le_surrogates.size(); ++m) rows(i, 4 + static_cast<Eigen::Index>(m)) = r.le_surrogates[m](i);
    }
    store::save_table_csv(ws.path(files::spectra), header, rows);

    // angle histograms, reference against the pooled ensemble
    const auto ref_angles = group_angles(store::load_angles_csv(ws.path(files::reference_angles)));
    std::map<Pairing, std::vector<double>> pooled;
    for (int m = 0; m < c.members; ++m)
        for (const auto& [p, v] : group_angles(store::load_angles_csv(ws.path(files::member_angles(m)))))
            pooled[p].insert(pooled[p].end(), v.begin(), v.end());
    std::string hist = "pairing,bin_lo,bin_hi,reference_density,surrogate_density\n";
    for (const auto& [p, ref] : ref_angles) {
        if (pooled[p].empty()) continue;
        const auto a = metrics::histogram(ref, c.histogram_bins, 0.0, 90.0, to_string(p));
        const auto b = metrics::histogram(pooled[p], c.histogram_bins, 0.0, 90.0, to_string(p));
        for (int i = 0; i < c.histogram_bins; ++i)
            hist += to_string(p) + "," + store::format_double(a.edges(i)) + "," + store::format_double(a.edges(i + 1)) +
                    "," + store::format_double(a.density(i)) + "," + store::format_double(b.density(i)) + "\n";
    }
    store::detail::write_text(ws.path(files::histograms), hist);

    store::KeyValues kv;
    kv["members"] = std::to_string(r.members);
    kv["dky_reference"] = store::format_double(r.dky_reference);
    kv["dky_surrogate_mean"] = store::format_double(r.dky_surrogate_mean);
    kv["dky_surrogate_std"] = store::format_double(r.dky_surrogate_std);
    kv["horizon_median_lt"] = store::format_double(r.horizon_median_lt);
    for (Eigen::Index i = 0; i < k; ++i) {
        kv["lambda_" + std::to_string(i + 1) + "_reference"] = store::format_double(r.le_reference(i));
        kv["lambda_" + std::to_string(i + 1) + "_surrogate_mean"] = store::format_double(r.le_surrogate_mean(i));
        kv["lambda_" + std::to_string(i + 1) + "_surrogate_std"] = store::format_double(r.le_surrogate_std(i));
    }
    for (const auto& [p, w] : r.wasserstein_per_pairing) {
        kv["wasserstein_" + to_string(p)] = store::format_double(w);
        kv["min_angle_reference_" + to_string(p)] = store::format_double(r.min_angle_reference.at(p));
        kv["min_angle_surrogate_" + to_string(p)] = store::format_double(r.min_angle_surrogate.at(p));
    }
    store::export_report(ws.path(files::report), kv);

    std::ostringstream os;
    os << "D_KY reference " << r.dky_reference << ", surrogate " << r.dky_surrogate_mean << " +- "
       << r.dky_surrogate_std << "\n";
    os << "lambda  reference  surrogate";
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(k, 10); ++i)
        os << "\n  " << i + 1 << "  " << r.le_reference(i) << "  " << r.le_surrogate_mean(i) << " +- "
           << r.le_surrogate_std(i);
    for (const auto& [p, w] : r.wasserstein_per_pairing) os << "\nW1 " << to_string(p) << ": " << w << " deg";
    ctx.say(os.str());
}

/// Runs one stage after checking its inputs and records it in the manifest.
inline void run_stage(Stage s, const StageContext& ctx) {
    ctx.workspace.require(ctx.config, s);
    ctx.workspace.forget(s);
    switch (s) {
        case Stage::generate_data: generate_data(ctx); break;
        case Stage::stability_ref: stability_ref(ctx); break;
        case Stage::train_cae: train_cae(ctx); break;
        case Stage::train_esn: train_esn(ctx); break;
        case Stage::predict: predict(ctx); break;
        case Stage::stability_latent: stability_latent(ctx); break;
        case Stage::compare: compare(ctx); break;
    }
    ctx.workspace.record(s, fingerprint(ctx.config, s));
}

/// Runs every stage whose recorded fingerprint is missing or out of date.
inline void run_all(const StageContext& ctx, bool reuse_current = true) {
    for (Stage s : all_stages()) {
        if (reuse_current && ctx.workspace.is_current(ctx.config, s)) {
            ctx.say("[" + to_string(s) + "] up to date");
            continue;
        }
        ctx.say("[" + to_string(s) + "]");
        run_stage(s, ctx);
    }
}

}  // namespace latstab::pipeline
