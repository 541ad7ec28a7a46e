// Binary and CSV persistence.
//
// Trajectory file, little-endian:
//   0   char[8]  "LSTRAJ01"
//   8   u16      version (1)
//   10  u8       kind: 0 physical, 1 latent
//   11  u8       source: 0 simulation, 1 encoder, 2 esn
//   12  u32      width (N_x or N_lat)
//   16  u64      count (rows)
//   24  f64      dt_sample
//   32  f64      L (0 for latent data)
//   40  f64      t0
//   48  u64      payload bytes = count * width * 8
//   56  f64[]    payload, row-major
//   end u32      crc32 of every preceding byte
//
// Model file, little-endian:
//   char[8] "LSMODEL1", u32 version, u32 kind (0 cae, 1 esn),
//   u64 text length + text (key=value lines),
//   u32 blob count, then per blob: u32 name length + name, u64 rows, u64 cols,
//   row-major f64 payload; trailing u32 crc32 of every preceding byte.
#pragma once

#include "latstab/cae.hpp"
#include "latstab/core.hpp"
#include "latstab/esn.hpp"
#include "latstab/ks.hpp"
#include "latstab/tangent.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace latstab::store {

static_assert(std::endian::native == std::endian::little, "persistence assumes a little-endian host");

inline constexpr char trajectory_magic[8] = {'L', 'S', 'T', 'R', 'A', 'J', '0', '1'};
inline constexpr char model_magic[8] = {'L', 'S', 'M', 'O', 'D', 'E', 'L', '1'};
inline constexpr std::uint16_t trajectory_version = 1;
inline constexpr std::uint32_t model_version = 1;
inline constexpr std::size_t trajectory_header_bytes = 56;

enum class TrajectoryKind : std::uint8_t { physical = 0, latent = 1 };
enum class TrajectorySource : std::uint8_t { simulation = 0, encoder = 1, esn = 2 };
enum class ModelKind : std::uint32_t { cae = 0, esn = 1 };

inline std::string to_string(ModelKind k) { return k == ModelKind::cae ? "cae" : "esn"; }

/// Any trajectory as stored on disk.
struct TrajectoryRecord {
    TrajectoryKind kind = TrajectoryKind::physical;
    TrajectorySource source = TrajectorySource::simulation;
    Matrix data;  // rows are times
    double dt_sample = 0.0;
    double length = 0.0;
    double t0 = 0.0;
};

// ---------------------------------------------------------------- floats as text

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    while (begin < end && *begin == ' ') ++begin;
    while (end > begin && (end[-1] == ' ' || end[-1] == '\r')) --end;
    const auto r = std::from_chars(begin, end, v);
    if (r.ec != std::errc{} || r.ptr != end) throw LoadError(LoadError::Reason::format, "not a number: '" + s + "'");
    return v;
}

// ---------------------------------------------------------------- byte buffers

namespace detail {

class Writer {
public:
    template <class T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    void put_rows(const Matrix& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(m(i, j));
    }
    void seal() { put<std::uint32_t>(static_cast<std::uint32_t>(checksum(bytes_.data(), bytes_.size()))); }
    const std::vector<char>& bytes() const { return bytes_; }

    static unsigned long checksum(const char* p, std::size_t n) {
        return crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n));
    }

private:
    std::vector<char> bytes_;
};

class Reader {
public:
    Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    Matrix get_rows(std::uint64_t rows, std::uint64_t cols) {
        if (cols != 0 && rows > (bytes_.size() / 8) / cols) truncated();
        need(rows * cols * 8);
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>();
        return m;
    }
    void expect_magic(const char (&magic)[8]) {
        if (bytes_.size() < 8 || std::memcmp(bytes_.data(), magic, 8) != 0)
            throw LoadError(LoadError::Reason::bad_magic, path_ + ": not a " + std::string(magic, 8) + " file");
        pos_ = 8;
    }
    /// Verifies the trailing checksum; call after the magic and version checks.
    void verify_checksum() {
        if (bytes_.size() < pos_ + 4) truncated();
        const std::size_t body = bytes_.size() - 4;
        std::uint32_t stored;
        std::memcpy(&stored, bytes_.data() + body, 4);
        if (Writer::checksum(bytes_.data(), body) != stored)
            throw LoadError(LoadError::Reason::checksum, path_ + ": checksum mismatch");
    }
    void expect_end() {
        if (pos_ + 4 != bytes_.size())
            throw LoadError(LoadError::Reason::format, path_ + ": unexpected trailing bytes");
    }
    std::size_t size() const { return bytes_.size(); }
    std::size_t position() const { return pos_; }
    [[noreturn]] void truncated() const {
        throw LoadError(LoadError::Reason::truncated, path_ + ": file is truncated");
    }

private:
    void need(std::uint64_t n) const {
        // the last four bytes belong to the checksum
        if (bytes_.size() < 4 || n > bytes_.size() - 4 || pos_ > bytes_.size() - 4 - n) truncated();
    }

    std::vector<char> bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(LoadError::Reason::io, "cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file(const std::filesystem::path& path, const char* data, std::size_t n) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::load, "cannot write " + path.string());
        out.write(data, static_cast<std::streamsize>(n));
        if (!out) throw Error(ErrorKind::load, "write failed for " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, text.data(), text.size());
}

}  // namespace detail

// ---------------------------------------------------------------- trajectories

inline void save_trajectory(const std::filesystem::path& path, const TrajectoryRecord& t) {
    detail::Writer w;
    w.put_bytes(trajectory_magic, 8);
    w.put<std::uint16_t>(trajectory_version);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.kind));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.source));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.data.cols()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.data.rows()));
    w.put<double>(t.dt_sample);
    w.put<double>(t.length);
    w.put<double>(t.t0);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.data.size()) * 8);
    w.put_rows(t.data);
    w.seal();
    detail::write_file(path, w.bytes().data(), w.bytes().size());
}

inline void save_trajectory(const std::filesystem::path& path, const ks::PhysicalTrajectory& t) {
    save_trajectory(path, TrajectoryRecord{TrajectoryKind::physical, TrajectorySource::simulation, t.u, t.dt_sample,
                                           t.length, t.t0});
}

inline void save_trajectory(const std::filesystem::path& path, const cae::LatentTrajectory& t) {
    save_trajectory(path, TrajectoryRecord{TrajectoryKind::latent,
                                           t.source == cae::LatentSource::esn ? TrajectorySource::esn
                                                                              : TrajectorySource::encoder,
                                           t.y, t.dt_sample, 0.0, t.t0});
}

inline TrajectoryRecord load_trajectory_record(const std::filesystem::path& path) {
    detail::Reader r(detail::read_file(path), path.string());
    r.expect_magic(trajectory_magic);
    if (r.size() < trajectory_header_bytes) r.truncated();
    const auto version = r.get<std::uint16_t>();
    if (version != trajectory_version)
        throw LoadError(LoadError::Reason::unsupported_version,
                        path.string() + ": unsupported trajectory version " + std::to_string(version));
    TrajectoryRecord t;
    const auto kind = r.get<std::uint8_t>();
    const auto source = r.get<std::uint8_t>();
    if (kind > 1 || source > 2) throw LoadError(LoadError::Reason::format, path.string() + ": unknown kind or source");
    t.kind = static_cast<TrajectoryKind>(kind);
    t.source = static_cast<TrajectorySource>(source);
    const auto width = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    t.dt_sample = r.get<double>();
    t.length = r.get<double>();
    t.t0 = r.get<double>();
    const auto payload = r.get<std::uint64_t>();
    if (width != 0 && count > payload / 8 / width) throw LoadError(LoadError::Reason::format, path.string() + ": header sizes disagree");
    if (payload != count * width * 8) throw LoadError(LoadError::Reason::format, path.string() + ": header sizes disagree");
    if (r.size() < trajectory_header_bytes + payload + 4) r.truncated();
    r.verify_checksum();
    t.data = r.get_rows(count, width);
    r.expect_end();
    return t;
}

inline ks::PhysicalTrajectory load_physical(const std::filesystem::path& path) {
    const TrajectoryRecord t = load_trajectory_record(path);
    if (t.kind != TrajectoryKind::physical)
        throw LoadError(LoadError::Reason::kind_mismatch, path.string() + ": expected a physical trajectory");
    ks::PhysicalTrajectory out;
    out.u = t.data;
    out.dt_sample = t.dt_sample;
    out.length = t.length;
    out.t0 = t.t0;
    return out;
}

inline cae::LatentTrajectory load_latent(const std::filesystem::path& path) {
    const TrajectoryRecord t = load_trajectory_record(path);
    if (t.kind != TrajectoryKind::latent)
        throw LoadError(LoadError::Reason::kind_mismatch, path.string() + ": expected a latent trajectory");
    cae::LatentTrajectory out;
    out.y = t.data;
    out.dt_sample = t.dt_sample;
    out.t0 = t.t0;
    out.source = t.source == TrajectorySource::esn ? cae::LatentSource::esn : cae::LatentSource::encoder;
    return out;
}

// ---------------------------------------------------------------- models

using KeyValues = std::map<std::string, std::string>;

struct ModelRecord {
    ModelKind kind = ModelKind::cae;
    KeyValues text;
    std::map<std::string, Matrix> blobs;
};

inline std::string format_key_values(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline KeyValues parse_key_values(const std::string& text, const std::string& origin) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw LoadError(LoadError::Reason::format, origin + ": malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline void save_model_record(const std::filesystem::path& path, const ModelRecord& m) {
    detail::Writer w;
    w.put_bytes(model_magic, 8);
    w.put<std::uint32_t>(model_version);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.kind));
    const std::string text = format_key_values(m.text);
    w.put<std::uint64_t>(text.size());
    w.put_bytes(text.data(), text.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.blobs.size()));
    for (const auto& [name, blob] : m.blobs) {
        w.put_string(name);
        w.put<std::uint64_t>(static_cast<std::uint64_t>(blob.rows()));
        w.put<std::uint64_t>(static_cast<std::uint64_t>(blob.cols()));
        w.put_rows(blob);
    }
    w.seal();
    detail::write_file(path, w.bytes().data(), w.bytes().size());
}

inline ModelRecord load_model_record(const std::filesystem::path& path, ModelKind expected) {
    detail::Reader r(detail::read_file(path), path.string());
    r.expect_magic(model_magic);
    const auto version = r.get<std::uint32_t>();
    if (version != model_version)
        throw LoadError(LoadError::Reason::unsupported_version,
                        path.string() + ": unsupported model version " + std::to_string(version));
    const auto kind = r.get<std::uint32_t>();
    if (kind > 1) throw LoadError(LoadError::Reason::format, path.string() + ": unknown model kind");
    if (static_cast<ModelKind>(kind) != expected)
        throw LoadError(LoadError::Reason::kind_mismatch, path.string() + ": holds a " +
                                                              to_string(static_cast<ModelKind>(kind)) +
                                                              " model, expected " + to_string(expected));
    r.verify_checksum();
    ModelRecord m;
    m.kind = expected;
    const auto text_len = r.get<std::uint64_t>();
    if (text_len > r.size()) r.truncated();
    std::string text;
    for (std::uint64_t i = 0; i < text_len; ++i) text.push_back(r.get<char>());
    m.text = parse_key_values(text, path.string());
    const auto n_blobs = r.get<std::uint32_t>();
    for (std::uint32_t b = 0; b < n_blobs; ++b) {
        const std::string name = r.get_string();
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        m.blobs[name] = r.get_rows(rows, cols);
    }
    r.expect_end();
    return m;
}

namespace detail {

inline const std::string& field(const KeyValues& kv, const std::string& key, const std::string& origin) {
    auto it = kv.find(key);
    if (it == kv.end()) throw LoadError(LoadError::Reason::format, origin + ": missing field '" + key + "'");
    return it->second;
}

inline const Matrix& blob(const ModelRecord& m, const std::string& name, Eigen::Index rows, Eigen::Index cols,
                          const std::string& origin) {
    auto it = m.blobs.find(name);
    if (it == m.blobs.end()) throw LoadError(LoadError::Reason::format, origin + ": missing parameter block '" + name + "'");
    if ((rows >= 0 && it->second.rows() != rows) || (cols >= 0 && it->second.cols() != cols))
        throw LoadError(LoadError::Reason::format, origin + ": parameter block '" + name + "' has the wrong shape");
    return it->second;
}

inline long parse_long(const std::string& s, const std::string& origin) {
    long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw LoadError(LoadError::Reason::format, origin + ": not an integer: '" + s + "'");
    return v;
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const cae::CaeModel& model) {
    ModelRecord rec;
    rec.kind = ModelKind::cae;
    const auto& a = model.architecture;
    rec.text["n_x"] = std::to_string(a.n_x);
    rec.text["n_latent"] = std::to_string(a.n_latent);
    rec.text["scale"] = format_double(model.scale);
    std::string stages;
    for (const auto& s : a.encoder)
        stages += (stages.empty() ? "" : ",") + std::to_string(s.in_channels) + ":" + std::to_string(s.out_channels) +
                  ":" + std::to_string(s.kernel) + ":" + std::to_string(s.stride);
    rec.text["encoder"] = stages;
    rec.blobs["params"] = model.params;
    Matrix log(static_cast<Eigen::Index>(model.train_log.size()), 3);
    for (std::size_t i = 0; i < model.train_log.size(); ++i)
        log.row(static_cast<Eigen::Index>(i)) << model.train_log[i].epoch, model.train_log[i].train_loss,
            model.train_log[i].validation_loss;
    rec.blobs["train_log"] = log;
    save_model_record(path, rec);
}

inline cae::CaeModel load_cae(const std::filesystem::path& path) {
    const ModelRecord rec = load_model_record(path, ModelKind::cae);
    const std::string origin = path.string();
    cae::CaeModel m;
    m.architecture.n_x = static_cast<int>(detail::parse_long(detail::field(rec.text, "n_x", origin), origin));
    m.architecture.n_latent = static_cast<int>(detail::parse_long(detail::field(rec.text, "n_latent", origin), origin));
    m.scale = parse_double(detail::field(rec.text, "scale", origin));
    std::istringstream stages(detail::field(rec.text, "encoder", origin));
    std::string stage;
    while (std::getline(stages, stage, ',')) {
        cae::ConvStage s;
        char c1, c2, c3;
        std::istringstream in(stage);
        if (!(in >> s.in_channels >> c1 >> s.out_channels >> c2 >> s.kernel >> c3 >> s.stride) || c1 != ':' ||
            c2 != ':' || c3 != ':')
            throw LoadError(LoadError::Reason::format, origin + ": malformed encoder stage '" + stage + "'");
        m.architecture.encoder.push_back(s);
    }
    Eigen::Index n_params = 0;
    try {
        n_params = cae::layer_plan(m.architecture).n_params;
    } catch (const ConfigError& e) {
        throw LoadError(LoadError::Reason::format, origin + ": " + e.what());
    }
    m.params = detail::blob(rec, "params", n_params, 1, origin);
    const Matrix& log = detail::blob(rec, "train_log", -1, 3, origin);
    for (Eigen::Index i = 0; i < log.rows(); ++i)
        m.train_log.push_back({static_cast<int>(log(i, 0)), log(i, 1), log(i, 2)});
    return m;
}

inline void save_model(const std::filesystem::path& path, const esn::EsnModel& model) {
    ModelRecord rec;
    rec.kind = ModelKind::esn;
    const auto& h = model.hyper;
    rec.text["n_r"] = std::to_string(h.n_r);
    rec.text["n_lat"] = std::to_string(model.n_lat);
    rec.text["sigma_in"] = format_double(h.sigma_in);
    rec.text["rho"] = format_double(h.rho);
    rec.text["connectivity"] = format_double(h.connectivity);
    rec.text["beta"] = format_double(h.beta);
    rec.text["washout"] = std::to_string(h.washout);
    rec.text["seed"] = std::to_string(h.seed);
    rec.text["dt"] = format_double(model.dt);
    rec.blobs["w_in"] = model.w_in;
    Matrix triplets(model.w.nonZeros(), 3);
    Eigen::Index k = 0;
    for (int j = 0; j < model.w.outerSize(); ++j)
        for (esn::SparseMatrix::InnerIterator it(model.w, j); it; ++it, ++k)
            triplets.row(k) << static_cast<double>(it.row()), static_cast<double>(it.col()), it.value();
    rec.blobs["w"] = triplets;
    rec.blobs["w_out"] = model.w_out;
    rec.blobs["scaler_mean"] = model.scaler.mean;
    rec.blobs["scaler_std"] = model.scaler.std;
    save_model_record(path, rec);
}

inline esn::EsnModel load_esn(const std::filesystem::path& path) {
    const ModelRecord rec = load_model_record(path, ModelKind::esn);
    const std::string origin = path.string();
    const auto& kv = rec.text;
    esn::EsnModel m;
    m.hyper.n_r = static_cast<int>(detail::parse_long(detail::field(kv, "n_r", origin), origin));
    m.n_lat = static_cast<int>(detail::parse_long(detail::field(kv, "n_lat", origin), origin));
    m.hyper.sigma_in = parse_double(detail::field(kv, "sigma_in", origin));
    m.hyper.rho = parse_double(detail::field(kv, "rho", origin));
    m.hyper.connectivity = parse_double(detail::field(kv, "connectivity", origin));
    m.hyper.beta = parse_double(detail::field(kv, "beta", origin));
    m.hyper.washout = static_cast<int>(detail::parse_long(detail::field(kv, "washout", origin), origin));
    m.hyper.seed = static_cast<std::uint64_t>(std::stoull(detail::field(kv, "seed", origin)));
    m.dt = parse_double(detail::field(kv, "dt", origin));
    if (m.hyper.n_r < 1 || m.n_lat < 1) throw LoadError(LoadError::Reason::format, origin + ": bad dimensions");
    m.w_in = detail::blob(rec, "w_in", m.n_lat + 1, m.hyper.n_r, origin);
    const Matrix& t = detail::blob(rec, "w", -1, 3, origin);
    std::vector<Eigen::Triplet<double>> triplets;
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
        const auto r = static_cast<long>(t(i, 0)), c = static_cast<long>(t(i, 1));
        if (r < 0 || c < 0 || r >= m.hyper.n_r || c >= m.hyper.n_r)
            throw LoadError(LoadError::Reason::format, origin + ": reservoir index out of range");
        triplets.emplace_back(static_cast<int>(r), static_cast<int>(c), t(i, 2));
    }
    m.w.resize(m.hyper.n_r, m.hyper.n_r);
    m.w.setFromTriplets(triplets.begin(), triplets.end());
    m.w_out = detail::blob(rec, "w_out", -1, -1, origin);
    if (m.w_out.size() != 0 && (m.w_out.rows() != m.hyper.n_r + 1 || m.w_out.cols() != m.n_lat))
        throw LoadError(LoadError::Reason::format, origin + ": parameter block 'w_out' has the wrong shape");
    m.scaler.mean = detail::blob(rec, "scaler_mean", m.n_lat, 1, origin);
    m.scaler.std = detail::blob(rec, "scaler_std", m.n_lat, 1, origin);
    return m;
}

// ---------------------------------------------------------------- CSV

/// Rows of numbers under a header line.
inline void save_table_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                           const Matrix& rows) {
    if (static_cast<Eigen::Index>(header.size()) != rows.cols()) throw ContractError("CSV header does not match the columns");
    std::string out;
    for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += "\n";
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        for (Eigen::Index j = 0; j < rows.cols(); ++j) out += (j ? "," : "") + format_double(rows(i, j));
        out += "\n";
    }
    detail::write_text(path, out);
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      const std::vector<std::string>& expected_header) {
    const auto bytes = detail::read_file(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::string line;
    std::vector<std::vector<std::string>> rows;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (first) {
            if (cells != expected_header)
                throw LoadError(LoadError::Reason::format, path.string() + ": unexpected CSV header");
            first = false;
            continue;
        }
        if (line.empty()) continue;
        if (cells.size() != expected_header.size())
            throw LoadError(LoadError::Reason::format, path.string() + ": wrong number of CSV columns");
        rows.push_back(std::move(cells));
    }
    if (first) throw LoadError(LoadError::Reason::truncated, path.string() + ": empty CSV");
    return rows;
}

inline Matrix load_table_csv(const std::filesystem::path& path, const std::vector<std::string>& header) {
    const auto rows = read_csv(path, header);
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(header.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < header.size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_double(rows[i][j]);
    return m;
}

inline const std::vector<std::string> spectrum_header = {"index", "lambda", "cumulative_sum"};
inline const std::vector<std::string> angles_header = {"time", "theta_deg", "pairing"};

/// index is 1-based.
inline void export_spectrum_csv(const std::filesystem::path& path, const Vector& lambdas) {
    Matrix rows(lambdas.size(), 3);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < lambdas.size(); ++i) {
        sum += lambdas(i);
        rows.row(i) << static_cast<double>(i + 1), lambdas(i), sum;
    }
    save_table_csv(path, spectrum_header, rows);
}

inline Vector load_spectrum_csv(const std::filesystem::path& path) {
    const Matrix rows = load_table_csv(path, spectrum_header);
    return rows.col(1);
}

struct AngleRecord {
    double time = 0.0;
    double theta_deg = 0.0;
    Pairing pairing = Pairing::unstable_neutral;
};

inline void export_angles_csv(const std::filesystem::path& path, const std::vector<AngleRecord>& angles) {
    std::string out = "time,theta_deg,pairing\n";
    for (const auto& a : angles) out += format_double(a.time) + "," + format_double(a.theta_deg) + "," + to_string(a.pairing) + "\n";
    detail::write_text(path, out);
}

inline std::vector<AngleRecord> load_angles_csv(const std::filesystem::path& path) {
    std::vector<AngleRecord> out;
    for (const auto& row : read_csv(path, angles_header)) {
        AngleRecord a;
        a.time = parse_double(row[0]);
        a.theta_deg = parse_double(row[1]);
        try {
            a.pairing = pairing_from_string(row[2]);
        } catch (const Error&) {
            throw LoadError(LoadError::Reason::format, path.string() + ": unknown pairing '" + row[2] + "'");
        }
        out.push_back(a);
    }
    return out;
}

inline void export_report(const std::filesystem::path& path, const KeyValues& report) {
    detail::write_text(path, format_key_values(report));
}

inline KeyValues load_report(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return parse_key_values(std::string(bytes.begin(), bytes.end()), path.string());
}

}  // namespace latstab::store
