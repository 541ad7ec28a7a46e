// Echo state network on latent trajectories.
//
//   r(i+1) = tanh(W_in^T [y(i); 1] + W^T r(i))
//   yhat(i+1) = W_out^T [r(i+1); 1]
//
// Inputs and outputs are standardized per component by the model's scaler,
// so W_in and W_out act on zero-mean, unit-variance latent coordinates.
#pragma once

#include "latstab/cae.hpp"
#include "latstab/core.hpp"
#include "latstab/metrics.hpp"
#include "latstab/tangent.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCore>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace latstab::esn {

using SparseMatrix = Eigen::SparseMatrix<double>;

struct EsnHyper {
    int n_r = 1000;
    double sigma_in = 0.1;
    double rho = 0.9;
    double connectivity = 3.0;
    double beta = 1e-6;
    int washout = 200;
    std::uint64_t seed = 0;

    void validate(int n_lat) const {
        if (n_r < n_lat) throw ConfigError("reservoir size must be at least the latent size");
        if (!(rho > 0.0)) throw ConfigError("spectral radius must be positive");
        if (!(beta >= 0.0)) throw ConfigError("ridge coefficient must be non-negative");
        if (!(connectivity >= 1.0) || connectivity > n_r) throw ConfigError("connectivity must lie in [1, n_r]");
        if (!(sigma_in > 0.0)) throw ConfigError("input scaling must be positive");
        if (washout < 0) throw ConfigError("washout must be non-negative");
    }
};

struct LatentScaler {
    Vector mean;
    Vector std;

    static LatentScaler identity(int n) { return {Vector::Zero(n), Vector::Ones(n)}; }

    static LatentScaler fit(const Matrix& y) {
        if (y.rows() < 2) throw ContractError("scaler needs at least two samples");
        LatentScaler s;
        s.mean = y.colwise().mean().transpose();
        s.std = ((y.rowwise() - s.mean.transpose()).array().square().colwise().sum() / static_cast<double>(y.rows()))
                    .sqrt()
                    .transpose();
        for (Eigen::Index i = 0; i < s.std.size(); ++i)
            if (!(s.std(i) > 0.0)) s.std(i) = 1.0;
        return s;
    }

    Matrix to_model(const Matrix& y) const {
        return (y.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
    }
    Matrix from_model(const Matrix& z) const {
        return (z.array().rowwise() * std.transpose().array()).rowwise() + mean.transpose().array();
    }
};

struct EsnModel {
    EsnHyper hyper;
    int n_lat = 0;
    Matrix w_in;      // (n_lat + 1) x n_r, last row is the bias
    SparseMatrix w;   // n_r x n_r
    Matrix w_out;     // (n_r + 1) x n_lat, last row is the bias; empty until trained
    LatentScaler scaler;
    double dt = 1.0;  // time between consecutive ESN steps

    bool trained() const { return w_out.rows() == hyper.n_r + 1 && w_out.cols() == n_lat; }
};

struct ReservoirSequence {
    Matrix r;  // one state per row
    double t0 = 0.0;
    double dt = 1.0;
};

/// Largest eigenvalue magnitude. Power iteration first; when the dominant
/// eigenvalues form a complex pair (or are otherwise not isolated) and the
/// iteration fails to settle, a dense eigenvalue solve decides.
inline double spectral_radius(const SparseMatrix& w, int max_iterations = 1000, double tol = 1e-4) {
    const Eigen::Index n = w.rows();
    if (n == 0 || w.nonZeros() == 0) return 0.0;
    Vector x = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
    for (int it = 0; it < max_iterations; ++it) {
        Vector y = w * x;
        const double norm = y.norm();
        if (norm == 0.0) break;
        const double lambda = x.dot(y);
        if ((y - lambda * x).norm() <= tol * std::abs(lambda)) return std::abs(lambda);
        x = y / norm;
    }
    Eigen::EigenSolver<Matrix> solver(Matrix(w), false);
    return solver.eigenvalues().cwiseAbs().maxCoeff();
}

/// Random W_in and W for the given hyperparameters; W_out is left empty.
inline EsnModel generate_reservoir(const EsnHyper& hyper, int n_lat, double dt = 1.0) {
    hyper.validate(n_lat);
    EsnModel m;
    m.hyper = hyper;
    m.n_lat = n_lat;
    m.dt = dt;
    m.scaler = LatentScaler::identity(n_lat);

    std::mt19937_64 rng(hyper.seed);
    std::uniform_real_distribution<double> in(-hyper.sigma_in, hyper.sigma_in);
    m.w_in.resize(n_lat + 1, hyper.n_r);
    for (Eigen::Index j = 0; j < m.w_in.cols(); ++j)
        for (Eigen::Index i = 0; i < m.w_in.rows(); ++i) m.w_in(i, j) = in(rng);

    // each entry is nonzero with probability connectivity / n_r
    std::bernoulli_distribution keep(hyper.connectivity / hyper.n_r);
    std::uniform_real_distribution<double> value(-1.0, 1.0);
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(static_cast<std::size_t>(hyper.connectivity * hyper.n_r * 1.2));
    for (int j = 0; j < hyper.n_r; ++j)
        for (int i = 0; i < hyper.n_r; ++i)
            if (keep(rng)) triplets.emplace_back(i, j, value(rng));
    m.w.resize(hyper.n_r, hyper.n_r);
    m.w.setFromTriplets(triplets.begin(), triplets.end());

    const double radius = spectral_radius(m.w);
    if (!(radius > 0.0)) throw NumericalError("reservoir matrix has zero spectral radius; try another seed");
    m.w *= hyper.rho / radius;
    return m;
}

namespace detail {

inline Vector step(const EsnModel& m, const Vector& z, const Vector& r) {
    Vector pre = m.w_in.topRows(m.n_lat).transpose() * z + m.w_in.row(m.n_lat).transpose();
    pre.noalias() += m.w.transpose() * r;
    return pre.array().tanh().matrix();
}

inline Vector readout(const EsnModel& m, const Vector& r) {
    return m.w_out.topRows(m.hyper.n_r).transpose() * r + m.w_out.row(m.hyper.n_r).transpose();
}

inline void require_trained(const EsnModel& m) {
    if (!m.trained()) throw ContractError("ESN readout has not been trained");
}

}  // namespace detail

/// Teacher-forced reservoir states; row i is the state after consuming input i.
/// Inputs are in model (standardized) coordinates.
inline Matrix open_loop_model(const EsnModel& m, const Matrix& z, const Vector& r0) {
    if (z.rows() == 0) throw ContractError("open loop needs at least one input");
    if (z.cols() != m.n_lat) throw ContractError("input width does not match the latent size");
    if (r0.size() != m.hyper.n_r) throw ContractError("initial reservoir state has the wrong size");
    Matrix states(z.rows(), m.hyper.n_r);
    Vector r = r0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        r = detail::step(m, z.row(i).transpose(), r);
        states.row(i) = r.transpose();
    }
    return states;
}

inline ReservoirSequence open_loop(const EsnModel& m, const cae::LatentTrajectory& inputs, const Vector& r0) {
    if (inputs.y.cols() != m.n_lat) throw ContractError("input width does not match the latent size");
    ReservoirSequence out;
    out.r = open_loop_model(m, m.scaler.to_model(inputs.y), r0);
    out.t0 = inputs.t0 + inputs.dt_sample;
    out.dt = inputs.dt_sample;
    return out;
}

/// Ridge regression readout on post-washout rows: solves
/// ([R 1]^T [R 1] + beta I) W_out = [R 1]^T Y.
inline Matrix train_readout(const Matrix& states, const Matrix& targets, double beta, int washout) {
    if (states.rows() != targets.rows()) throw ContractError("states and targets differ in length");
    if (washout < 0 || washout >= states.rows()) throw ContractError("washout must be shorter than the sequence");
    if (!(beta >= 0.0)) throw ContractError("ridge coefficient must be non-negative");
    const Eigen::Index n = states.rows() - washout;
    Matrix design(n, states.cols() + 1);
    design.leftCols(states.cols()) = states.bottomRows(n);
    design.col(states.cols()).setOnes();
    Matrix gram = design.transpose() * design;
    gram.diagonal().array() += beta;
    const Matrix rhs = design.transpose() * targets.bottomRows(n);

    Eigen::LDLT<Matrix> ldlt(gram);
    const bool singular = ldlt.info() != Eigen::Success ||
                          ldlt.vectorD().cwiseAbs().minCoeff() <= 1e-13 * ldlt.vectorD().cwiseAbs().maxCoeff();
    if (singular && beta == 0.0)
        throw NumericalError("readout normal equations are singular; use a ridge coefficient beta > 0");
    Matrix w_out = ldlt.solve(rhs);
    const double residual = (gram * w_out - rhs).norm() / std::max(rhs.norm(), std::numeric_limits<double>::min());
    if (!w_out.allFinite() || residual > 1e-8)
        throw NumericalError("readout solve residual " + std::to_string(residual) +
                             (beta == 0.0 ? "; use a ridge coefficient beta > 0" : ""));
    return w_out;
}

/// Generates the reservoir, fits the scaler, drives the reservoir with the
/// training sequence from r = 0 and trains the readout on next-step targets.
inline EsnModel train_esn(const EsnHyper& hyper, const cae::LatentTrajectory& train) {
    const int n_lat = static_cast<int>(train.y.cols());
    if (train.size() <= hyper.washout + 1) throw ContractError("training sequence shorter than the washout");
    EsnModel m = generate_reservoir(hyper, n_lat, train.dt_sample);
    m.scaler = LatentScaler::fit(train.y);
    const Matrix z = m.scaler.to_model(train.y);
    const Eigen::Index n = z.rows() - 1;
    const Matrix states = open_loop_model(m, z.topRows(n), Vector::Zero(hyper.n_r));
    m.w_out = train_readout(states, z.bottomRows(n), hyper.beta, hyper.washout);
    return m;
}

struct ClosedLoopResult {
    cae::LatentTrajectory y;  // predictions y(1..n)
    ReservoirSequence states; // r(1..n)
};

/// Autonomous rollout: from input y0 and state r0, feeds each prediction back
/// as the next input. `y0` and the returned predictions are in latent units.
inline ClosedLoopResult closed_loop(const EsnModel& m, const Vector& y0, const Vector& r0, long n_steps,
                                    double t0 = 0.0) {
    detail::require_trained(m);
    if (y0.size() != m.n_lat) throw ContractError("initial input has the wrong size");
    if (r0.size() != m.hyper.n_r) throw ContractError("initial reservoir state has the wrong size");
    if (n_steps < 0) throw ContractError("negative step count");
    ClosedLoopResult out;
    out.y.source = cae::LatentSource::esn;
    out.y.dt_sample = m.dt;
    out.y.t0 = t0 + m.dt;
    out.states.dt = m.dt;
    out.states.t0 = t0 + m.dt;
    Matrix z(n_steps, m.n_lat);
    out.states.r.resize(n_steps, m.hyper.n_r);
    Vector input = m.scaler.to_model(y0.transpose()).transpose();
    Vector r = r0;
    for (long i = 0; i < n_steps; ++i) {
        r = detail::step(m, input, r);
        input = detail::readout(m, r);
        if (!input.allFinite()) throw BlowUpError("closed-loop prediction is not finite at step " + std::to_string(i + 1),
                                                  t0 + static_cast<double>(i + 1) * m.dt);
        z.row(i) = input.transpose();
        out.states.r.row(i) = r.transpose();
    }
    out.y.y = m.scaler.from_model(z);
    return out;
}

/// One closed-loop step on the reservoir state alone.
inline Vector closed_loop_step(const EsnModel& m, const Vector& r) {
    return detail::step(m, detail::readout(m, r), r);
}

/// d r(i+1) / d r(i) of the closed-loop map, given the post-update state r(i+1).
inline Matrix esn_jacobian(const EsnModel& m, const Vector& r_next) {
    detail::require_trained(m);
    if (r_next.size() != m.hyper.n_r) throw ContractError("reservoir state has the wrong size");
    const int n_r = m.hyper.n_r;
    Matrix j = Matrix(m.w.transpose());
    j.noalias() += m.w_in.topRows(m.n_lat).transpose() * m.w_out.topRows(n_r).transpose();
    return (1.0 - r_next.array().square()).matrix().asDiagonal() * j;
}

/// The Jacobian applied to a block of tangent vectors without forming it.
inline Matrix esn_jacobian_apply(const EsnModel& m, const Vector& r_next, const Matrix& v) {
    const int n_r = m.hyper.n_r;
    Matrix out = m.w.transpose() * v;
    const Matrix latent = m.w_out.topRows(n_r).transpose() * v;
    out.noalias() += m.w_in.topRows(m.n_lat).transpose() * latent;
    return (1.0 - r_next.array().square()).matrix().asDiagonal() * out;
}

/// Closed-loop dynamics on reservoir states with its tangent map.
inline Propagator make_propagator(const EsnModel& m) {
    detail::require_trained(m);
    Propagator p;
    p.step_interval = m.dt;
    p.advance = [&m](const Vector& r) { return closed_loop_step(m, r); };
    p.push_tangent = [&m](const Vector& r, const Matrix& v) {
        return esn_jacobian_apply(m, closed_loop_step(m, r), v);
    };
    return p;
}

/// Reservoir state after teacher forcing with `inputs` from r = 0.
inline Vector warm_state(const EsnModel& m, const Matrix& inputs) {
    const Matrix states = open_loop_model(m, m.scaler.to_model(inputs), Vector::Zero(m.hyper.n_r));
    return states.row(states.rows() - 1).transpose();
}

struct ScoringOptions {
    double lambda1 = 0.045;
    double threshold = 0.5;
    int n_starts = 5;
    long horizon_steps = 200;  // rollout length per start
    // A candidate also runs this many closed-loop steps from the end of the
    // training data and fails if it leaves the training range by more than
    // `range_tolerance` times the range width. 0 disables the check.
    long long_run_steps = 0;
    double range_tolerance = 1.0;
};

/// Mean latent-space prediction horizon (Lyapunov times) over `n_starts`
/// evenly spaced starts in `sequence`; each start is preceded by a washout of
/// teacher forcing.
inline double forecast_score(const EsnModel& m, const Matrix& sequence, const ScoringOptions& opt) {
    const long washout = std::max(1, m.hyper.washout);
    const long span = static_cast<long>(sequence.rows()) - washout - opt.horizon_steps;
    if (span < 0) throw ContractError("validation sequence too short for washout plus rollout");
    double total = 0.0;
    for (int k = 0; k < opt.n_starts; ++k) {
        const long start = washout + (opt.n_starts > 1 ? span * k / (opt.n_starts - 1) : 0);
        // state after consuming inputs [start - washout, start - 1), last known input start - 1
        const Vector r = start - 1 > start - washout
                             ? warm_state(m, sequence.middleRows(start - washout, washout - 1))
                             : Vector(Vector::Zero(m.hyper.n_r));
        const auto pred = closed_loop(m, sequence.row(start - 1).transpose(), r, opt.horizon_steps);
        total += metrics::prediction_horizon(sequence.middleRows(start, opt.horizon_steps), pred.y.y, m.dt,
                                             opt.lambda1, opt.threshold, m.dt);
    }
    return total / opt.n_starts;
}

/// Largest excursion of the rows of `y` outside the per-component range of
/// `reference`, in units of that range; 0 when `y` stays inside.
inline double range_excursion(const Matrix& y, const Matrix& reference) {
    if (y.cols() != reference.cols()) throw ContractError("range check needs matching widths");
    double worst = 0.0;
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        const double lo = reference.col(j).minCoeff(), hi = reference.col(j).maxCoeff();
        const double width = std::max(hi - lo, std::numeric_limits<double>::min());
        const double above = (y.col(j).maxCoeff() - hi) / width;
        const double below = (lo - y.col(j).minCoeff()) / width;
        worst = std::max({worst, above, below});
    }
    return worst;
}

/// Closed loop of `steps` steps after teacher forcing with the last
/// `washout` rows of `sequence`; returns its range excursion against `sequence`.
inline double long_run_excursion(const EsnModel& m, const Matrix& sequence, long steps) {
    const Eigen::Index warm = std::min<Eigen::Index>(std::max(1, m.hyper.washout), sequence.rows() - 1);
    const Vector r = warm_state(m, sequence.middleRows(sequence.rows() - 1 - warm, warm));
    const auto run = closed_loop(m, sequence.row(sequence.rows() - 1).transpose(), r, steps);
    return range_excursion(run.y.y, sequence);
}

struct CandidateScore {
    EsnHyper hyper;
    double score = 0.0;
    bool failed = false;
    std::string note;
};

struct SearchResult {
    EsnHyper best;
    std::vector<CandidateScore> scores;
};

namespace detail {

inline bool same_reservoir(const EsnHyper& a, const EsnHyper& b) {
    return a.n_r == b.n_r && a.sigma_in == b.sigma_in && a.rho == b.rho && a.connectivity == b.connectivity &&
           a.washout == b.washout && a.seed == b.seed;
}

}  // namespace detail

/// Exhaustive search. Candidates that differ only in beta share one reservoir
/// run and one Gram matrix when they are adjacent in `grid`.
inline SearchResult hyper_search(const cae::LatentTrajectory& train, const cae::LatentTrajectory& validation,
                                 const std::vector<EsnHyper>& grid, const ScoringOptions& opt) {
    if (grid.empty()) throw ContractError("hyperparameter grid is empty");
    const int n_lat = static_cast<int>(train.y.cols());
    SearchResult result;

    EsnModel base;
    bool have_base = false;
    Matrix gram, rhs;
    for (const EsnHyper& h : grid) {
        CandidateScore cs;
        cs.hyper = h;
        try {
            if (!have_base || !detail::same_reservoir(base.hyper, h)) {
                have_base = false;
                base = generate_reservoir(h, n_lat, train.dt_sample);
                base.scaler = LatentScaler::fit(train.y);
                const Matrix z = base.scaler.to_model(train.y);
                const Eigen::Index n = z.rows() - 1;
                if (n <= h.washout) throw ContractError("training sequence shorter than the washout");
                const Matrix states = open_loop_model(base, z.topRows(n), Vector::Zero(h.n_r));
                const Eigen::Index rows = n - h.washout;
                Matrix design(rows, h.n_r + 1);
                design.leftCols(h.n_r) = states.bottomRows(rows);
                design.col(h.n_r).setOnes();
                gram = design.transpose() * design;
                rhs = design.transpose() * z.bottomRows(rows);
                have_base = true;
            }
            EsnModel m = base;
            m.hyper.beta = h.beta;
            Matrix g = gram;
            g.diagonal().array() += h.beta;
            m.w_out = Eigen::LDLT<Matrix>(g).solve(rhs);
            if (!m.w_out.allFinite()) throw NumericalError("readout is not finite");
            cs.score = forecast_score(m, validation.y, opt);
            if (opt.long_run_steps > 0) {
                const double excursion = long_run_excursion(m, train.y, opt.long_run_steps);
                if (excursion > opt.range_tolerance) {
                    cs.failed = true;
                    std::ostringstream os;
                    os << "closed loop leaves the training range by " << excursion << " widths within "
                       << opt.long_run_steps << " steps";
                    cs.note = os.str();
                }
            }
        } catch (const Error& e) {
            cs.failed = true;
            cs.score = 0.0;
            cs.note = e.what();
        }
        result.scores.push_back(cs);
    }

    const CandidateScore* best = nullptr;
    for (const auto& cs : result.scores) {
        if (cs.failed) continue;
        if (!best || cs.score > best->score ||
            (cs.score == best->score &&
             (cs.hyper.n_r < best->hyper.n_r || (cs.hyper.n_r == best->hyper.n_r && cs.hyper.rho < best->hyper.rho))))
            best = &cs;
    }
    if (!best) {
        std::ostringstream os;
        os << "every candidate failed:";
        for (const auto& cs : result.scores)
            os << "\n  rho=" << cs.hyper.rho << " sigma_in=" << cs.hyper.sigma_in << " beta=" << cs.hyper.beta << ": "
               << cs.note;
        throw SearchError(os.str());
    }
    result.best = best->hyper;
    return result;
}

/// Every combination of the listed values; beta varies fastest so reservoirs are shared.
inline std::vector<EsnHyper> make_grid(const EsnHyper& base, const std::vector<double>& rhos,
                                       const std::vector<double>& sigmas, const std::vector<double>& betas) {
    std::vector<EsnHyper> grid;
    for (double rho : rhos)
        for (double sigma : sigmas)
            for (double beta : betas) {
                EsnHyper h = base;
                h.rho = rho;
                h.sigma_in = sigma;
                h.beta = beta;
                grid.push_back(h);
            }
    return grid;
}

}  // namespace latstab::esn
