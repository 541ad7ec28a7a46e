// Tangent-space stability analysis over an arbitrary discrete-time propagator:
// Lyapunov exponents by repeated QR (Benettin), covariant Lyapunov vectors by
// the forward/backward Ginelli procedure, the Kaplan-Yorke dimension, the
// unstable/neutral/stable split and CLV angles.
#pragma once

#include "latstab/core.hpp"

#include <algorithm>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace latstab {

/// A discrete-time dynamical system together with its tangent map.
///
/// `push_tangent(x, V)` must return J(x)·V where J is the Jacobian of one
/// `advance` step taken from x; it has to be linear in V.
struct Propagator {
    std::function<Vector(const Vector&)> advance;
    std::function<Matrix(const Vector&, const Matrix&)> push_tangent;
    double step_interval = 1.0;
};

struct LyapunovSpectrum {
    Vector lambdas;          // 1/time, non-increasing
    Matrix history;          // one row per checkpoint, running estimates
    Vector history_times;    // elapsed time at each checkpoint
    double t_total = 0.0;

    Eigen::Index size() const { return lambdas.size(); }
};

struct ClvSet {
    Vector times;
    std::vector<Matrix> vectors;  // one (dimension x m) matrix per time, unit columns
    Matrix states;                // row k is the trajectory point at times[k]
    LyapunovSpectrum lambdas;     // forward exponents over the window, in column order
    long steps_between = 1;       // propagator steps separating consecutive stored times
};

struct SubspaceSplit {
    std::vector<int> unstable;  // 0-based indices into the sorted spectrum
    std::vector<int> neutral;
    std::vector<int> stable;
    double tol_zero = 0.0;
};

enum class Pairing { unstable_neutral, unstable_stable, neutral_stable };

inline constexpr Pairing all_pairings[] = {Pairing::unstable_neutral, Pairing::unstable_stable,
                                           Pairing::neutral_stable};

inline std::string to_string(Pairing p) {
    switch (p) {
        case Pairing::unstable_neutral: return "unstable-neutral";
        case Pairing::unstable_stable: return "unstable-stable";
        case Pairing::neutral_stable: return "neutral-stable";
    }
    return "unknown";
}

inline Pairing pairing_from_string(const std::string& s) {
    for (Pairing p : all_pairings) {
        if (to_string(p) == s) return p;
    }
    throw ContractError("unknown subspace pairing '" + s + "'");
}

namespace detail {

inline Matrix random_orthonormal(Eigen::Index dim, Eigen::Index m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix basis(dim, m);
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < dim; ++i) basis(i, j) = normal(rng);
    thin_qr_in_place(basis);
    return basis;
}

inline void check_arguments(const Propagator& prop, const Vector& state0, int m, int ortho_every) {
    if (!prop.advance || !prop.push_tangent) throw ContractError("propagator callbacks are not set");
    if (!(prop.step_interval > 0.0)) throw ContractError("propagator step interval must be positive");
    if (m < 1 || m > state0.size())
        throw ContractError("number of exponents must lie in [1, " + std::to_string(state0.size()) + "]");
    if (ortho_every < 1) throw ContractError("ortho_every must be >= 1");
}

// Propagates `basis` over `steps` steps and returns the advanced state.
inline Vector propagate_block(const Propagator& prop, Vector state, Matrix& basis, int steps) {
    for (int s = 0; s < steps; ++s) {
        basis = prop.push_tangent(state, basis);
        state = prop.advance(state);
    }
    if (!basis.allFinite())
        throw NumericalError("tangent vectors overflowed between orthonormalizations; use a smaller ortho_every");
    if (!state.allFinite()) throw NumericalError("trajectory became non-finite during tangent propagation");
    return state;
}

inline void accumulate_log_diagonal(const Matrix& r, Vector& sums) {
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
        if (!(r(i, i) > 1e-300))
            throw DegenerateTangentError("R diagonal entry " + std::to_string(i) + " vanished");
        sums(i) += std::log(r(i, i));
    }
}

}  // namespace detail

/// Lyapunov exponents by repeated tangent propagation and thin QR.
///
/// The first `transient_steps` steps only align the random initial basis with
/// the dominant directions; their log-growth is not averaged. The averaging
/// window is the following `n_steps` steps.
inline LyapunovSpectrum benettin_les(const Propagator& prop, Vector state0, int m, long n_steps, int ortho_every,
                                     long checkpoint_every, std::uint64_t seed, long transient_steps = 0) {
    detail::check_arguments(prop, state0, m, ortho_every);
    if (n_steps < 1) throw ContractError("n_steps must be >= 1");
    if (transient_steps < 0) throw ContractError("transient_steps must be >= 0");
    if (checkpoint_every < 1) checkpoint_every = n_steps;

    Matrix basis = detail::random_orthonormal(state0.size(), m, seed);
    Vector sums = Vector::Zero(m);
    Vector state = std::move(state0);
    for (long done = 0; done < transient_steps;) {
        const int block = static_cast<int>(std::min<long>(ortho_every, transient_steps - done));
        state = detail::propagate_block(prop, std::move(state), basis, block);
        thin_qr_in_place(basis);
        done += block;
    }

    std::vector<Vector> rows;
    std::vector<double> row_times;
    long done = 0;
    while (done < n_steps) {
        const int block = static_cast<int>(std::min<long>(ortho_every, n_steps - done));
        state = detail::propagate_block(prop, std::move(state), basis, block);
        const Matrix r = thin_qr_in_place(basis);
        detail::accumulate_log_diagonal(r, sums);
        const long before = done;
        done += block;
        // a checkpoint fires whenever a multiple of checkpoint_every is crossed
        if (done / checkpoint_every != before / checkpoint_every) {
            const double elapsed = static_cast<double>(done) * prop.step_interval;
            rows.push_back(sums / elapsed);
            row_times.push_back(elapsed);
        }
    }

    LyapunovSpectrum out;
    out.t_total = static_cast<double>(n_steps) * prop.step_interval;
    Vector lambdas = sums / out.t_total;

    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return lambdas(a) > lambdas(b); });

    out.lambdas.resize(m);
    for (int i = 0; i < m; ++i) out.lambdas(i) = lambdas(order[i]);

    if (row_times.empty() || row_times.back() != out.t_total) {
        rows.push_back(lambdas);
        row_times.push_back(out.t_total);
    }
    out.history.resize(static_cast<Eigen::Index>(rows.size()), m);
    out.history_times.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        for (int i = 0; i < m; ++i) out.history(static_cast<Eigen::Index>(k), i) = rows[k](order[i]);
        out.history_times(static_cast<Eigen::Index>(k)) = row_times[k];
    }
    out.history.bottomRows(1) = out.lambdas.transpose();
    return out;
}

/// Covariant Lyapunov vectors.
///
/// All window lengths count QR intervals of `ortho_every` propagator steps.
/// CLVs are reported at every `stride`-th QR interval of the first `n_window`
/// intervals after the forward transient; the trailing `n_backward_transient`
/// intervals only serve to converge the backward iteration.
inline ClvSet ginelli_clvs(const Propagator& prop, Vector state0, int m, long n_forward_transient, long n_window,
                           long n_backward_transient, int ortho_every, std::uint64_t seed, long stride = 1) {
    detail::check_arguments(prop, state0, m, ortho_every);
    if (n_window < 1) throw ContractError("n_window must be >= 1");
    if (n_forward_transient < 0 || n_backward_transient < 0) throw ContractError("transients must be >= 0");
    if (stride < 1) throw ContractError("CLV stride must be >= 1");

    Matrix basis = detail::random_orthonormal(state0.size(), m, seed);
    Vector state = std::move(state0);
    Vector scratch = Vector::Zero(m);
    for (long k = 0; k < n_forward_transient; ++k) {
        state = detail::propagate_block(prop, std::move(state), basis, ortho_every);
        const Matrix r = thin_qr_in_place(basis);
        detail::accumulate_log_diagonal(r, scratch);
    }

    const long total = n_window + n_backward_transient;
    const long n_stored = (n_window + stride - 1) / stride;
    std::vector<Matrix> q_stored;
    std::vector<Vector> x_stored;
    q_stored.reserve(static_cast<std::size_t>(n_stored));
    x_stored.reserve(static_cast<std::size_t>(n_stored));
    std::vector<Matrix> r_all(static_cast<std::size_t>(total));

    // index k refers to the time at the end of the k-th interval; Q_0 is the
    // converged basis at the start of the window
    Vector sums = Vector::Zero(m);
    for (long k = 0; k <= total; ++k) {
        if (k < n_window && k % stride == 0) {
            q_stored.push_back(basis);
            x_stored.push_back(state);
        }
        if (k == total) break;
        state = detail::propagate_block(prop, std::move(state), basis, ortho_every);
        r_all[static_cast<std::size_t>(k)] = thin_qr_in_place(basis);
        for (Eigen::Index i = 0; i < m; ++i) {
            if (r_all[static_cast<std::size_t>(k)](i, i) < 1e-14)
                throw DegenerateTangentError("R diagonal entry " + std::to_string(i) + " below 1e-14");
        }
        detail::accumulate_log_diagonal(r_all[static_cast<std::size_t>(k)], sums);
    }

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> uniform(0.1, 1.0);
    Matrix coeffs = Matrix::Zero(m, m);
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i <= j; ++i) coeffs(i, j) = uniform(rng);
    coeffs.colwise().normalize();

    ClvSet out;
    out.steps_between = stride * ortho_every;
    out.vectors.resize(static_cast<std::size_t>(n_stored));
    out.times.resize(n_stored);
    out.states.resize(n_stored, state.size());
    const double interval = ortho_every * prop.step_interval;
    const double window_start = static_cast<double>(n_forward_transient) * interval;

    // C_{k} = R_{k+1}^{-1} C_{k+1}, walking from the end of the backward transient
    for (long k = total; k >= 0; --k) {
        if (k < n_window && k % stride == 0) {
            const auto slot = static_cast<std::size_t>(k / stride);
            Matrix clv = q_stored[slot] * coeffs;
            clv.colwise().normalize();
            out.vectors[slot] = std::move(clv);
            out.times(static_cast<Eigen::Index>(slot)) = window_start + static_cast<double>(k) * interval;
            out.states.row(static_cast<Eigen::Index>(slot)) = x_stored[slot].transpose();
        }
        if (k == 0) break;
        const Matrix& r = r_all[static_cast<std::size_t>(k - 1)];
        coeffs = r.triangularView<Eigen::Upper>().solve(coeffs);
        coeffs.colwise().normalize();
        if (!coeffs.allFinite()) throw DegenerateTangentError("backward coefficient iteration became non-finite");
    }

    out.lambdas.t_total = static_cast<double>(total) * interval;
    out.lambdas.lambdas = sums / out.lambdas.t_total;
    out.lambdas.history = out.lambdas.lambdas.transpose();
    out.lambdas.history_times = Vector::Constant(1, out.lambdas.t_total);
    return out;
}

struct KaplanYorke {
    double dimension = 0.0;
    int index = 0;           // j: number of exponents with non-negative cumulative sum
    bool saturated = false;  // every cumulative sum was non-negative
};

/// Kaplan-Yorke dimension j + (sum_{i<=j} lambda_i) / |lambda_{j+1}|.
inline KaplanYorke kaplan_yorke(const Vector& lambdas) {
    KaplanYorke out;
    double cumulative = 0.0;
    int j = 0;
    for (Eigen::Index i = 0; i < lambdas.size(); ++i) {
        if (cumulative + lambdas(i) < 0.0) break;
        cumulative += lambdas(i);
        j = static_cast<int>(i) + 1;
    }
    out.index = j;
    if (j == lambdas.size()) {
        out.dimension = static_cast<double>(j);
        out.saturated = true;
        return out;
    }
    out.dimension = j + cumulative / std::abs(lambdas(j));
    return out;
}

inline KaplanYorke kaplan_yorke(const LyapunovSpectrum& spectrum) { return kaplan_yorke(spectrum.lambdas); }

inline SubspaceSplit classify_subspaces(const Vector& lambdas, double tol_zero) {
    if (!(tol_zero > 0.0)) throw ContractError("tol_zero must be positive");
    SubspaceSplit split;
    split.tol_zero = tol_zero;
    for (Eigen::Index i = 0; i < lambdas.size(); ++i) {
        const int idx = static_cast<int>(i);
        if (lambdas(i) > tol_zero)
            split.unstable.push_back(idx);
        else if (lambdas(i) < -tol_zero)
            split.stable.push_back(idx);
        else
            split.neutral.push_back(idx);
    }
    return split;
}

inline SubspaceSplit classify_subspaces(const LyapunovSpectrum& spectrum, double tol_zero) {
    return classify_subspaces(spectrum.lambdas, tol_zero);
}

/// Angle in degrees between the lines spanned by two unit vectors.
inline double clv_angle(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
    if (a.size() != b.size()) throw ContractError("CLV angle between vectors of different length");
    if (std::abs(a.norm() - 1.0) > 1e-6 || std::abs(b.norm() - 1.0) > 1e-6)
        throw ContractError("CLV angle requires unit-norm vectors");
    const double c = std::clamp(std::abs(a.dot(b)), 0.0, 1.0);
    return 180.0 / std::numbers::pi * std::acos(c);
}

inline std::pair<int, int> leading_pair(const SubspaceSplit& split, Pairing pairing) {
    auto leading = [](const std::vector<int>& set, const char* name) {
        if (set.empty()) throw ContractError(std::string(name) + " subspace is empty");
        return set.front();
    };
    switch (pairing) {
        case Pairing::unstable_neutral:
            return {leading(split.unstable, "unstable"), leading(split.neutral, "neutral")};
        case Pairing::unstable_stable:
            return {leading(split.unstable, "unstable"), leading(split.stable, "stable")};
        case Pairing::neutral_stable:
            return {leading(split.neutral, "neutral"), leading(split.stable, "stable")};
    }
    throw ContractError("unknown pairing");
}

/// One angle per stored time between the leading CLVs of two subspaces.
inline std::vector<double> angle_series(const ClvSet& clvs, const SubspaceSplit& split, Pairing pairing) {
    const auto [i, j] = leading_pair(split, pairing);
    std::vector<double> out;
    out.reserve(clvs.vectors.size());
    for (const Matrix& v : clvs.vectors) {
        if (std::max(i, j) >= v.cols()) throw ContractError("split refers to more vectors than were computed");
        out.push_back(clv_angle(v.col(i), v.col(j)));
    }
    return out;
}

}  // namespace latstab
