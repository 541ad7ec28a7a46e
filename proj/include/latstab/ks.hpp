// Pseudo-spectral Kuramoto-Sivashinsky solver on a periodic grid:
//
//     u_t + u_xx + u_xxxx + u u_x = 0,   x in [0, L)
//
// Time stepping is ETDRK4 in Fourier space; the quadratic term is dealiased
// with the 2/3 rule. The tangent map of a step is the exact linearization of
// the ETDRK4 step, which keeps the tangent dynamics stable at the same dt as
// the nonlinear trajectory.
#pragma once

#include "latstab/core.hpp"
#include "latstab/tangent.hpp"

#include <unsupported/Eigen/FFT>

#include <memory>
#include <numbers>
#include <random>

namespace latstab::ks {

struct Grid {
    double length = 0.0;
    int points = 0;
    Vector x;            // equispaced nodes in [0, L)
    Vector wavenumbers;  // 2*pi*m/L in FFT order; Nyquist entry is 0 (conjugate symmetric)

    double spacing() const { return length / points; }
};

inline Grid make_grid(double length, int points) {
    if (!(length > 0.0) || !std::isfinite(length)) throw ConfigError("domain length must be positive");
    if (points < 8 || !is_power_of_two(points))
        throw ConfigError("grid points must be a power of two >= 8, got " + std::to_string(points));
    Grid g;
    g.length = length;
    g.points = points;
    g.x.resize(points);
    g.wavenumbers.resize(points);
    for (int i = 0; i < points; ++i) {
        g.x(i) = length * i / points;
        const int m = i <= points / 2 ? i : i - points;
        g.wavenumbers(i) = (i == points / 2) ? 0.0 : 2.0 * std::numbers::pi * m / length;
    }
    return g;
}

struct PhysicalState {
    Vector u;
    double t = 0.0;
};

/// Uniformly sampled snapshots, one row per time.
struct PhysicalTrajectory {
    Matrix u;
    double t0 = 0.0;
    double dt_sample = 0.0;
    double length = 0.0;

    Eigen::Index size() const { return u.rows(); }
    double time(Eigen::Index i) const { return t0 + static_cast<double>(i) * dt_sample; }
    PhysicalState state(Eigen::Index i) const { return {u.row(i).transpose(), time(i)}; }
};

struct TangentBasis {
    Matrix v;
    double t = 0.0;
};

/// Precomputed spectral operators and ETDRK4 coefficients for one (grid, dt).
///
/// Instances hold an FFT plan cache and must not be shared between threads;
/// copies are independent.
class Solver {
public:
    Solver(Grid grid, double dt) : grid_(std::move(grid)), dt_(dt) {
        if (!(dt > 0.0)) throw ConfigError("time step must be positive");
        const int n = grid_.points;
        linear_.resize(n);
        ik_.resize(n);
        mask_.resize(n);
        const int cutoff = n / 3;
        for (int i = 0; i < n; ++i) {
            const int m = i <= n / 2 ? i : i - n;
            const double k = 2.0 * std::numbers::pi * std::abs(m) / grid_.length;
            linear_(i) = k * k - k * k * k * k;
            ik_(i) = Complex(0.0, grid_.wavenumbers(i));
            mask_(i) = std::abs(m) <= cutoff && i != n / 2 ? 1.0 : 0.0;
        }
        compute_etd_coefficients();
    }

    const Grid& grid() const { return grid_; }
    double dt() const { return dt_; }
    int points() const { return grid_.points; }

    /// Linear growth rates k^2 - k^4 of each Fourier mode (FFT order).
    const Vector& linear_rates() const { return linear_; }

    ComplexVector forward(const Vector& u) const {
        ComplexVector out;
        fft_.fwd(out, u);
        return out;
    }

    Vector inverse(const ComplexVector& uhat) const {
        Vector out;
        fft_.inv(out, uhat);
        return out;
    }

    /// f(u) = -u_xx - u_xxxx - u u_x.
    Vector rhs(const Vector& u) const {
        check_input(u);
        const ComplexVector uhat = forward(u);
        ComplexVector fhat = linear_.cwiseProduct(uhat) + nonlinear(uhat);
        return inverse(fhat);
    }

    /// One ETDRK4 step of size dt.
    Vector step(const Vector& u) const {
        check_input(u);
        Stages stages = stage_values(forward(u));
        return inverse(stages.next);
    }

    /// Exact linearization of `step` at u applied to each column of `basis`.
    Matrix step_tangent(const Vector& u, const Matrix& basis) const {
        check_input(u);
        if (basis.rows() != grid_.points) throw ContractError("tangent basis has wrong row count");
        const Stages stages = stage_values(forward(u));
        StageFields fields[4];
        const ComplexVector* hats[4] = {&stages.v, &stages.a, &stages.b, &stages.c};
        for (int s = 0; s < 4; ++s) fields[s] = stage_fields(*hats[s]);

        Matrix out(basis.rows(), basis.cols());
        for (Eigen::Index j = 0; j < basis.cols(); ++j) {
            const ComplexVector dv = forward(basis.col(j));
            const ComplexVector dnv = nonlinear_tangent(fields[0], dv);
            const ComplexVector da = e2_.cwiseProduct(dv) + q_.cwiseProduct(dnv);
            const ComplexVector dna = nonlinear_tangent(fields[1], da);
            const ComplexVector db = e2_.cwiseProduct(dv) + q_.cwiseProduct(dna);
            const ComplexVector dnb = nonlinear_tangent(fields[2], db);
            const ComplexVector dc = e2_.cwiseProduct(da) + q_.cwiseProduct(2.0 * dnb - dnv);
            const ComplexVector dnc = nonlinear_tangent(fields[3], dc);
            const ComplexVector next = e_.cwiseProduct(dv) + f1_.cwiseProduct(dnv) +
                                       2.0 * f2_.cwiseProduct(dna + dnb) + f3_.cwiseProduct(dnc);
            out.col(j) = inverse(next);
        }
        return out;
    }

    /// Dense Jacobian of rhs: J = L - P (diag(P u) D1 P + diag(D1 P u) P), where
    /// L = -D2 - D4 and P is the dealiasing projector.
    Matrix jacobian(const Vector& u) const {
        check_input(u);
        ensure_operators();
        const Vector pu = projector_ * u;
        const Vector dpu = d1p_ * u;
        Matrix inner = pu.asDiagonal() * d1p_;
        inner += dpu.asDiagonal() * projector_;
        return linear_op_ - projector_ * inner;
    }

    /// Real matrix of the linear part -D2 - D4.
    const Matrix& linear_operator() const {
        ensure_operators();
        return linear_op_;
    }

    /// Real matrix representing the Fourier multiplier `symbol`.
    Matrix spectral_matrix(const ComplexVector& symbol) const {
        const int n = grid_.points;
        Matrix out(n, n);
        for (int j = 0; j < n; ++j) {
            Vector e = Vector::Zero(n);
            e(j) = 1.0;
            out.col(j) = inverse(symbol.cwiseProduct(forward(e)));
        }
        return out;
    }

private:
    struct Stages {
        ComplexVector v, a, b, c, next;
    };
    struct StageFields {
        Vector w;   // P s in physical space
        Vector wx;  // (P s)_x in physical space
    };

    void check_input(const Vector& u) const {
        if (u.size() != grid_.points)
            throw ContractError("state has " + std::to_string(u.size()) + " points, grid has " +
                                std::to_string(grid_.points));
        if (!u.allFinite()) throw NumericalError("non-finite entries in KS state");
    }

    ComplexVector nonlinear(const ComplexVector& vhat) const {
        const StageFields f = stage_fields(vhat);
        return nonlinear_from_fields(f);
    }

    ComplexVector nonlinear_from_fields(const StageFields& f) const {
        const Vector product = f.w.cwiseProduct(f.wx);
        return -mask_.cwiseProduct(forward(product));
    }

    StageFields stage_fields(const ComplexVector& vhat) const {
        const ComplexVector masked = mask_.cwiseProduct(vhat);
        return {inverse(masked), inverse(ik_.cwiseProduct(masked))};
    }

    ComplexVector nonlinear_tangent(const StageFields& base, const ComplexVector& dhat) const {
        const StageFields d = stage_fields(dhat);
        const Vector product = d.w.cwiseProduct(base.wx) + base.w.cwiseProduct(d.wx);
        return -mask_.cwiseProduct(forward(product));
    }

    Stages stage_values(const ComplexVector& v) const {
        Stages s;
        s.v = v;
        const ComplexVector nv = nonlinear(v);
        s.a = e2_.cwiseProduct(v) + q_.cwiseProduct(nv);
        const ComplexVector na = nonlinear(s.a);
        s.b = e2_.cwiseProduct(v) + q_.cwiseProduct(na);
        const ComplexVector nb = nonlinear(s.b);
        s.c = e2_.cwiseProduct(s.a) + q_.cwiseProduct(2.0 * nb - nv);
        const ComplexVector nc = nonlinear(s.c);
        s.next = e_.cwiseProduct(v) + f1_.cwiseProduct(nv) + 2.0 * f2_.cwiseProduct(na + nb) + f3_.cwiseProduct(nc);
        // the ETD coefficients are even in m, so the spectrum stays conjugate
        // symmetric and the inverse transform is real
        return s;
    }

    // phi-function combinations averaged over a circle of radius 1 around each
    // h*lambda (Kassam & Trefethen)
    void compute_etd_coefficients() {
        constexpr int contour_points = 32;
        const int n = grid_.points;
        e_.resize(n);
        e2_.resize(n);
        q_.resize(n);
        f1_.resize(n);
        f2_.resize(n);
        f3_.resize(n);
        for (int i = 0; i < n; ++i) {
            const double hl = dt_ * linear_(i);
            e_(i) = std::exp(hl);
            e2_(i) = std::exp(hl / 2.0);
            Complex q{}, f1{}, f2{}, f3{};
            for (int j = 0; j < contour_points; ++j) {
                const double angle = 2.0 * std::numbers::pi * (j + 0.5) / contour_points;
                const Complex z = hl + std::polar(1.0, angle);
                const Complex ez = std::exp(z);
                const Complex z3 = z * z * z;
                q += (std::exp(z / 2.0) - 1.0) / z;
                f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
                f2 += (2.0 + z + ez * (z - 2.0)) / z3;
                f3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
            }
            q_(i) = dt_ * (q / double(contour_points)).real();
            f1_(i) = dt_ * (f1 / double(contour_points)).real();
            f2_(i) = dt_ * (f2 / double(contour_points)).real();
            f3_(i) = dt_ * (f3 / double(contour_points)).real();
        }
    }

    void ensure_operators() const {
        if (linear_op_.size() != 0) return;
        projector_ = spectral_matrix(mask_.cast<Complex>());
        d1p_ = spectral_matrix(ik_.cwiseProduct(mask_.cast<Complex>()));
        linear_op_ = spectral_matrix(linear_.cast<Complex>());
    }

    Grid grid_;
    double dt_;
    Vector linear_;
    ComplexVector ik_;
    Vector mask_;
    Vector e_, e2_, q_, f1_, f2_, f3_;
    mutable Eigen::FFT<double> fft_;
    mutable Matrix projector_, d1p_, linear_op_;
};

inline Vector rhs(const Grid& grid, const PhysicalState& state) { return Solver(grid, 1.0).rhs(state.u); }

inline PhysicalState step_etdrk4(const Grid& grid, const PhysicalState& state, double dt) {
    const Solver solver(grid, dt);
    PhysicalState next{solver.step(state.u), state.t + dt};
    if (!next.u.allFinite()) throw BlowUpError("ETDRK4 step produced non-finite values", next.t);
    return next;
}

inline Matrix jacobian(const Grid& grid, const PhysicalState& state) { return Solver(grid, 1.0).jacobian(state.u); }

inline TangentBasis tangent_step(const Grid& grid, const PhysicalState& state, const TangentBasis& basis, double dt) {
    const Solver solver(grid, dt);
    TangentBasis next{solver.step_tangent(state.u, basis.v), basis.t + dt};
    if (!next.v.allFinite()) throw BlowUpError("tangent vectors overflowed; re-orthonormalize more often", next.t);
    return next;
}

/// 0.1 cos(2 pi x/L)(1 + sin(2 pi x/L)) plus zero-mean uniform noise of the
/// given amplitude.
inline PhysicalState default_initial_condition(const Grid& grid, std::uint64_t seed, double noise = 1e-3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(-noise, noise);
    PhysicalState s;
    s.u.resize(grid.points);
    Vector jitter(grid.points);
    for (int i = 0; i < grid.points; ++i) jitter(i) = uniform(rng);
    jitter.array() -= jitter.mean();
    for (int i = 0; i < grid.points; ++i) {
        const double phase = 2.0 * std::numbers::pi * grid.x(i) / grid.length;
        s.u(i) = 0.1 * std::cos(phase) * (1.0 + std::sin(phase)) + jitter(i);
    }
    return s;
}

/// Integrates from u0, drops [0, t_transient) and keeps every
/// `sample_every`-th state of the remaining window [t_transient, t_total).
inline PhysicalTrajectory simulate(const Grid& grid, const PhysicalState& u0, double dt, double t_total,
                                   double t_transient, int sample_every) {
    if (!(t_transient < t_total)) throw ConfigError("transient must be shorter than the total time");
    if (t_transient < 0.0) throw ConfigError("transient must be non-negative");
    if (sample_every < 1) throw ConfigError("sample_every must be >= 1");
    const Solver solver(grid, dt);
    const long total = steps_in(t_total, dt);
    const long skip = steps_in(t_transient, dt);
    const long kept = (total - skip + sample_every - 1) / sample_every;

    PhysicalTrajectory traj;
    traj.u.resize(kept, grid.points);
    traj.dt_sample = dt * sample_every;
    traj.t0 = u0.t + static_cast<double>(skip) * dt;
    traj.length = grid.length;

    Vector u = u0.u;
    Eigen::Index row = 0;
    for (long i = 0; i < total; ++i) {
        if (i >= skip && (i - skip) % sample_every == 0) traj.u.row(row++) = u.transpose();
        if (i + 1 < total) {
            u = solver.step(u);
            if (!u.allFinite()) throw BlowUpError("KS trajectory diverged", u0.t + static_cast<double>(i + 1) * dt);
        }
    }
    return traj;
}

/// Tangent dynamics of the discretized KS flow, one ETDRK4 step per call.
///
/// With `project_mean` the tangent vectors are kept in the zero-mean
/// subspace; the spatial mean is a conserved quantity and otherwise adds a
/// spurious zero exponent.
inline Propagator make_propagator(const Grid& grid, double dt, bool project_mean = true) {
    auto solver = std::make_shared<Solver>(grid, dt);
    Propagator p;
    p.step_interval = dt;
    p.advance = [solver](const Vector& u) { return solver->step(u); };
    p.push_tangent = [solver, project_mean](const Vector& u, const Matrix& v) {
        Matrix out = solver->step_tangent(u, v);
        if (project_mean) out.rowwise() -= out.colwise().mean();
        return out;
    };
    return p;
}

}  // namespace latstab::ks
