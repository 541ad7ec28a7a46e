#include "latstab/ks.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace latstab;
using namespace latstab::ks;

namespace {

constexpr double kLength = 22.0;

Vector sine_mode(const Grid& g, double amplitude, int m = 1) {
    Vector u(g.points);
    for (int i = 0; i < g.points; ++i) u(i) = amplitude * std::sin(2.0 * std::numbers::pi * m * g.x(i) / g.length);
    return u;
}

double growth_rate(double length, int m = 1) {
    const double k = 2.0 * std::numbers::pi * m / length;
    return k * k - k * k * k * k;
}

Vector attractor_state(const Grid& g, double t = 300.0, std::uint64_t seed = 7) {
    const Solver solver(g, 0.05);
    Vector u = default_initial_condition(g, seed).u;
    for (long i = 0; i < steps_in(t, 0.05); ++i) u = solver.step(u);
    return u;
}

Vector shifted(const Vector& u, int s) {
    Vector out(u.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) out((i + s) % u.size()) = u(i);
    return out;
}

}  // namespace

TEST(KsGrid, SpacingAndWavenumbers) {
    const Grid g = make_grid(22.0, 64);
    EXPECT_DOUBLE_EQ(g.spacing(), 0.34375);
    for (int i = 0; i + 1 < g.points; ++i) EXPECT_NEAR(g.x(i + 1) - g.x(i), 0.34375, 1e-14);
    for (int i = 1; i < g.points; ++i) EXPECT_DOUBLE_EQ(g.wavenumbers(g.points - i), -g.wavenumbers(i));
    EXPECT_NEAR(g.wavenumbers(1), 2.0 * std::numbers::pi / 22.0, 1e-15);
}

TEST(KsGrid, FullScaleGridAccepted) {
    const Grid g = make_grid(22.0, 512);
    EXPECT_EQ(g.x.size(), 512);
    EXPECT_DOUBLE_EQ(g.spacing(), 22.0 / 512.0);
}

TEST(KsGrid, RejectsBadConfiguration) {
    EXPECT_THROW(make_grid(22.0, 7), ConfigError);
    EXPECT_THROW(make_grid(22.0, 96), ConfigError);
    EXPECT_THROW(make_grid(22.0, 4), ConfigError);
    EXPECT_THROW(make_grid(0.0, 64), ConfigError);
    EXPECT_THROW(make_grid(-1.0, 64), ConfigError);
}

TEST(KsRhs, ZeroAndConstantStatesAreFixedPoints) {
    const Grid g = make_grid(kLength, 64);
    EXPECT_LT(rhs(g, {Vector::Zero(64), 0.0}).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT(rhs(g, {Vector::Constant(64, 1.7), 0.0}).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KsRhs, SingleModeMatchesLinearGrowthCoefficient) {
    const Grid g = make_grid(kLength, 64);
    const double eps = 1e-6;
    const Vector u = sine_mode(g, eps);
    const Vector f = rhs(g, {u, 0.0});
    const double c = growth_rate(kLength);
    EXPECT_NEAR(c, 0.0749, 5e-5);
    EXPECT_LT((f - c * u).norm() / (c * u).norm(), 1e-4);
}

TEST(KsRhs, MeanOfRhsEqualsMeanOfNonlinearTerm) {
    const Grid g = make_grid(kLength, 64);
    const Vector u = attractor_state(g, 50.0);
    const Vector f = rhs(g, {u, 0.0});
    // the linear terms do not touch the mean and the dealiased u u_x has zero mean
    EXPECT_NEAR(f.mean(), 0.0, 1e-12);
}

TEST(KsRhs, NonFiniteInputRejected) {
    const Grid g = make_grid(kLength, 64);
    Vector u = Vector::Zero(64);
    u(3) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(rhs(g, {u, 0.0}), NumericalError);
    EXPECT_THROW(rhs(g, {Vector::Zero(32), 0.0}), ContractError);
}

TEST(KsStep, ZeroStateStaysZero) {
    const Grid g = make_grid(kLength, 64);
    PhysicalState s{Vector::Zero(64), 0.0};
    for (int i = 0; i < 20; ++i) s = step_etdrk4(g, s, 0.05);
    EXPECT_EQ(s.u.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NEAR(s.t, 1.0, 1e-12);
}

TEST(KsStep, SingleModeFollowsLinearizedSolution) {
    const Grid g = make_grid(kLength, 64);
    const Solver solver(g, 0.05);
    const double eps = 1e-6;
    const Vector mode = sine_mode(g, 1.0);
    Vector u = sine_mode(g, eps);
    const double c = growth_rate(kLength);
    for (long i = 1; i <= steps_in(50.0, 0.05); ++i) {
        u = solver.step(u);
        if (i % 200 == 0) {
            const double t = i * 0.05;
            // amplitude of the seeded mode; the forced second harmonic grows
            // faster (k^2 - k^4 = 0.22) but is orthogonal to it
            const double amplitude = u.dot(mode) / mode.squaredNorm();
            ASSERT_NEAR(amplitude / (eps * std::exp(c * t)), 1.0, 1e-3) << "t=" << t;
        }
    }
}

namespace {

double self_convergence_ratio(const Grid& g, const Vector& u0, double dt, double horizon) {
    auto integrate = [&](double h) {
        const Solver solver(g, h);
        Vector u = u0;
        for (long i = 0; i < steps_in(horizon, h); ++i) u = solver.step(u);
        return u;
    };
    const Vector reference = integrate(dt / 100.0);
    return (integrate(dt) - reference).norm() / (integrate(dt / 2.0) - reference).norm();
}

}  // namespace

TEST(KsStep, FourthOrderSelfConvergence) {
    // non-stiff resolution: clean asymptotic regime
    const Grid coarse = make_grid(kLength, 16);
    Vector smooth(16);
    for (int i = 0; i < 16; ++i)
        smooth(i) = std::cos(2.0 * std::numbers::pi * coarse.x(i) / kLength) +
                    0.5 * std::sin(4.0 * std::numbers::pi * coarse.x(i) / kLength);
    EXPECT_NEAR(self_convergence_ratio(coarse, smooth, 0.1, 4.0), 16.0, 1.0);

    // production resolution on the attractor; stiff slaved modes delay the
    // asymptotic regime, so the check uses dt = 0.01
    const Grid g = make_grid(kLength, 64);
    const double ratio = self_convergence_ratio(g, attractor_state(g, 100.0), 0.01, 1.0);
    EXPECT_GT(ratio, 12.0);
    EXPECT_LT(ratio, 20.0);
}

TEST(KsSimulate, SampleCountAndTimes) {
    const Grid g = make_grid(kLength, 64);
    const auto traj = simulate(g, default_initial_condition(g, 1), 0.05, 10.0, 5.0, 1);
    EXPECT_EQ(traj.size(), 100);
    EXPECT_NEAR(traj.t0, 5.0, 1e-12);
    EXPECT_DOUBLE_EQ(traj.dt_sample, 0.05);
    const auto sparse = simulate(g, default_initial_condition(g, 1), 0.05, 10.0, 5.0, 4);
    EXPECT_EQ(sparse.size(), 25);
    EXPECT_EQ(sparse.u.row(1), traj.u.row(4));
}

TEST(KsSimulate, DeterministicAndBitIdentical) {
    const Grid g = make_grid(kLength, 64);
    const auto a = simulate(g, default_initial_condition(g, 11), 0.05, 60.0, 10.0, 2);
    const auto b = simulate(g, default_initial_condition(g, 11), 0.05, 60.0, 10.0, 2);
    EXPECT_TRUE((a.u.array() == b.u.array()).all());
    EXPECT_THROW(simulate(g, default_initial_condition(g, 1), 0.05, 5.0, 5.0, 1), ConfigError);
    EXPECT_THROW(simulate(g, default_initial_condition(g, 1), 0.05, 10.0, 5.0, 0), ConfigError);
}

TEST(KsSimulate, BlowUpReportsTime) {
    const Grid g = make_grid(kLength, 64);
    PhysicalState huge{Vector::Constant(64, 0.0), 0.0};
    huge.u = sine_mode(g, 1e150, 3);
    try {
        simulate(g, huge, 0.05, 10.0, 0.0, 1);
        FAIL() << "expected blow-up";
    } catch (const BlowUpError& e) {
        EXPECT_GT(e.time(), 0.0);
    } catch (const NumericalError&) {
        // overflow may already surface as a non-finite state check
    }
}

TEST(KsInvariants, SpatialMeanConserved) {
    const Grid g = make_grid(kLength, 64);
    const auto traj = simulate(g, default_initial_condition(g, 3), 0.05, 100.0, 0.0, 100);
    ASSERT_NEAR(traj.u.row(0).mean(), 0.0, 1e-15);
    for (Eigen::Index i = 0; i < traj.size(); ++i) EXPECT_LE(std::abs(traj.u.row(i).mean()), 1e-6);
}

TEST(KsInvariants, TranslationEquivariance) {
    const Grid g = make_grid(kLength, 64);
    const PhysicalState u0 = default_initial_condition(g, 5);
    for (int s : {1, 5, 17}) {
        const auto a = simulate(g, u0, 0.05, 10.0, 0.0, 200);
        const auto b = simulate(g, {shifted(u0.u, s), 0.0}, 0.05, 10.0, 0.0, 200);
        for (Eigen::Index i = 0; i < a.size(); ++i)
            EXPECT_LT((shifted(a.u.row(i).transpose(), s) - b.u.row(i).transpose()).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(KsJacobian, ZeroStateHasLinearSpectrum) {
    const Grid g = make_grid(kLength, 64);
    const Matrix j = jacobian(g, {Vector::Zero(64), 0.0});
    for (int m = 1; m < 32; ++m) {
        const Vector v = sine_mode(g, 1.0, m);
        EXPECT_LT((j * v - growth_rate(kLength, m) * v).norm(), 1e-9 * (1.0 + std::abs(growth_rate(kLength, m))));
    }
    // row sums of the linear part vanish: constants are in its kernel
    const Solver solver(g, 0.05);
    EXPECT_LT(solver.linear_operator().rowwise().sum().cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_TRUE(j.allFinite());
}

TEST(KsJacobian, MatchesCentralDifferencesOnAttractor) {
    const Grid g = make_grid(kLength, 64);
    const Solver solver(g, 0.05);
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> normal;
    Vector u = attractor_state(g, 200.0);
    for (int trial = 0; trial < 10; ++trial) {
        for (int i = 0; i < 40; ++i) u = solver.step(u);  // successive attractor states, 2 time units apart
        const Matrix j = solver.jacobian(u);
        Vector w(64);
        for (auto& x : w) x = normal(rng);
        w.normalize();
        const double eps = std::max(1e-6 * u.cwiseAbs().maxCoeff(), 1e-8);
        const Vector fd = (solver.rhs(u + eps * w) - solver.rhs(u - eps * w)) / (2.0 * eps);
        const Vector jw = j * w;
        EXPECT_LT((jw - fd).norm() / jw.norm(), 1e-6) << "trial " << trial;
    }
}

TEST(KsTangent, ZeroBasisStaysZero) {
    const Grid g = make_grid(kLength, 64);
    const Vector u = attractor_state(g, 20.0);
    const auto next = tangent_step(g, {u, 0.0}, {Matrix::Zero(64, 3), 0.0}, 0.05);
    EXPECT_EQ(next.v.cwiseAbs().maxCoeff(), 0.0);
}

TEST(KsTangent, SingleModeGrowthAtZeroState) {
    const Grid g = make_grid(kLength, 64);
    const Solver solver(g, 0.05);
    Matrix v = sine_mode(g, 1.0);
    const Vector zero = Vector::Zero(64);
    const double t = 40.0;
    for (long i = 0; i < steps_in(t, 0.05); ++i) v = solver.step_tangent(zero, v);
    const double growth = v.norm() / sine_mode(g, 1.0).norm();
    EXPECT_NEAR(growth / std::exp(growth_rate(kLength) * t), 1.0, 1e-3);
}

TEST(KsTangent, Linearity) {
    const Grid g = make_grid(kLength, 64);
    const Vector u = attractor_state(g, 30.0);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> normal;
    Matrix v1(64, 4), v2(64, 4);
    for (auto& x : v1.reshaped()) x = normal(rng);
    for (auto& x : v2.reshaped()) x = normal(rng);
    const double a = normal(rng), b = normal(rng);
    const Solver solver(g, 0.05);
    const Matrix lhs = solver.step_tangent(u, a * v1 + b * v2);
    const Matrix rhs_ = a * solver.step_tangent(u, v1) + b * solver.step_tangent(u, v2);
    EXPECT_LT((lhs - rhs_).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + rhs_.cwiseAbs().maxCoeff()));
}

TEST(KsTangent, MatchesFiniteDifferenceOfStep) {
    const Grid g = make_grid(kLength, 64);
    const Solver solver(g, 0.05);
    const Vector u = attractor_state(g, 120.0);
    std::mt19937_64 rng(77);
    std::normal_distribution<double> normal;
    for (int trial = 0; trial < 5; ++trial) {
        Vector w(64);
        for (auto& x : w) x = normal(rng);
        w.normalize();
        const double eps = 1e-6;
        const Vector fd = (solver.step(u + eps * w) - solver.step(u - eps * w)) / (2.0 * eps);
        const Vector tw = solver.step_tangent(u, w);
        EXPECT_LT((tw - fd).norm() / tw.norm(), 1e-7);
    }
}

TEST(KsPropagator, MeanProjectionKeepsTangentZeroMean) {
    const Grid g = make_grid(kLength, 64);
    const Propagator p = make_propagator(g, 0.05);
    const Vector u = attractor_state(g, 20.0);
    const Matrix v = p.push_tangent(u, Matrix::Ones(64, 2));
    EXPECT_LT(v.colwise().mean().cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_DOUBLE_EQ(p.step_interval, 0.05);
}
