#include "latstab/ks.hpp"
#include "latstab/tangent.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace latstab;

namespace {

Propagator linear_map(const Matrix& a) {
    Propagator p;
    p.step_interval = 1.0;
    p.advance = [a](const Vector& x) -> Vector { return a * x; };
    p.push_tangent = [a](const Vector&, const Matrix& v) -> Matrix { return a * v; };
    return p;
}

Matrix diagonal(std::initializer_list<double> d) {
    Vector v(static_cast<Eigen::Index>(d.size()));
    Eigen::Index i = 0;
    for (double x : d) v(i++) = x;
    return v.asDiagonal();
}

Vector ks_attractor_point(const ks::Grid& g, double t = 300.0) {
    const ks::Solver solver(g, 0.05);
    Vector u = ks::default_initial_condition(g, 3).u;
    for (long i = 0; i < steps_in(t, 0.05); ++i) u = solver.step(u);
    return u;
}

// Angle in degrees from the orthogonal residual; resolves angles far below
// the ~1e-6 degree floor of arccos near 1.
double fine_angle(const Vector& a, const Vector& b) {
    const Vector u = a.normalized(), v = b.normalized();
    const double c = std::abs(u.dot(v));
    const double s = (v - u.dot(v) * u).norm();
    return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

Vector random_unit(std::mt19937_64& rng, Eigen::Index n) {
    std::normal_distribution<double> normal;
    Vector v(n);
    for (auto& x : v) x = normal(rng);
    return v.normalized();
}

}  // namespace

TEST(Benettin, DiagonalMapExponentsExact) {
    const auto spec = benettin_les(linear_map(diagonal({2.0, 0.5})), Vector::Ones(2), 2, 400, 1, 100, 42, 100);
    EXPECT_NEAR(spec.lambdas(0), std::log(2.0), 1e-12);
    EXPECT_NEAR(spec.lambdas(1), -std::log(2.0), 1e-12);
    EXPECT_EQ(spec.history.rows(), 4);
    EXPECT_TRUE(spec.history.bottomRows(1).transpose().isApprox(spec.lambdas));
}

TEST(Benettin, DiagonalMapUnsortedEntriesAreSorted) {
    const auto spec = benettin_les(linear_map(diagonal({0.25, 3.0, -1.5})), Vector::Ones(3), 3, 300, 2, 0, 5, 60);
    EXPECT_NEAR(spec.lambdas(0), std::log(3.0), 1e-12);
    EXPECT_NEAR(spec.lambdas(1), std::log(1.5), 1e-12);
    EXPECT_NEAR(spec.lambdas(2), std::log(0.25), 1e-12);
}

TEST(Benettin, RotationHasZeroExponents) {
    const double a = 0.7;
    Matrix rot(2, 2);
    rot << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    const auto spec = benettin_les(linear_map(rot), Vector::Ones(2), 2, 1000, 1, 0, 1);
    EXPECT_NEAR(spec.lambdas(0), 0.0, 1e-10);
    EXPECT_NEAR(spec.lambdas(1), 0.0, 1e-10);
}

TEST(Benettin, OverflowAdvisesSmallerOrthoEvery) {
    const Propagator p = linear_map(diagonal({1e200, 1.0}));
    EXPECT_THROW(benettin_les(p, Vector::Ones(2), 2, 10, 5, 0, 1), NumericalError);
}

TEST(Benettin, RejectsBadArguments) {
    const Propagator p = linear_map(diagonal({2.0, 0.5}));
    EXPECT_THROW(benettin_les(p, Vector::Ones(2), 3, 10, 1, 0, 1), ContractError);
    EXPECT_THROW(benettin_les(p, Vector::Ones(2), 1, 10, 0, 0, 1), ContractError);
    EXPECT_THROW(benettin_les(p, Vector::Ones(2), 1, 0, 1, 0, 1), ContractError);
}

TEST(Benettin, KsSeedAndOrthoEveryInvariance) {
    const ks::Grid g = ks::make_grid(22.0, 64);
    const Propagator p = ks::make_propagator(g, 0.05);
    const Vector u0 = ks_attractor_point(g);
    const long steps = steps_in(100.0 / 0.045, 0.05);
    const long transient = steps_in(100.0, 0.05);
    const auto a = benettin_les(p, u0, 4, steps, 5, 0, 1, transient);
    const auto b = benettin_les(p, u0, 4, steps, 5, 0, 2, transient);
    const auto c = benettin_les(p, u0, 4, steps, 1, 0, 1, transient);
    for (int i = 0; i < 4; ++i) {
        EXPECT_NEAR(a.lambdas(i), b.lambdas(i), 2e-3) << i;
        EXPECT_NEAR(a.lambdas(i), c.lambdas(i), 1e-3) << i;
    }
    EXPECT_GT(a.lambdas(0), 0.02);
}

TEST(Ginelli, DiagonalMapGivesCoordinateAxes) {
    const auto clvs = ginelli_clvs(linear_map(diagonal({2.0, 0.5})), Vector::Ones(2), 2, 50, 20, 20, 1, 3);
    ASSERT_EQ(clvs.vectors.size(), 20u);
    for (const Matrix& v : clvs.vectors) {
        EXPECT_NEAR(std::abs(v(0, 0)), 1.0, 1e-12);
        EXPECT_NEAR(std::abs(v(1, 1)), 1.0, 1e-12);
        EXPECT_NEAR(v(1, 0), 0.0, 1e-12);
        EXPECT_NEAR(v(0, 1), 0.0, 1e-12);
    }
    EXPECT_NEAR(clvs.lambdas.lambdas(0), std::log(2.0), 1e-12);
}

TEST(Ginelli, NonNormalMapVectorsAreEigenvectors) {
    Matrix a(2, 2);
    a << 2.0, 1.0, 0.0, 0.5;
    const auto clvs = ginelli_clvs(linear_map(a), Vector::Ones(2), 2, 60, 10, 60, 1, 8);
    const Vector e2 = Vector{{-1.0 / 1.5, 1.0}}.normalized();  // (A - 0.5 I) e2 = 0
    for (const Matrix& v : clvs.vectors) {
        EXPECT_NEAR(clv_angle(v.col(0), Vector::Unit(2, 0)), 0.0, 1e-6);
        EXPECT_NEAR(clv_angle(v.col(1), e2), 0.0, 1e-6);
    }
}

TEST(Ginelli, KsVectorsAreCovariantAndUnit) {
    const ks::Grid g = ks::make_grid(22.0, 64);
    const Propagator p = ks::make_propagator(g, 0.05);
    const int m = 10;
    const auto clvs = ginelli_clvs(p, ks_attractor_point(g), m, 400, 40, 200, 5, 17);
    ASSERT_EQ(clvs.vectors.size(), 40u);
    double worst = 0.0;
    for (std::size_t k = 0; k + 1 < clvs.vectors.size(); ++k) {
        Vector x = clvs.states.row(static_cast<Eigen::Index>(k)).transpose();
        Matrix v = clvs.vectors[k];
        for (long s = 0; s < clvs.steps_between; ++s) {
            v = p.push_tangent(x, v);
            x = p.advance(x);
        }
        v.colwise().normalize();
        for (int i = 0; i < m; ++i) worst = std::max(worst, clv_angle(v.col(i), clvs.vectors[k + 1].col(i)));
        for (int i = 0; i < m; ++i) EXPECT_NEAR(clvs.vectors[k].col(i).norm(), 1.0, 1e-10);
    }
    EXPECT_LE(worst, 0.1);
}

TEST(Ginelli, FirstVectorMatchesGramSchmidtLeadingVector) {
    const ks::Grid g = ks::make_grid(22.0, 64);
    const Propagator p = ks::make_propagator(g, 0.05);
    const int m = 5, ortho = 5;
    const long forward = 100, window = 10;
    const Vector x0 = ks_attractor_point(g);
    const auto clvs = ginelli_clvs(p, x0, m, forward, window, 50, ortho, 23);

    // replay the forward Gram-Schmidt pass with the same seed
    Matrix basis = detail::random_orthonormal(x0.size(), m, 23);
    Vector x = x0;
    for (long k = 0; k < forward + window; ++k) {
        if (k >= forward) {
            const Matrix& v = clvs.vectors[static_cast<std::size_t>(k - forward)];
            EXPECT_LE(fine_angle(v.col(0), basis.col(0)), 1e-6);
        }
        x = detail::propagate_block(p, x, basis, ortho);
        thin_qr_in_place(basis);
    }
}

TEST(Ginelli, StrideSubsamplesStoredTimes) {
    const auto full = ginelli_clvs(linear_map(diagonal({2.0, 0.5})), Vector::Ones(2), 2, 10, 9, 10, 1, 3);
    const auto sub = ginelli_clvs(linear_map(diagonal({2.0, 0.5})), Vector::Ones(2), 2, 10, 9, 10, 1, 3, 4);
    ASSERT_EQ(sub.vectors.size(), 3u);
    EXPECT_DOUBLE_EQ(sub.times(1), full.times(4));
    EXPECT_EQ(sub.steps_between, 4);
}

TEST(KaplanYorke, HandEvaluatedExample) {
    const auto ky = kaplan_yorke(Vector{{0.5, 0.1, -0.2, -1.0}});
    EXPECT_EQ(ky.index, 3);
    EXPECT_NEAR(ky.dimension, 3.4, 1e-12);
    EXPECT_FALSE(ky.saturated);
}

TEST(KaplanYorke, NoExpandingDirections) {
    const auto ky = kaplan_yorke(Vector{{-0.1, -0.2}});
    EXPECT_DOUBLE_EQ(ky.dimension, 0.0);
    EXPECT_FALSE(ky.saturated);
}

TEST(KaplanYorke, SaturationFlagged) {
    const auto ky = kaplan_yorke(Vector{{0.3, 0.2, -0.1}});
    EXPECT_TRUE(ky.saturated);
    EXPECT_DOUBLE_EQ(ky.dimension, 3.0);
}

TEST(KaplanYorke, InvariantUnderAppendingStrongNegativeExponents) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        Vector l(6);
        for (auto& x : l) x = u(rng);
        std::sort(l.begin(), l.end(), std::greater<>());
        const auto base = kaplan_yorke(l);
        if (base.saturated) continue;
        Vector longer(9);
        longer << l, l(5) - 0.5, l(5) - 1.0, l(5) - 3.0;
        EXPECT_DOUBLE_EQ(kaplan_yorke(longer).dimension, base.dimension);
    }
}

TEST(Subspaces, ThresholdArithmetic) {
    const auto split = classify_subspaces(Vector{{0.05, 0.001, -0.2}}, 0.005);
    EXPECT_EQ(split.unstable, std::vector<int>{0});
    EXPECT_EQ(split.neutral, std::vector<int>{1});
    EXPECT_EQ(split.stable, std::vector<int>{2});
    EXPECT_THROW(classify_subspaces(Vector{{0.1}}, 0.0), ContractError);
}

TEST(Subspaces, PartitionIsContiguous) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (int trial = 0; trial < 100; ++trial) {
        Vector l(12);
        for (auto& x : l) x = u(rng);
        std::sort(l.begin(), l.end(), std::greater<>());
        const auto s = classify_subspaces(l, 0.01);
        std::vector<int> all;
        all.insert(all.end(), s.unstable.begin(), s.unstable.end());
        all.insert(all.end(), s.neutral.begin(), s.neutral.end());
        all.insert(all.end(), s.stable.begin(), s.stable.end());
        ASSERT_EQ(all.size(), 12u);
        for (int i = 0; i < 12; ++i) EXPECT_EQ(all[static_cast<std::size_t>(i)], i);
    }
}

TEST(ClvAngle, BasicCases) {
    const Vector e1 = Vector::Unit(3, 0), e2 = Vector::Unit(3, 1);
    EXPECT_DOUBLE_EQ(clv_angle(e1, e1), 0.0);
    EXPECT_NEAR(clv_angle(e1, e2), 90.0, 1e-12);
    EXPECT_DOUBLE_EQ(clv_angle(e1, -e1), 0.0);
    EXPECT_THROW(clv_angle(2.0 * e1, e2), ContractError);
}

TEST(ClvAngle, SymmetricAndOrientationFree) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 500; ++trial) {
        const Vector v = random_unit(rng, 7), w = random_unit(rng, 7);
        const double a = clv_angle(v, w);
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 90.0);
        EXPECT_DOUBLE_EQ(a, clv_angle(w, v));
        EXPECT_DOUBLE_EQ(a, clv_angle(v, -w));
    }
}

TEST(AngleSeries, DiagonalMapAllPairingsOrthogonal) {
    const Propagator p = linear_map(diagonal({2.0, 1.0, 0.5}));
    const auto clvs = ginelli_clvs(p, Vector::Ones(3), 3, 40, 15, 40, 1, 2);
    const auto split = classify_subspaces(clvs.lambdas.lambdas, 1e-6);
    for (Pairing pr : all_pairings) {
        const auto series = angle_series(clvs, split, pr);
        ASSERT_EQ(series.size(), 15u);
        for (double a : series) EXPECT_NEAR(a, 90.0, 1e-9) << to_string(pr);
    }
}

TEST(AngleSeries, ConstantVectorsGiveConstantSeries) {
    ClvSet set;
    Matrix v(3, 3);
    v << 1, 0.6, 0, 0, 0.8, 0, 0, 0, 1;
    set.vectors.assign(5, v);
    SubspaceSplit split{{0}, {1}, {2}, 0.01};
    const auto series = angle_series(set, split, Pairing::unstable_neutral);
    for (double a : series) EXPECT_DOUBLE_EQ(a, series.front());
    EXPECT_NEAR(series.front(), std::acos(0.6) * 180.0 / std::numbers::pi, 1e-12);
}

TEST(AngleSeries, EmptySubspaceNamed) {
    ClvSet set;
    set.vectors.assign(2, Matrix::Identity(2, 2));
    SubspaceSplit split{{0}, {}, {1}, 0.01};
    try {
        angle_series(set, split, Pairing::neutral_stable);
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("neutral"), std::string::npos);
    }
    EXPECT_NO_THROW(angle_series(set, split, Pairing::unstable_stable));
    EXPECT_EQ(pairing_from_string("unstable-stable"), Pairing::unstable_stable);
}
