#include "latstab/cae.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace latstab;
using namespace latstab::cae;

namespace {

CaeArchitecture small_arch() {
    CaeArchitecture a;
    a.n_x = 16;
    a.n_latent = 3;
    a.encoder = {{1, 3, 3, 2}, {3, 4, 5, 2}};
    return a;
}

Matrix random_batch(Eigen::Index n, int width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix u(n, width);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = normal(rng);
    return u;
}

// smooth periodic snapshots with a few travelling modes
Matrix wave_data(Eigen::Index n, int width) {
    Matrix u(n, width);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double phase = 0.05 * static_cast<double>(i);
        for (int j = 0; j < width; ++j) {
            const double x = 2.0 * M_PI * j / width;
            u(i, j) = std::sin(x + phase) + 0.5 * std::cos(2.0 * x - 0.3 * phase);
        }
    }
    return u;
}

}  // namespace

TEST(CaeArchitecture, StandardShapes) {
    const auto a = CaeArchitecture::standard(64, 8);
    EXPECT_EQ(a.bottleneck_length(), 8);
    EXPECT_EQ(a.bottleneck_channels(), 32);
    const auto plan = layer_plan(a);
    EXPECT_EQ(plan.layers.size(), 8u);
    EXPECT_EQ(plan.encoder_layers, 4u);
    EXPECT_FALSE(plan.layers.back().activation);
    EXPECT_EQ(plan.layers.back().out_channels, 1);
    EXPECT_EQ(plan.layers.back().out_length, 64);
    // conv 1->8, 8->16, 16->32, dense 256->8, dense 8->256, conv 32->16, 16->8, 8->1
    const Eigen::Index expect = (8 * 5 + 8) + (16 * 40 + 16) + (32 * 80 + 32) + (8 * 256 + 8) + (256 * 8 + 256) +
                                (16 * 160 + 16) + (8 * 80 + 8) + (1 * 40 + 1);
    EXPECT_EQ(plan.n_params, expect);
}

TEST(CaeArchitecture, RejectsInvalid) {
    auto a = CaeArchitecture::standard(60, 8);
    EXPECT_THROW(a.validate(), ConfigError);  // 60 / 8 not integral
    a = CaeArchitecture::standard(64, 8);
    a.encoder[1].kernel = 4;
    EXPECT_THROW(a.validate(), ConfigError);
    a = CaeArchitecture::standard(64, 8);
    a.encoder[1].in_channels = 7;
    EXPECT_THROW(a.validate(), ConfigError);
}

TEST(Cae, EncodeDecodeShapesAndLatentRange) {
    auto model = init_model(CaeArchitecture::standard(64, 8), 3);
    const Matrix u = random_batch(5, 64, 1);
    const Matrix y = encode_batch(model, u);
    ASSERT_EQ(y.rows(), 5);
    ASSERT_EQ(y.cols(), 8);
    EXPECT_LE(y.cwiseAbs().maxCoeff(), 1.0);
    const Matrix uhat = decode_batch(model, y);
    EXPECT_EQ(uhat.rows(), 5);
    EXPECT_EQ(uhat.cols(), 64);
    EXPECT_THROW(encode_batch(model, Matrix::Zero(2, 32)), ContractError);
    EXPECT_THROW(decode_batch(model, Matrix::Zero(2, 4)), ContractError);
}

TEST(Cae, BatchAndSingleSampleAgree) {
    auto model = init_model(CaeArchitecture::standard(64, 8), 4);
    const Matrix u = random_batch(4, 64, 2);
    const Matrix y = encode_batch(model, u);
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        const Vector yi = encode(model, u.row(i).transpose());
        EXPECT_LT((yi - y.row(i).transpose()).norm(), 1e-14);
    }
}

TEST(Cae, ConvolutionsArePeriodic) {
    // shifting the input by the total stride shifts the bottleneck maps by one
    auto model = init_model(CaeArchitecture::standard(64, 8), 5);
    const Matrix u = random_batch(1, 64, 3);
    Matrix shifted(1, 64);
    for (int j = 0; j < 64; ++j) shifted(0, (j + 8) % 64) = u(0, j);
    const Matrix f = encoder_feature_maps(model, u);
    const Matrix g = encoder_feature_maps(model, shifted);
    ASSERT_EQ(f.cols(), 8);
    for (int l = 0; l < 8; ++l) EXPECT_LT((g.col((l + 1) % 8) - f.col(l)).norm(), 1e-12) << l;
}

TEST(Cae, MseLoss) {
    Matrix a(2, 3);
    a << 1, 2, 3, 4, 5, 6;
    Matrix b = a;
    b(0, 0) += 1.0;
    b(1, 2) -= 2.0;
    EXPECT_DOUBLE_EQ(mse_loss(a, b), 2.5);
    EXPECT_DOUBLE_EQ(mse_loss(a, a), 0.0);
    EXPECT_THROW(mse_loss(Matrix(0, 3), Matrix(0, 3)), ContractError);
    EXPECT_THROW(mse_loss(a, Matrix::Zero(2, 2)), ContractError);
}

TEST(Cae, GradientMatchesCentralDifferences) {
    auto model = init_model(small_arch(), 11);
    model.scale = 1.7;
    const Matrix batch = random_batch(6, 16, 4);
    const LossGradient lg = grad(model, batch);
    EXPECT_NEAR(lg.loss, mse_loss(batch, decode_batch(model, encode_batch(model, batch))), 1e-12);

    const double h = 1e-6;
    for (Eigen::Index i = 0; i < model.params.size(); ++i) {
        CaeModel plus = model, minus = model;
        plus.params(i) += h;
        minus.params(i) -= h;
        const double fd = (grad(plus, batch).loss - grad(minus, batch).loss) / (2.0 * h);
        EXPECT_NEAR(lg.gradient(i), fd, 1e-6 * std::max(1.0, std::abs(fd))) << "parameter " << i;
    }
}

TEST(Cae, GradientStandardArchitectureSample) {
    auto model = init_model(CaeArchitecture::standard(64, 8), 12);
    const Matrix batch = random_batch(4, 64, 5);
    const LossGradient lg = grad(model, batch);
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<Eigen::Index> pick(0, model.params.size() - 1);
    const double h = 1e-6;
    for (int k = 0; k < 50; ++k) {
        const Eigen::Index i = pick(rng);
        CaeModel plus = model, minus = model;
        plus.params(i) += h;
        minus.params(i) -= h;
        const double fd = (grad(plus, batch).loss - grad(minus, batch).loss) / (2.0 * h);
        const double rel = std::abs(lg.gradient(i) - fd) / std::max(std::abs(fd), 1e-8);
        EXPECT_TRUE(rel < 1e-4 || std::abs(lg.gradient(i) - fd) < 1e-9) << "parameter " << i;
    }
}

TEST(Cae, NonFiniteInputNamesLayer) {
    auto model = init_model(small_arch(), 1);
    Matrix batch = random_batch(2, 16, 1);
    batch(1, 3) = std::nan("");
    try {
        grad(model, batch);
        FAIL() << "expected a numerical error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("encoder_conv0"), std::string::npos);
    }
}

TEST(CaeTraining, ReducesLossAndKeepsBestEpoch) {
    const Matrix data = wave_data(400, 16);
    TrainingOptions opt;
    opt.batch_size = 16;
    opt.epochs = 30;
    opt.learning_rate = 3e-3;
    opt.seed = 7;
    const CaeModel untrained = init_model(small_arch(), opt.seed);
    const CaeModel model = train_cae(data, small_arch(), opt);
    ASSERT_EQ(model.train_log.size(), 30u);
    EXPECT_LT(model.train_log.back().train_loss, 0.3 * model.train_log.front().train_loss);

    double best = model.train_log.front().validation_loss;
    for (const auto& e : model.train_log) best = std::min(best, e.validation_loss);
    const Matrix validation = data.bottomRows(40);
    EXPECT_NEAR(reconstruction_mse(model, validation), best, 1e-10 * std::max(1.0, best));
    EXPECT_NE((model.params - untrained.params).norm(), 0.0);
}

TEST(CaeTraining, Deterministic) {
    const Matrix data = wave_data(200, 16);
    TrainingOptions opt;
    opt.batch_size = 16;
    opt.epochs = 3;
    opt.seed = 3;
    const CaeModel a = train_cae(data, small_arch(), opt);
    const CaeModel b = train_cae(data, small_arch(), opt);
    EXPECT_EQ((a.params - b.params).norm(), 0.0);
}

TEST(CaeTraining, RejectsBadInputs) {
    const Matrix data = wave_data(100, 16);
    TrainingOptions opt;
    opt.batch_size = 16;
    EXPECT_THROW(train_cae(data, small_arch(), opt), ContractError);  // fewer than 10 batches
    opt.batch_size = 0;
    EXPECT_THROW(train_cae(data, small_arch(), opt), ConfigError);
    opt.batch_size = 4;
    opt.validation_fraction = 1.0;
    EXPECT_THROW(train_cae(data, small_arch(), opt), ConfigError);
}

TEST(CaeTraining, DivergenceRaisesTrainingError) {
    const Matrix data = wave_data(200, 16);
    TrainingOptions opt;
    opt.batch_size = 16;
    opt.epochs = 2;
    opt.learning_rate = std::numeric_limits<double>::infinity();
    try {
        train_cae(data, small_arch(), opt);
        FAIL() << "expected a training error";
    } catch (const TrainingError& e) {
        EXPECT_EQ(e.epoch(), 1);
    }
}

TEST(Cae, EncodeTrajectoryKeepsTiming) {
    auto model = init_model(CaeArchitecture::standard(64, 8), 2);
    ks::PhysicalTrajectory traj;
    traj.u = random_batch(1500, 64, 8);
    traj.t0 = 3.0;
    traj.dt_sample = 0.25;
    traj.length = 22.0;
    const LatentTrajectory y = encode_trajectory(model, traj);
    EXPECT_EQ(y.size(), 1500);
    EXPECT_EQ(y.t0, 3.0);
    EXPECT_EQ(y.dt_sample, 0.25);
    EXPECT_LT((y.y.row(1200).transpose() - encode(model, traj.u.row(1200).transpose())).norm(), 1e-14);
    const auto back = decode_trajectory(model, y, 22.0);
    EXPECT_EQ(back.u.rows(), 1500);
    EXPECT_EQ(back.length, 22.0);
}
