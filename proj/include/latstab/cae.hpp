// 1-D convolutional autoencoder with periodic padding and hand-written
// backward passes.
//
// Encoder: strided convolutions (tanh) -> dense -> tanh latent.
// Decoder: dense (tanh) -> [nearest upsampling -> convolution] per encoder
// stage in reverse; the final convolution is linear.
//
// Activations are stored as matrices with one row per channel and one column
// per (sample, position), column index = sample * length + position.
#pragma once

#include "latstab/core.hpp"
#include "latstab/ks.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace latstab::cae {

struct ConvStage {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 5;
    int stride = 2;
};

struct CaeArchitecture {
    int n_x = 64;
    int n_latent = 8;
    std::vector<ConvStage> encoder;

    /// Three stride-2 stages with kernel 5 and channels 1 -> 8 -> 16 -> 32.
    static CaeArchitecture standard(int n_x, int n_latent) {
        CaeArchitecture a;
        a.n_x = n_x;
        a.n_latent = n_latent;
        a.encoder = {{1, 8, 5, 2}, {8, 16, 5, 2}, {16, 32, 5, 2}};
        return a;
    }

    int bottleneck_length() const {
        int len = n_x;
        for (const auto& s : encoder) len /= s.stride;
        return len;
    }
    int bottleneck_channels() const { return encoder.empty() ? 1 : encoder.back().out_channels; }

    void validate() const {
        if (n_x < 1 || n_latent < 1) throw ConfigError("CAE dimensions must be positive");
        if (encoder.empty()) throw ConfigError("CAE needs at least one convolution stage");
        if (encoder.front().in_channels != 1) throw ConfigError("first CAE stage must take one input channel");
        int len = n_x;
        int channels = 1;
        for (const auto& s : encoder) {
            if (s.in_channels != channels) throw ConfigError("CAE channel counts do not chain");
            if (s.kernel < 1 || s.kernel % 2 == 0) throw ConfigError("CAE kernels must be odd");
            if (s.stride < 1 || len % s.stride != 0)
                throw ConfigError("CAE stride " + std::to_string(s.stride) + " does not divide length " +
                                  std::to_string(len));
            if (s.out_channels < 1) throw ConfigError("CAE channel counts must be positive");
            len /= s.stride;
            channels = s.out_channels;
        }
    }
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;
};

struct CaeModel {
    CaeArchitecture architecture;
    Vector params;      // all kernels, dense weights and biases, see layer_plan
    double scale = 1.0; // inputs are divided by this, outputs multiplied
    std::vector<EpochLog> train_log;
};

enum class LatentSource { encoder, esn };

struct LatentTrajectory {
    Matrix y;  // one row per time
    double t0 = 0.0;
    double dt_sample = 0.0;
    LatentSource source = LatentSource::encoder;

    Eigen::Index size() const { return y.rows(); }
};

/// Layer bookkeeping derived from an architecture.
struct Layer {
    enum class Kind { conv, dense } kind = Kind::conv;
    int in_channels = 0, out_channels = 0, kernel = 1, stride = 1, upsample = 1;
    int in_length = 1;   // spatial length before upsampling
    int out_length = 1;
    bool activation = true;
    Eigen::Index weight_offset = 0, bias_offset = 0;
    std::string name;

    Eigen::Index fan_in() const { return static_cast<Eigen::Index>(in_channels) * (kind == Kind::conv ? kernel : in_length); }
    Eigen::Index weight_rows() const { return out_channels; }
    Eigen::Index weight_cols() const {
        return kind == Kind::conv ? static_cast<Eigen::Index>(in_channels) * kernel
                                  : static_cast<Eigen::Index>(in_channels) * in_length;
    }
};

struct LayerPlan {
    std::vector<Layer> layers;
    std::size_t encoder_layers = 0;  // layers up to and including the latent dense layer
    Eigen::Index n_params = 0;
};

inline LayerPlan layer_plan(const CaeArchitecture& arch) {
    arch.validate();
    LayerPlan plan;
    Eigen::Index offset = 0;
    auto add = [&](Layer l) {
        l.weight_offset = offset;
        offset += l.weight_rows() * l.weight_cols();
        l.bias_offset = offset;
        offset += l.out_channels;
        plan.layers.push_back(std::move(l));
    };

    int len = arch.n_x;
    for (std::size_t i = 0; i < arch.encoder.size(); ++i) {
        const auto& s = arch.encoder[i];
        Layer l;
        l.kind = Layer::Kind::conv;
        l.in_channels = s.in_channels;
        l.out_channels = s.out_channels;
        l.kernel = s.kernel;
        l.stride = s.stride;
        l.in_length = len;
        l.out_length = len / s.stride;
        l.name = "encoder_conv" + std::to_string(i);
        add(l);
        len /= s.stride;
    }
    const int bottleneck = arch.bottleneck_channels();
    {
        Layer l;
        l.kind = Layer::Kind::dense;
        l.in_channels = bottleneck;
        l.in_length = len;
        l.out_channels = arch.n_latent;
        l.name = "encoder_dense";
        add(l);
    }
    plan.encoder_layers = plan.layers.size();
    {
        // stored as a dense map n_latent -> bottleneck * len; weight_cols uses
        // in_channels * in_length, so encode the latent as one "channel" of length n_latent
        Layer l;
        l.kind = Layer::Kind::dense;
        l.in_channels = 1;
        l.in_length = arch.n_latent;
        l.out_channels = bottleneck * len;
        l.name = "decoder_dense";
        add(l);
    }
    for (std::size_t k = arch.encoder.size(); k-- > 0;) {
        const auto& s = arch.encoder[k];
        Layer l;
        l.kind = Layer::Kind::conv;
        l.in_channels = s.out_channels;
        l.out_channels = s.in_channels;
        l.kernel = s.kernel;
        l.stride = 1;
        l.upsample = s.stride;
        l.in_length = len;
        l.out_length = len * s.stride;
        l.activation = k != 0;
        l.name = "decoder_conv" + std::to_string(arch.encoder.size() - 1 - k);
        add(l);
        len *= s.stride;
    }
    plan.n_params = offset;
    return plan;
}

/// Glorot-uniform weights, zero biases.
inline CaeModel init_model(const CaeArchitecture& arch, std::uint64_t seed) {
    const LayerPlan plan = layer_plan(arch);
    CaeModel model;
    model.architecture = arch;
    model.params = Vector::Zero(plan.n_params);
    std::mt19937_64 rng(seed);
    for (const Layer& l : plan.layers) {
        const double fan_out = l.kind == Layer::Kind::conv ? static_cast<double>(l.out_channels) * l.kernel
                                                           : static_cast<double>(l.out_channels);
        const double a = std::sqrt(6.0 / (static_cast<double>(l.fan_in()) + fan_out));
        std::uniform_real_distribution<double> uniform(-a, a);
        for (Eigen::Index i = 0; i < l.weight_rows() * l.weight_cols(); ++i)
            model.params(l.weight_offset + i) = uniform(rng);
    }
    return model;
}

namespace detail {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

inline ConstMap weights(const Vector& p, const Layer& l) {
    return ConstMap(p.data() + l.weight_offset, l.weight_rows(), l.weight_cols());
}
inline Eigen::Map<const Vector> biases(const Vector& p, const Layer& l) {
    return Eigen::Map<const Vector>(p.data() + l.bias_offset, l.out_channels);
}

// (channels x batch*length) <-> (channels*length x batch)
inline Matrix flatten(const Matrix& a, int channels, int length, Eigen::Index batch) {
    Matrix out(static_cast<Eigen::Index>(channels) * length, batch);
    for (Eigen::Index b = 0; b < batch; ++b)
        for (int c = 0; c < channels; ++c)
            for (int l = 0; l < length; ++l) out(c * length + l, b) = a(c, b * length + l);
    return out;
}

inline Matrix unflatten(const Matrix& f, int channels, int length) {
    const Eigen::Index batch = f.cols();
    Matrix out(channels, batch * length);
    for (Eigen::Index b = 0; b < batch; ++b)
        for (int c = 0; c < channels; ++c)
            for (int l = 0; l < length; ++l) out(c, b * length + l) = f(c * length + l, b);
    return out;
}

inline Matrix upsample(const Matrix& x, int length, int factor, Eigen::Index batch) {
    if (factor == 1) return x;
    const int up = length * factor;
    Matrix out(x.rows(), batch * up);
    for (Eigen::Index b = 0; b < batch; ++b)
        for (int l = 0; l < up; ++l) out.col(b * up + l) = x.col(b * length + l / factor);
    return out;
}

inline Matrix upsample_backward(const Matrix& d, int length, int factor, Eigen::Index batch) {
    if (factor == 1) return d;
    const int up = length * factor;
    Matrix out = Matrix::Zero(d.rows(), batch * length);
    for (Eigen::Index b = 0; b < batch; ++b)
        for (int l = 0; l < up; ++l) out.col(b * length + l / factor) += d.col(b * up + l);
    return out;
}

// columns: one per (sample, output position); rows: (input channel, tap)
inline Matrix im2col(const Matrix& x, const Layer& l, int length, Eigen::Index batch) {
    const int half = l.kernel / 2;
    const int out_len = length / l.stride;
    Matrix cols(static_cast<Eigen::Index>(l.in_channels) * l.kernel, batch * out_len);
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (int o = 0; o < out_len; ++o) {
            const Eigen::Index col = b * out_len + o;
            for (int j = 0; j < l.kernel; ++j) {
                int pos = (o * l.stride + j - half) % length;
                if (pos < 0) pos += length;
                const Eigen::Index src = b * length + pos;
                for (int c = 0; c < l.in_channels; ++c) cols(c * l.kernel + j, col) = x(c, src);
            }
        }
    }
    return cols;
}

inline Matrix col2im(const Matrix& dcols, const Layer& l, int length, Eigen::Index batch) {
    const int half = l.kernel / 2;
    const int out_len = length / l.stride;
    Matrix dx = Matrix::Zero(l.in_channels, batch * length);
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (int o = 0; o < out_len; ++o) {
            const Eigen::Index col = b * out_len + o;
            for (int j = 0; j < l.kernel; ++j) {
                int pos = (o * l.stride + j - half) % length;
                if (pos < 0) pos += length;
                const Eigen::Index dst = b * length + pos;
                for (int c = 0; c < l.in_channels; ++c) dx(c, dst) += dcols(c * l.kernel + j, col);
            }
        }
    }
    return dx;
}

struct LayerCache {
    Matrix input;   // im2col columns (conv) or flattened input (dense)
    Matrix output;  // post-activation output
};

// Runs layers [first, last) on `x`, optionally caching what backward needs.
inline Matrix run_layers(const LayerPlan& plan, const Vector& p, Matrix x, Eigen::Index batch, std::size_t first,
                         std::size_t last, std::vector<LayerCache>* cache) {
    for (std::size_t i = first; i < last; ++i) {
        const Layer& l = plan.layers[i];
        Matrix input;
        if (l.kind == Layer::Kind::conv) {
            const int len = l.in_length * l.upsample;
            input = im2col(upsample(x, l.in_length, l.upsample, batch), l, len, batch);
        } else {
            input = x.rows() == l.weight_cols() ? x : flatten(x, l.in_channels, l.in_length, batch);
        }
        Matrix z = weights(p, l) * input;
        z.colwise() += biases(p, l);
        if (l.activation) z = z.array().tanh().matrix();
        if (!z.allFinite()) throw NumericalError("non-finite activations in layer " + l.name);
        // the decoder dense output is reshaped into channel maps for the next conv
        if (l.kind == Layer::Kind::dense && i + 1 < plan.layers.size() &&
            plan.layers[i + 1].kind == Layer::Kind::conv) {
            const Layer& next = plan.layers[i + 1];
            x = unflatten(z, next.in_channels, next.in_length);
        } else {
            x = z;
        }
        if (cache) (*cache)[i] = {std::move(input), l.kind == Layer::Kind::dense ? std::move(z) : x};
    }
    return x;
}

inline Matrix to_network_input(const Matrix& rows, double scale) {
    // rows: batch x n_x  ->  1 x (batch*n_x), sample-major
    Matrix t = rows.transpose() / scale;
    return Eigen::Map<const Matrix>(t.data(), 1, t.size());
}

inline Matrix from_network_output(const Matrix& out, Eigen::Index batch, int n_x, double scale) {
    Matrix t = Eigen::Map<const Matrix>(out.data(), n_x, batch);
    return t.transpose() * scale;
}

}  // namespace detail

inline Matrix encode_batch(const CaeModel& model, const Matrix& u) {
    const auto& arch = model.architecture;
    if (u.cols() != arch.n_x)
        throw ContractError("encoder expects " + std::to_string(arch.n_x) + " points, got " + std::to_string(u.cols()));
    const LayerPlan plan = layer_plan(arch);
    const Matrix z = detail::run_layers(plan, model.params, detail::to_network_input(u, model.scale), u.rows(), 0,
                                        plan.encoder_layers, nullptr);
    return z.transpose();
}

inline Matrix decode_batch(const CaeModel& model, const Matrix& y) {
    const auto& arch = model.architecture;
    if (y.cols() != arch.n_latent)
        throw ContractError("decoder expects latent size " + std::to_string(arch.n_latent) + ", got " +
                            std::to_string(y.cols()));
    const LayerPlan plan = layer_plan(arch);
    const Matrix out = detail::run_layers(plan, model.params, y.transpose(), y.rows(), plan.encoder_layers,
                                          plan.layers.size(), nullptr);
    return detail::from_network_output(out, y.rows(), arch.n_x, model.scale);
}

inline Vector encode(const CaeModel& model, const Vector& u) { return encode_batch(model, u.transpose()).transpose(); }

inline Vector decode(const CaeModel& model, const Vector& y) { return decode_batch(model, y.transpose()).transpose(); }

/// Feature maps entering the encoder's dense layer, (channels x batch*length).
inline Matrix encoder_feature_maps(const CaeModel& model, const Matrix& u) {
    const LayerPlan plan = layer_plan(model.architecture);
    return detail::run_layers(plan, model.params, detail::to_network_input(u, model.scale), u.rows(), 0,
                              plan.encoder_layers - 1, nullptr);
}

/// (1/N) sum_i ||u_i - uhat_i||^2, one sample per row.
inline double mse_loss(const Matrix& u, const Matrix& uhat) {
    if (u.rows() == 0) throw ContractError("empty batch");
    if (u.rows() != uhat.rows() || u.cols() != uhat.cols()) throw ContractError("batch shapes differ");
    return (u - uhat).squaredNorm() / static_cast<double>(u.rows());
}

struct LossGradient {
    double loss = 0.0;
    Vector gradient;
};

/// Reconstruction loss of `batch` and its gradient with respect to every parameter.
inline LossGradient grad(const CaeModel& model, const Matrix& batch) {
    const auto& arch = model.architecture;
    if (batch.rows() == 0) throw ContractError("empty batch");
    if (batch.cols() != arch.n_x) throw ContractError("batch width does not match the architecture");
    const LayerPlan plan = layer_plan(arch);
    const Vector& p = model.params;
    const Eigen::Index nb = batch.rows();

    std::vector<detail::LayerCache> cache(plan.layers.size());
    const Matrix out = detail::run_layers(plan, p, detail::to_network_input(batch, model.scale), nb, 0,
                                          plan.layers.size(), &cache);
    const Matrix uhat = detail::from_network_output(out, nb, arch.n_x, model.scale);

    LossGradient result;
    result.loss = mse_loss(batch, uhat);
    result.gradient = Vector::Zero(plan.n_params);

    // dL/d(out) with out in the network's (1 x batch*n_x) layout
    Matrix diff_t = (uhat - batch).transpose();
    Matrix delta = Eigen::Map<const Matrix>(diff_t.data(), 1, diff_t.size()) * (2.0 * model.scale / nb);

    for (std::size_t i = plan.layers.size(); i-- > 0;) {
        const Layer& l = plan.layers[i];
        const detail::LayerCache& c = cache[i];
        if (l.kind == Layer::Kind::dense && delta.rows() != l.out_channels)
            delta = detail::flatten(delta, plan.layers[i + 1].in_channels, plan.layers[i + 1].in_length, nb);
        if (l.activation) delta.array() *= 1.0 - c.output.array().square();

        detail::MutMap(result.gradient.data() + l.weight_offset, l.weight_rows(), l.weight_cols()) =
            delta * c.input.transpose();
        result.gradient.segment(l.bias_offset, l.out_channels) = delta.rowwise().sum();
        if (i == 0) break;

        Matrix dinput = detail::weights(p, l).transpose() * delta;
        if (l.kind == Layer::Kind::conv) {
            const int len = l.in_length * l.upsample;
            dinput = detail::col2im(dinput, l, len, nb);
            dinput = detail::upsample_backward(dinput, l.in_length, l.upsample, nb);
        } else if (plan.layers[i - 1].kind == Layer::Kind::conv) {
            dinput = detail::unflatten(dinput, l.in_channels, l.in_length);
        }
        delta = std::move(dinput);
    }
    return result;
}

struct TrainingOptions {
    double learning_rate = 1e-3;
    int batch_size = 64;
    int epochs = 200;
    std::uint64_t seed = 0;
    double validation_fraction = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Global standard deviation of all entries.
inline double global_std(const Matrix& u) {
    const double mean = u.mean();
    return std::sqrt((u.array() - mean).square().sum() / static_cast<double>(u.size()));
}

/// Mean reconstruction loss over `u`, evaluated in chunks.
inline double reconstruction_mse(const CaeModel& model, const Matrix& u, Eigen::Index chunk = 512) {
    if (u.rows() == 0) throw ContractError("empty data set");
    double total = 0.0;
    for (Eigen::Index start = 0; start < u.rows(); start += chunk) {
        const Eigen::Index n = std::min(chunk, u.rows() - start);
        const Matrix block = u.middleRows(start, n);
        total += (decode_batch(model, encode_batch(model, block)) - block).squaredNorm();
    }
    return total / static_cast<double>(u.rows());
}

/// Adam on mini-batches of the leading (1 - validation_fraction) block of
/// snapshots; the trailing block is held out. Returns the parameters of the
/// epoch with the lowest validation loss.
inline CaeModel train_cae(const Matrix& snapshots, const CaeArchitecture& arch, const TrainingOptions& opt) {
    arch.validate();
    if (opt.batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (opt.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(opt.validation_fraction > 0.0 && opt.validation_fraction < 1.0))
        throw ConfigError("validation fraction must lie in (0, 1)");
    if (snapshots.rows() < 10L * opt.batch_size)
        throw ContractError("training set needs at least 10 batches of snapshots");
    if (snapshots.cols() != arch.n_x) throw ContractError("snapshot width does not match the architecture");

    const Eigen::Index n_val = std::max<Eigen::Index>(
        1, static_cast<Eigen::Index>(std::llround(opt.validation_fraction * snapshots.rows())));
    const Eigen::Index n_train = snapshots.rows() - n_val;
    const Matrix train = snapshots.topRows(n_train);
    const Matrix validation = snapshots.bottomRows(n_val);

    CaeModel model = init_model(arch, opt.seed);
    model.scale = global_std(train);
    if (!(model.scale > 0.0)) model.scale = 1.0;

    Vector m1 = Vector::Zero(model.params.size());
    Vector m2 = Vector::Zero(model.params.size());
    long t = 0;
    std::mt19937_64 rng(opt.seed + 1);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
    std::iota(order.begin(), order.end(), Eigen::Index{0});

    double best = std::numeric_limits<double>::infinity();
    Vector best_params = model.params;
    Matrix batch;
    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double weighted = 0.0;
        for (Eigen::Index start = 0; start < n_train; start += opt.batch_size) {
            const Eigen::Index n = std::min<Eigen::Index>(opt.batch_size, n_train - start);
            batch.resize(n, arch.n_x);
            for (Eigen::Index i = 0; i < n; ++i) batch.row(i) = train.row(order[static_cast<std::size_t>(start + i)]);
            LossGradient lg;
            try {
                lg = grad(model, batch);
            } catch (const NumericalError& e) {
                throw TrainingError(e.what(), epoch);
            }
            if (!std::isfinite(lg.loss) || !lg.gradient.allFinite()) throw TrainingError("loss is not finite", epoch);
            weighted += lg.loss * static_cast<double>(n);

            ++t;
            m1 = opt.beta1 * m1 + (1.0 - opt.beta1) * lg.gradient;
            m2 = opt.beta2 * m2 + (1.0 - opt.beta2) * lg.gradient.cwiseAbs2();
            const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
            const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
            model.params.array() -=
                opt.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + opt.epsilon);
        }
        const double val = reconstruction_mse(model, validation);
        if (!std::isfinite(val)) throw TrainingError("validation loss is not finite", epoch);
        model.train_log.push_back({epoch, weighted / static_cast<double>(n_train), val});
        if (val < best) {
            best = val;
            best_params = model.params;
        }
    }
    model.params = best_params;
    return model;
}

inline CaeModel train_cae(const ks::PhysicalTrajectory& dataset, const CaeArchitecture& arch,
                          const TrainingOptions& opt) {
    return train_cae(dataset.u, arch, opt);
}

inline LatentTrajectory encode_trajectory(const CaeModel& model, const ks::PhysicalTrajectory& traj) {
    LatentTrajectory out;
    out.t0 = traj.t0;
    out.dt_sample = traj.dt_sample;
    out.source = LatentSource::encoder;
    out.y.resize(traj.size(), model.architecture.n_latent);
    const Eigen::Index chunk = 1024;
    for (Eigen::Index start = 0; start < traj.size(); start += chunk) {
        const Eigen::Index n = std::min(chunk, traj.size() - start);
        out.y.middleRows(start, n) = encode_batch(model, traj.u.middleRows(start, n));
    }
    return out;
}

inline ks::PhysicalTrajectory decode_trajectory(const CaeModel& model, const LatentTrajectory& latent,
                                                double length) {
    ks::PhysicalTrajectory out;
    out.t0 = latent.t0;
    out.dt_sample = latent.dt_sample;
    out.length = length;
    out.u.resize(latent.size(), model.architecture.n_x);
    const Eigen::Index chunk = 1024;
    for (Eigen::Index start = 0; start < latent.size(); start += chunk) {
        const Eigen::Index n = std::min(chunk, latent.size() - start);
        out.u.middleRows(start, n) = decode_batch(model, latent.y.middleRows(start, n));
    }
    return out;
}

}  // namespace latstab::cae
