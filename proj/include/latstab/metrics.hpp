// Comparison statistics between a reference system and a surrogate ensemble.
#pragma once

#include "latstab/core.hpp"
#include "latstab/ks.hpp"
#include "latstab/tangent.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace latstab::metrics {

struct AngleDistribution {
    std::vector<double> samples;  // degrees
    Vector edges;                 // n_bins + 1
    Vector density;               // per degree, integrates to one
    std::string pairing;
};

/// Wasserstein-1 distance between two empirical distributions.
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw ContractError("Wasserstein distance needs non-empty samples");
    for (const auto* s : {&a, &b})
        for (double v : *s)
            if (!std::isfinite(v)) throw ContractError("non-finite sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a.size() == b.size()) {
        double sum = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
        return sum / static_cast<double>(a.size());
    }
    // integral of |F_a - F_b| over the merged breakpoints
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double x = std::min(a.front(), b.front());
    double total = 0.0;
    while (i < a.size() || j < b.size()) {
        double next;
        if (j == b.size() || (i < a.size() && a[i] <= b[j]))
            next = a[i];
        else
            next = b[j];
        total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - x);
        x = next;
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
    }
    return total;
}

/// Normalized histogram over [lo, hi]; the top edge is inclusive.
inline AngleDistribution histogram(const std::vector<double>& samples, int n_bins = 90, double lo = 0.0,
                                   double hi = 90.0, const std::string& pairing = {}) {
    if (n_bins < 1) throw ContractError("histogram needs at least one bin");
    if (!(hi > lo)) throw ContractError("histogram range is empty");
    if (samples.empty()) throw ContractError("histogram needs samples");
    AngleDistribution d;
    d.samples = samples;
    d.pairing = pairing;
    d.edges = Vector::LinSpaced(n_bins + 1, lo, hi);
    d.density = Vector::Zero(n_bins);
    const double width = (hi - lo) / n_bins;
    for (double v : samples) {
        if (!(v >= lo && v <= hi))
            throw ContractError("sample " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "]");
        const int bin = std::min(n_bins - 1, static_cast<int>((v - lo) / width));
        d.density(bin) += 1.0;
    }
    d.density /= static_cast<double>(samples.size()) * width;
    return d;
}

/// E(t_i) = ||pred_i - ref_i|| / sqrt(mean_i ||ref_i||^2), rows are times.
inline Vector normalized_error(const Matrix& reference, const Matrix& predicted) {
    if (reference.rows() != predicted.rows() || reference.cols() != predicted.cols())
        throw ContractError("reference and prediction shapes differ");
    if (reference.rows() == 0) throw ContractError("empty trajectories");
    const double scale = std::sqrt(reference.rowwise().squaredNorm().mean());
    if (!(scale > 0.0)) throw ContractError("reference trajectory is identically zero");
    return (predicted - reference).rowwise().norm() / scale;
}

/// First time, in Lyapunov times, at which the normalized error exceeds
/// `threshold`, linearly interpolated between samples. Sample i sits at time
/// t_first + i*dt. Returns the window length when the threshold is never crossed.
inline double prediction_horizon(const Vector& error, double dt, double lambda1, double threshold,
                                 double t_first = 0.0) {
    if (error.size() == 0) throw ContractError("empty error series");
    if (!(dt > 0.0) || !(lambda1 > 0.0)) throw ContractError("dt and lambda1 must be positive");
    if (error(0) > threshold) return t_first * lambda1;
    for (Eigen::Index i = 1; i < error.size(); ++i) {
        if (error(i) > threshold) {
            const double f = (threshold - error(i - 1)) / (error(i) - error(i - 1));
            return (t_first + (static_cast<double>(i - 1) + f) * dt) * lambda1;
        }
    }
    return (t_first + static_cast<double>(error.size() - 1) * dt) * lambda1;
}

inline double prediction_horizon(const Matrix& reference, const Matrix& predicted, double dt, double lambda1,
                                 double threshold, double t_first = 0.0) {
    return prediction_horizon(normalized_error(reference, predicted), dt, lambda1, threshold, t_first);
}

inline double prediction_horizon(const ks::PhysicalTrajectory& reference, const ks::PhysicalTrajectory& predicted,
                                 double lambda1, double threshold) {
    if (reference.dt_sample != predicted.dt_sample) throw ContractError("trajectories use different sampling");
    return prediction_horizon(reference.u, predicted.u, reference.dt_sample, lambda1, threshold);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ContractError("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Results of the stability analysis of one system.
struct StabilityAnalysis {
    Vector lambdas;  // sorted, 1/time
    std::map<Pairing, std::vector<double>> angles;
};

struct ComparisonReport {
    Vector le_reference;
    Vector le_surrogate_mean;
    Vector le_surrogate_std;
    std::vector<Vector> le_surrogates;
    double dky_reference = 0.0;
    double dky_surrogate_mean = 0.0;
    double dky_surrogate_std = 0.0;
    std::map<Pairing, double> wasserstein_per_pairing;
    std::map<Pairing, double> min_angle_reference;
    std::map<Pairing, double> min_angle_surrogate;
    std::vector<double> horizons_lt;
    double horizon_median_lt = 0.0;
    std::size_t members = 0;
};

namespace detail {

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Aggregates an ensemble against the reference. Exponents are compared over
/// the leading entries common to every spectrum; angle samples of all members
/// are pooled per pairing. Pairings absent from the reference are skipped.
inline ComparisonReport compare(const StabilityAnalysis& reference, const std::vector<StabilityAnalysis>& members,
                                const std::vector<double>& horizons_lt = {}) {
    if (members.empty()) throw ContractError("comparison needs at least one ensemble member");
    ComparisonReport r;
    r.members = members.size();

    Eigen::Index k = reference.lambdas.size();
    for (const auto& m : members) k = std::min(k, m.lambdas.size());
    if (k == 0) throw ContractError("empty spectrum");
    r.le_reference = reference.lambdas.head(k);
    r.le_surrogate_mean = Vector::Zero(k);
    r.le_surrogate_std = Vector::Zero(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        std::vector<double> v;
        for (const auto& m : members) v.push_back(m.lambdas(i));
        double mean = 0.0;
        for (double x : v) mean += x;
        r.le_surrogate_mean(i) = mean / static_cast<double>(v.size());
        r.le_surrogate_std(i) = detail::sample_std(v);
    }
    for (const auto& m : members) r.le_surrogates.push_back(m.lambdas);

    r.dky_reference = kaplan_yorke(reference.lambdas).dimension;
    std::vector<double> dky;
    for (const auto& m : members) dky.push_back(kaplan_yorke(m.lambdas).dimension);
    for (double d : dky) r.dky_surrogate_mean += d;
    r.dky_surrogate_mean /= static_cast<double>(dky.size());
    r.dky_surrogate_std = detail::sample_std(dky);

    for (const auto& [pairing, ref_angles] : reference.angles) {
        std::vector<double> pooled;
        for (const auto& m : members) {
            auto it = m.angles.find(pairing);
            if (it != m.angles.end()) pooled.insert(pooled.end(), it->second.begin(), it->second.end());
        }
        if (ref_angles.empty() || pooled.empty()) continue;
        r.wasserstein_per_pairing[pairing] = wasserstein1(ref_angles, pooled);
        r.min_angle_reference[pairing] = *std::min_element(ref_angles.begin(), ref_angles.end());
        r.min_angle_surrogate[pairing] = *std::min_element(pooled.begin(), pooled.end());
    }

    r.horizons_lt = horizons_lt;
    if (!horizons_lt.empty()) r.horizon_median_lt = median(horizons_lt);
    return r;
}

}  // namespace latstab::metrics
