// Shared aliases, error types and small numeric helpers used by every module.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace latstab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using ComplexVector = Eigen::VectorXcd;
using Complex = std::complex<double>;

/// Broad error categories. The CLI maps them onto distinct exit codes.
enum class ErrorKind {
    config,
    contract,
    numerical,
    blow_up,
    degenerate_tangent,
    training_failure,
    load,
    dependency,
    search_failure,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, "configuration error: " + what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(ErrorKind::contract, "contract violation: " + what) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, "numerical error: " + what) {}
};

/// A time integration produced NaN/Inf.
class BlowUpError : public Error {
public:
    BlowUpError(const std::string& what, double time)
        : Error(ErrorKind::blow_up, "blow-up at t=" + std::to_string(time) + ": " + what), time_(time) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

class DegenerateTangentError : public Error {
public:
    explicit DegenerateTangentError(const std::string& what)
        : Error(ErrorKind::degenerate_tangent, "degenerate tangent space: " + what) {}
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch)
        : Error(ErrorKind::training_failure, "training failed at epoch " + std::to_string(epoch) + ": " + what),
          epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

class DependencyError : public Error {
public:
    explicit DependencyError(const std::string& what) : Error(ErrorKind::dependency, "missing dependency: " + what) {}
};

/// A persisted file could not be read back.
class LoadError : public Error {
public:
    enum class Reason { io, bad_magic, truncated, checksum, unsupported_version, kind_mismatch, format };
    LoadError(Reason reason, const std::string& what)
        : Error(ErrorKind::load, "load error: " + what), reason_(reason) {}
    Reason reason() const noexcept { return reason_; }

private:
    Reason reason_;
};

/// Every hyperparameter candidate failed; `what()` carries the per-candidate scores.
class SearchError : public Error {
public:
    explicit SearchError(const std::string& what) : Error(ErrorKind::search_failure, "search failed: " + what) {}
};

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

/// Integer number of steps of size dt that fit into `span`, rounding to the
/// nearest integer so 10/0.05 is 200 and not 199.
inline long steps_in(double span, double dt) { return std::lround(span / dt); }

inline bool is_power_of_two(long n) { return n > 0 && (n & (n - 1)) == 0; }

/// Thin QR with a non-negative R diagonal. `basis` (n x m, m <= n) is replaced
/// by Q; the m x m upper-triangular factor is returned.
inline Matrix thin_qr_in_place(Matrix& basis) {
    const Eigen::Index n = basis.rows();
    const Eigen::Index m = basis.cols();
    Eigen::HouseholderQR<Matrix> qr(basis);
    Matrix r = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
    Matrix q = qr.householderQ() * Matrix::Identity(n, m);
    for (Eigen::Index j = 0; j < m; ++j) {
        if (r(j, j) < 0.0) {
            r.row(j) *= -1.0;
            q.col(j) *= -1.0;
        }
    }
    basis = std::move(q);
    return r;
}

}  // namespace latstab
