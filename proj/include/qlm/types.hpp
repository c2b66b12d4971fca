#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qlm {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = VectorX<double>;
using Matrix = MatrixX<double>;

/// Maps a parameter vector to the residual vector r = y - f(x, beta).
/// Implementations signal failure by throwing EvaluatorFailure.
template <typename Scalar>
using ResidualFunction = std::function<VectorX<Scalar>(const VectorX<Scalar>&)>;

// ---------------------------------------------------------------------------
// errors

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(what), key_(std::move(key)) {}

    /// Name of the offending configuration key.
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class SingularSystem : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Broyden update requested with a step whose squared norm underflows.
class StagnantStep : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class FailureKind {
    NonFinite,
    WrongLength,
    LengthChanged,
    SpawnFailed,
    ProcessDied,
    Timeout,
    MalformedResponse,
    IdMismatch,
    ModelError,
    NonDeterministic,
};

inline std::string_view to_string(FailureKind kind) {
    switch (kind) {
    case FailureKind::NonFinite: return "NonFinite";
    case FailureKind::WrongLength: return "WrongLength";
    case FailureKind::LengthChanged: return "LengthChanged";
    case FailureKind::SpawnFailed: return "SpawnFailed";
    case FailureKind::ProcessDied: return "ProcessDied";
    case FailureKind::Timeout: return "Timeout";
    case FailureKind::MalformedResponse: return "MalformedResponse";
    case FailureKind::IdMismatch: return "IdMismatch";
    case FailureKind::ModelError: return "ModelError";
    case FailureKind::NonDeterministic: return "NonDeterministic";
    }
    return "Unknown";
}

class EvaluatorFailure : public std::runtime_error {
public:
    EvaluatorFailure(FailureKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    FailureKind kind() const noexcept { return kind_; }

private:
    FailureKind kind_;
};

// ---------------------------------------------------------------------------
// parameter vector

/// Values of the unknowns together with their (possibly infinite) box bounds.
template <typename Scalar>
struct ParameterVector {
    VectorX<Scalar> values;
    VectorX<Scalar> lower;
    VectorX<Scalar> upper;

    ParameterVector() = default;

    explicit ParameterVector(VectorX<Scalar> v)
        : values(std::move(v)),
          lower(VectorX<Scalar>::Constant(values.size(), -std::numeric_limits<Scalar>::infinity())),
          upper(VectorX<Scalar>::Constant(values.size(), std::numeric_limits<Scalar>::infinity())) {}

    ParameterVector(VectorX<Scalar> v, VectorX<Scalar> lo, VectorX<Scalar> hi)
        : values(std::move(v)), lower(std::move(lo)), upper(std::move(hi)) {
        validate();
    }

    Eigen::Index size() const { return values.size(); }

    bool bounded(Eigen::Index j) const {
        return std::isfinite(lower[j]) || std::isfinite(upper[j]);
    }

    bool feasible(const VectorX<Scalar>& x) const {
        return ((x.array() >= lower.array()) && (x.array() <= upper.array())).all();
    }

    VectorX<Scalar> clamp(const VectorX<Scalar>& x) const {
        return x.cwiseMax(lower).cwiseMin(upper);
    }

    /// Throws ConfigError unless sizes agree, bounds are ordered and values are inside them.
    void validate() const {
        if (values.size() < 1)
            throw ConfigError("beta0", "parameter vector must have at least one entry");
        if (lower.size() != values.size() || upper.size() != values.size())
            throw ConfigError("bounds", "bounds length does not match parameter count");
        for (Eigen::Index j = 0; j < values.size(); ++j) {
            if (!std::isfinite(values[j]))
                throw ConfigError("beta0", "parameter " + std::to_string(j) + " is not finite");
            if (std::isnan(lower[j]) || std::isnan(upper[j]) || !(lower[j] < upper[j]))
                throw ConfigError("bounds", "bounds of parameter " + std::to_string(j) +
                                                " must satisfy lower < upper");
            if (values[j] < lower[j] || values[j] > upper[j])
                throw ConfigError("beta0", "parameter " + std::to_string(j) + " lies outside its bounds");
        }
    }
};

} // namespace qlm
