#pragma once

#include "qlm/types.hpp"

#include <optional>
#include <string>
#include <string_view>

namespace qlm {

/// Observations: one row of `x` (d independent variables) and one `y` per datum.
struct Dataset {
    Matrix x;
    Vector y;
    std::optional<Vector> weights;

    Eigen::Index size() const { return y.size(); }
    Eigen::Index dimension() const { return x.cols(); }

    /// Throws ConfigError("dataset") unless the invariants hold.
    void validate() const;
};

enum class ModelKind { Linear, Polynomial, ExponentialDecay, Logistic };

/// Built-in closed-form models f(x, beta):
///   Linear            b0 + b1 x1 + ... + bd xd
///   Polynomial(deg)   b0 + b1 x + ... + b_deg x^deg
///   ExponentialDecay  b0 exp(-b1 x)
///   Logistic          b0 / (1 + exp(-b1 (x - b2)))
struct AnalyticModel {
    ModelKind kind = ModelKind::Linear;
    int degree = 1;

    static AnalyticModel linear() { return {ModelKind::Linear, 1}; }
    static AnalyticModel polynomial(int degree) { return {ModelKind::Polynomial, degree}; }
    static AnalyticModel exponential_decay() { return {ModelKind::ExponentialDecay, 1}; }
    static AnalyticModel logistic() { return {ModelKind::Logistic, 1}; }

    /// Parameter count for `dimension` independent variables; throws ConfigError("model")
    /// when the model does not accept that many.
    Eigen::Index parameter_count(Eigen::Index dimension) const;

    double value(const Eigen::Ref<const Vector>& x, const Vector& beta) const;

    /// df/dbeta at one datum.
    Vector gradient(const Eigen::Ref<const Vector>& x, const Vector& beta) const;

    std::string name() const;
};

/// Parses "linear", "polynomial", "exponential_decay" or "logistic".
AnalyticModel model_from_name(std::string_view name, int degree = 1);

/// r_i = y_i - f(x_i, beta) in dataset order. Throws EvaluatorFailure naming the first datum
/// where f is not finite.
Vector residuals_from_dataset(const AnalyticModel& model, const Dataset& data, const Vector& beta);

/// Hand-coded dr/dbeta = -df/dbeta, used to cross-check finite differences.
Matrix residual_jacobian(const AnalyticModel& model, const Dataset& data, const Vector& beta);

/// Residual function bound to copies of `model` and `data`.
ResidualFunction<double> dataset_evaluator(const AnalyticModel& model, const Dataset& data);

} // namespace qlm
