#include "qlm/model.hpp"

#include <cmath>

namespace qlm {

void Dataset::validate() const {
    if (y.size() < 1)
        throw ConfigError("dataset", "dataset has no rows");
    if (x.rows() != y.size())
        throw ConfigError("dataset", "x and y have different row counts");
    if (!x.allFinite() || !y.allFinite())
        throw ConfigError("dataset", "dataset contains non-finite values");
    if (weights) {
        if (weights->size() != y.size())
            throw ConfigError("dataset", "weight column length does not match row count");
        if (!weights->allFinite() || (weights->array() <= 0).any())
            throw ConfigError("dataset", "weights must be positive and finite");
    }
}

Eigen::Index AnalyticModel::parameter_count(Eigen::Index dimension) const {
    switch (kind) {
    case ModelKind::Linear:
        return dimension + 1;
    case ModelKind::Polynomial:
        if (degree < 0)
            throw ConfigError("model", "polynomial degree must be non-negative");
        if (degree > 0 && dimension != 1)
            throw ConfigError("model", "polynomial models take exactly one independent variable");
        return degree + 1;
    case ModelKind::ExponentialDecay:
        if (dimension != 1)
            throw ConfigError("model", "exponential_decay takes exactly one independent variable");
        return 2;
    case ModelKind::Logistic:
        if (dimension != 1)
            throw ConfigError("model", "logistic takes exactly one independent variable");
        return 3;
    }
    throw ConfigError("model", "unknown model kind");
}

double AnalyticModel::value(const Eigen::Ref<const Vector>& x, const Vector& beta) const {
    switch (kind) {
    case ModelKind::Linear:
        return beta[0] + x.dot(beta.tail(beta.size() - 1));
    case ModelKind::Polynomial: {
        // Horner
        double acc = 0.0;
        for (Eigen::Index k = beta.size() - 1; k >= 0; --k)
            acc = acc * (degree > 0 ? x[0] : 0.0) + beta[k];
        return acc;
    }
    case ModelKind::ExponentialDecay:
        return beta[0] * std::exp(-beta[1] * x[0]);
    case ModelKind::Logistic:
        return beta[0] / (1.0 + std::exp(-beta[1] * (x[0] - beta[2])));
    }
    return std::nan("");
}

Vector AnalyticModel::gradient(const Eigen::Ref<const Vector>& x, const Vector& beta) const {
    Vector g(beta.size());
    switch (kind) {
    case ModelKind::Linear:
        g[0] = 1.0;
        g.tail(beta.size() - 1) = x;
        break;
    case ModelKind::Polynomial: {
        double power = 1.0;
        for (Eigen::Index k = 0; k < beta.size(); ++k) {
            g[k] = power;
            power *= degree > 0 ? x[0] : 0.0;
        }
        break;
    }
    case ModelKind::ExponentialDecay: {
        const double e = std::exp(-beta[1] * x[0]);
        g[0] = e;
        g[1] = -beta[0] * x[0] * e;
        break;
    }
    case ModelKind::Logistic: {
        const double e = std::exp(-beta[1] * (x[0] - beta[2]));
        const double denom = 1.0 + e;
        const double common = beta[0] * e / (denom * denom);
        g[0] = 1.0 / denom;
        g[1] = common * (x[0] - beta[2]);
        g[2] = -common * beta[1];
        break;
    }
    }
    return g;
}

std::string AnalyticModel::name() const {
    switch (kind) {
    case ModelKind::Linear: return "linear";
    case ModelKind::Polynomial: return "polynomial";
    case ModelKind::ExponentialDecay: return "exponential_decay";
    case ModelKind::Logistic: return "logistic";
    }
    return "unknown";
}

AnalyticModel model_from_name(std::string_view name, int degree) {
    if (name == "linear")
        return AnalyticModel::linear();
    if (name == "polynomial") {
        if (degree < 0)
            throw ConfigError("degree", "polynomial degree must be non-negative");
        return AnalyticModel::polynomial(degree);
    }
    if (name == "exponential_decay")
        return AnalyticModel::exponential_decay();
    if (name == "logistic")
        return AnalyticModel::logistic();
    throw ConfigError("model", "unknown model '" + std::string(name) + "'");
}

namespace {

void check_beta(const AnalyticModel& model, const Dataset& data, const Vector& beta) {
    const Eigen::Index n = model.parameter_count(data.dimension());
    if (beta.size() != n)
        throw EvaluatorFailure(FailureKind::WrongLength, model.name() + " expects " + std::to_string(n) +
                                                             " parameters, got " + std::to_string(beta.size()));
}

} // namespace

Vector residuals_from_dataset(const AnalyticModel& model, const Dataset& data, const Vector& beta) {
    check_beta(model, data, beta);
    Vector r(data.size());
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        const double f = model.value(data.x.row(i).transpose(), beta);
        if (!std::isfinite(f))
            throw EvaluatorFailure(FailureKind::NonFinite, "model value not finite at datum " + std::to_string(i));
        r[i] = data.y[i] - f;
    }
    return r;
}

Matrix residual_jacobian(const AnalyticModel& model, const Dataset& data, const Vector& beta) {
    check_beta(model, data, beta);
    Matrix jac(data.size(), beta.size());
    for (Eigen::Index i = 0; i < data.size(); ++i)
        jac.row(i) = -model.gradient(data.x.row(i).transpose(), beta).transpose();
    return jac;
}

ResidualFunction<double> dataset_evaluator(const AnalyticModel& model, const Dataset& data) {
    model.parameter_count(data.dimension());
    return [model, data](const Vector& beta) { return residuals_from_dataset(model, data, beta); };
}

} // namespace qlm
