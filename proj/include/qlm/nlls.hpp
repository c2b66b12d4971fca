#pragma once

// Levenberg-Marquardt least squares driven by a Broyden secant approximation of the Jacobian.
//
// Only residual evaluations are required. The driver keeps an m x n matrix B that tracks the
// Jacobian of r = y - f(x, beta) through rank-one secant updates, solves the damped normal
// equations built from B for a direction p, and accepts a step beta + alpha p only when the
// residual norm shows sufficient decrease.

#include "qlm/fd_oracle.hpp"
#include "qlm/linear_solve.hpp"
#include "qlm/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace qlm {

inline constexpr double kLambdaFloor = 1e-12;
inline constexpr double kLambdaCap = 1e12;
/// Broyden updates with ||s||^2 below this are skipped.
inline constexpr double kStagnantStepSquaredNorm = 1e-30;

template <typename Scalar>
struct SolverConfig {
    Scalar epsilon = Scalar(1e-3);
    Scalar armijo_c = Scalar(1e-4);
    Scalar alpha_min = Scalar(1e-4);
    Scalar lambda_init = Scalar(1e-2);
    Scalar lambda_decrease = Scalar(0.1);
    Scalar lambda_increase = Scalar(10);
    Scalar perturbation_rel = Scalar(0.01);
    Scalar perturbation_abs = Scalar(0.01);
    int max_iterations = 200;
    std::optional<Scalar> max_p_norm;
    /// Replace B by a finite-difference Jacobian every this many iterations.
    std::optional<int> fd_refresh_period;
    FdConfig<Scalar> fd;
    /// Record a condition estimate of every assembled system.
    bool diagnostics = false;
    /// Evaluate the starting point twice and fail unless both results agree bit for bit.
    bool check_determinism = false;

    void validate() const {
        const auto require = [](bool ok, const char* key, const char* what) {
            if (!ok)
                throw ConfigError(key, std::string(key) + ": " + what);
        };
        require(epsilon > 0 && std::isfinite(epsilon), "epsilon", "must be positive");
        require(armijo_c > 0 && armijo_c < 1, "armijo_c", "must lie in (0, 1)");
        require(alpha_min > 0 && alpha_min <= 1, "alpha_min", "must lie in (0, 1]");
        require(lambda_init >= 0 && std::isfinite(lambda_init), "lambda_init", "must be non-negative");
        require(lambda_decrease > 0 && lambda_decrease < 1, "lambda_decrease", "must lie in (0, 1)");
        require(lambda_increase > 1 && std::isfinite(lambda_increase), "lambda_increase", "must exceed 1");
        require(perturbation_rel > 0 && std::isfinite(perturbation_rel), "perturbation_rel", "must be positive");
        require(perturbation_abs > 0 && std::isfinite(perturbation_abs), "perturbation_abs", "must be positive");
        require(max_iterations >= 1, "max_iterations", "must be at least 1");
        require(!max_p_norm || *max_p_norm > 0, "max_p_norm", "must be positive when enabled");
        require(!fd_refresh_period || *fd_refresh_period >= 1, "fd_refresh_period", "must be at least 1 when enabled");
        fd.validate();
    }
};

/// Diagonal weighting of the residuals: none, one value for every datum, or one per datum.
template <typename Scalar>
class Weights {
public:
    static Weights none() { return Weights(); }

    static Weights uniform(Scalar value) {
        if (!(value > 0) || !std::isfinite(value))
            throw ConfigError("weights", "uniform weight must be positive and finite");
        Weights w;
        w.uniform_ = value;
        return w;
    }

    static Weights per_datum(VectorX<Scalar> values) {
        if (values.size() < 1 || !values.allFinite() || (values.array() <= 0).any())
            throw ConfigError("weights", "weights must be positive and finite");
        Weights w;
        w.values_ = std::move(values);
        return w;
    }

    bool enabled() const { return uniform_.has_value() || values_.size() > 0; }

    /// Diagonal of W for m residuals, or nothing when unweighted.
    std::optional<VectorX<Scalar>> resolve(Eigen::Index m) const {
        if (uniform_)
            return VectorX<Scalar>::Constant(m, *uniform_);
        if (values_.size() == 0)
            return std::nullopt;
        if (values_.size() != m)
            throw ConfigError("weights", "got " + std::to_string(values_.size()) + " weights for " +
                                             std::to_string(m) + " residuals");
        return values_;
    }

private:
    std::optional<Scalar> uniform_;
    VectorX<Scalar> values_;
};

template <typename Scalar>
struct IterationRecord {
    int k = 0;
    /// Iterate after this pass; unchanged from the previous pass when the step was rejected.
    VectorX<Scalar> beta;
    /// Weighted norm ||W^1/2 r|| at `beta`.
    Scalar residual_norm = 0;
    Scalar objective = 0;
    /// Damping used to solve for p in this pass.
    Scalar lambda = 0;
    Scalar alpha = 0;
    Scalar p_norm = 0;
    Scalar max_rel_change = 0;
    bool armijo_satisfied = false;
    /// The Broyden update at the head of this pass was skipped (stagnant step).
    bool broyden_skipped = false;
    /// 1-norm condition estimate of the LM system; NaN unless diagnostics are on.
    Scalar condition = std::numeric_limits<Scalar>::quiet_NaN();
};

enum class RunStatus { Converged, MaxIterations, LineSearchFloor, EvaluatorFailure };

inline std::string_view to_string(RunStatus status) {
    switch (status) {
    case RunStatus::Converged: return "Converged";
    case RunStatus::MaxIterations: return "MaxIterations";
    case RunStatus::LineSearchFloor: return "LineSearchFloor";
    case RunStatus::EvaluatorFailure: return "EvaluatorFailure";
    }
    return "Unknown";
}

template <typename Scalar>
struct RunReport {
    RunStatus status = RunStatus::MaxIterations;
    std::string message;
    ParameterVector<Scalar> final_beta;
    Scalar final_objective = std::numeric_limits<Scalar>::quiet_NaN();
    /// Weighted residual norm at the perturbed start, the point the first pass steps from.
    Scalar initial_residual_norm = std::numeric_limits<Scalar>::quiet_NaN();
    std::vector<IterationRecord<Scalar>> iterations;
    long evaluation_count = 0;
    /// Broyden matrix after absorbing the last secant pair.
    MatrixX<Scalar> broyden;
    /// Parameter change of the last secant pair absorbed into `broyden`.
    VectorX<Scalar> last_step;
};

// ---------------------------------------------------------------------------
// operations

/// S = 1/2 sum_i w_i r_i^2.
template <typename Derived>
typename Derived::Scalar objective_value(const Eigen::MatrixBase<Derived>& r) {
    return typename Derived::Scalar(0.5) * r.squaredNorm();
}

template <typename Derived, typename WeightDerived>
typename Derived::Scalar objective_value(const Eigen::MatrixBase<Derived>& r,
                                         const Eigen::MatrixBase<WeightDerived>& w) {
    if (w.size() != r.size())
        throw ConfigError("weights", "weight count does not match residual count");
    return typename Derived::Scalar(0.5) * (w.array() * r.array().square()).sum();
}

/// Starting guess for the Broyden matrix: ones on the leading diagonal, zeros elsewhere.
template <typename Scalar>
MatrixX<Scalar> unit_broyden(Eigen::Index m, Eigen::Index n) {
    return MatrixX<Scalar>::Identity(m, n);
}

/// Second starting point: beta0_j (1 + rel), or perturbation_abs where beta0_j is zero.
/// The result is clamped into the bounds; if that would leave a coordinate unchanged the
/// perturbation is applied in the opposite direction.
template <typename Scalar>
VectorX<Scalar> perturb_initial(const ParameterVector<Scalar>& beta0, const SolverConfig<Scalar>& cfg) {
    VectorX<Scalar> out(beta0.size());
    for (Eigen::Index j = 0; j < beta0.size(); ++j) {
        const Scalar b = beta0.values[j];
        const auto clamp = [&](Scalar v) { return std::min(std::max(v, beta0.lower[j]), beta0.upper[j]); };
        Scalar v = clamp(b != 0 ? b * (1 + cfg.perturbation_rel) : cfg.perturbation_abs);
        if (v == b)
            v = clamp(b != 0 ? b * (1 - cfg.perturbation_rel) : -cfg.perturbation_abs);
        if (v == b)
            throw ConfigError("perturbation_rel", "cannot perturb parameter " + std::to_string(j));
        out[j] = v;
    }
    return out;
}

/// Rank-one secant update B + (t - B s) s^T / ||s||^2, after which B s = t.
template <typename Scalar>
MatrixX<Scalar> broyden_update(const MatrixX<Scalar>& B, const VectorX<Scalar>& s, const VectorX<Scalar>& t) {
    if (s.size() != B.cols() || t.size() != B.rows())
        throw ConfigError("broyden", "secant pair does not match Broyden matrix dimensions");
    const Scalar ss = s.squaredNorm();
    if (!(ss >= Scalar(kStagnantStepSquaredNorm)))
        throw StagnantStep("step norm too small for a Broyden update");
    MatrixX<Scalar> out = B;
    out.noalias() += ((t - B * s) / ss) * s.transpose();
    return out;
}

/// Builds (B^T W B + lambda diag(B^T W B)) p = -B^T W r; W = I when `w` is absent.
template <typename Scalar>
DenseSystem<Scalar> assemble_lm_system(const MatrixX<Scalar>& B, const VectorX<Scalar>& r, Scalar lambda,
                                       const std::optional<VectorX<Scalar>>& w = std::nullopt) {
    if (r.size() != B.rows())
        throw ConfigError("residuals", "residual count does not match Broyden matrix rows");
    DenseSystem<Scalar> sys;
    if (w) {
        if (w->size() != r.size())
            throw ConfigError("weights", "weight count does not match residual count");
        const MatrixX<Scalar> WB = w->asDiagonal() * B;
        sys.a.noalias() = B.transpose() * WB;
        sys.b.noalias() = -(B.transpose() * w->cwiseProduct(r));
    } else {
        sys.a.noalias() = B.transpose() * B;
        sys.b.noalias() = -(B.transpose() * r);
    }
    const VectorX<Scalar> diag = sys.a.diagonal();
    sys.a.diagonal() += lambda * diag;
    return sys;
}

/// Direction p of the LM system; throws SingularSystem for rank-deficient systems.
template <typename Scalar>
VectorX<Scalar> lm_step(const DenseSystem<Scalar>& sys) {
    return solve(sys);
}

/// Largest alpha' <= alpha that keeps every bounded coordinate from moving past the midpoint
/// between its current value and the bound it is heading for. Coordinates already sitting on
/// that bound impose no limit; the trial point is clamped instead.
template <typename Scalar>
Scalar constrain_step(const ParameterVector<Scalar>& beta, const VectorX<Scalar>& p, Scalar alpha) {
    Scalar out = alpha;
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        if (p[j] == 0)
            continue;
        const Scalar bound = p[j] > 0 ? beta.upper[j] : beta.lower[j];
        if (!std::isfinite(bound))
            continue;
        const Scalar half = std::abs(bound - beta.values[j]) / 2;
        if (half == 0)
            continue;
        if (out * std::abs(p[j]) > half)
            out = half / std::abs(p[j]);
    }
    return out;
}

/// Sufficient decrease of the residual norm. The slope term uses the least-squares gradient
/// B^T r_old, so the right-hand side sits strictly below ||r_old|| for any descent direction.
template <typename Scalar>
bool armijo_holds(const VectorX<Scalar>& r_old, const VectorX<Scalar>& r_new, const VectorX<Scalar>& p,
                  Scalar alpha, Scalar c, const MatrixX<Scalar>& B) {
    const Scalar slope = (B.transpose() * r_old).dot(p);
    return r_new.norm() <= r_old.norm() + c * alpha * slope;
}

/// max_j |p_j| / |beta_j|, with a unit denominator where beta_j is exactly zero.
template <typename Scalar>
Scalar max_relative_change(const VectorX<Scalar>& p, const VectorX<Scalar>& beta) {
    Scalar worst = 0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
        const Scalar denom = beta[j] == 0 ? Scalar(1) : std::abs(beta[j]);
        worst = std::max(worst, std::abs(p[j]) / denom);
    }
    return worst;
}

template <typename Scalar>
bool check_convergence(const VectorX<Scalar>& p, const VectorX<Scalar>& beta, const SolverConfig<Scalar>& cfg) {
    if (p.size() != beta.size())
        throw ConfigError("p", "direction and parameter vector differ in length");
    if (max_relative_change(p, beta) < cfg.epsilon)
        return true;
    return cfg.max_p_norm && p.norm() < *cfg.max_p_norm;
}

template <typename Scalar>
Scalar update_lambda(Scalar lambda, bool accepted, const SolverConfig<Scalar>& cfg) {
    if (accepted)
        return std::max(lambda * cfg.lambda_decrease, Scalar(kLambdaFloor));
    return std::min(std::max(lambda * cfg.lambda_increase, Scalar(kLambdaFloor)), Scalar(kLambdaCap));
}

template <typename Scalar>
struct LineSearchResult {
    Scalar alpha = 0;
    VectorX<Scalar> beta;
    VectorX<Scalar> residuals;
    bool armijo_satisfied = false;
    int evaluations = 0;
};

/// Inputs of the sufficient-decrease test that stay fixed along one line search.
template <typename Scalar>
struct DescentModel {
    const VectorX<Scalar>& residuals;
    const MatrixX<Scalar>& broyden;
    /// sqrt of the weights; residuals and rows of B are scaled by it before the Armijo test.
    const VectorX<Scalar>* sqrt_weights = nullptr;
};

/// Step-halving line search along p starting at the feasibility-limited alpha.
///
/// Trial step lengths are alpha0, alpha0/2, ... down to the smallest value not below
/// alpha_min. The first trial passing the Armijo test with a strictly smaller norm is returned. Otherwise the trial with the
/// smallest residual norm is returned (ties go to the longer step) with armijo_satisfied unset.
/// A trial whose evaluation fails counts as rejected; if every trial fails, the last failure
/// is rethrown.
template <typename Scalar>
LineSearchResult<Scalar> backtrack(const ParameterVector<Scalar>& beta, const VectorX<Scalar>& p,
                                   const SolverConfig<Scalar>& cfg, const ResidualFunction<Scalar>& evaluate,
                                   const DescentModel<Scalar>& model) {
    const VectorX<Scalar>* sw = model.sqrt_weights;
    const VectorX<Scalar> r_old = sw ? VectorX<Scalar>(sw->cwiseProduct(model.residuals)) : model.residuals;
    const MatrixX<Scalar> B = sw ? MatrixX<Scalar>(sw->asDiagonal() * model.broyden) : model.broyden;

    LineSearchResult<Scalar> best;
    Scalar best_norm = std::numeric_limits<Scalar>::infinity();
    std::optional<EvaluatorFailure> last_failure;

    Scalar alpha = constrain_step(beta, p, Scalar(1));
    for (;;) {
        VectorX<Scalar> trial = beta.clamp(beta.values + alpha * p);
        ++best.evaluations;
        try {
            VectorX<Scalar> r_new = evaluate(trial);
            const VectorX<Scalar> scaled = sw ? VectorX<Scalar>(sw->cwiseProduct(r_new)) : r_new;
            // When the predicted decrease is below round-off the test can pass with no
            // decrease at all; such a trial is not progress.
            if (armijo_holds(r_old, scaled, p, alpha, cfg.armijo_c, B) && scaled.norm() < r_old.norm()) {
                best.alpha = alpha;
                best.beta = std::move(trial);
                best.residuals = std::move(r_new);
                best.armijo_satisfied = true;
                return best;
            }
            const Scalar norm = scaled.norm();
            if (norm < best_norm) {
                best_norm = norm;
                best.alpha = alpha;
                best.beta = std::move(trial);
                best.residuals = std::move(r_new);
            }
        } catch (const EvaluatorFailure& e) {
            last_failure = e;
        }
        const Scalar next = alpha / 2;
        if (next < cfg.alpha_min)
            break;
        alpha = next;
    }
    if (best.beta.size() == 0)
        throw *last_failure;
    return best;
}

// ---------------------------------------------------------------------------
// driver

namespace detail {

/// Counts calls and enforces a fixed, finite residual length.
template <typename Scalar>
class CheckedEvaluator {
public:
    CheckedEvaluator(const ResidualFunction<Scalar>& inner, long& counter) : inner_(inner), counter_(counter) {}

    VectorX<Scalar> operator()(const VectorX<Scalar>& beta) {
        ++counter_;
        VectorX<Scalar> r = inner_(beta);
        if (m_ < 0) {
            if (r.size() < 1)
                throw EvaluatorFailure(FailureKind::WrongLength, "evaluator returned no residuals");
            m_ = r.size();
        } else if (r.size() != m_) {
            throw EvaluatorFailure(FailureKind::WrongLength, "expected " + std::to_string(m_) +
                                                                 " residuals, got " + std::to_string(r.size()));
        }
        for (Eigen::Index i = 0; i < r.size(); ++i) {
            if (!std::isfinite(r[i]))
                throw EvaluatorFailure(FailureKind::NonFinite, "residual " + std::to_string(i) + " is not finite");
        }
        return r;
    }

    ResidualFunction<Scalar> function() {
        return [this](const VectorX<Scalar>& beta) { return (*this)(beta); };
    }

private:
    const ResidualFunction<Scalar>& inner_;
    long& counter_;
    Eigen::Index m_ = -1;
};

} // namespace detail

/// Minimizes 1/2 ||W^1/2 r(beta)||^2 starting from beta0 using residual evaluations only.
///
/// Two evaluations at beta0 and its perturbation seed the first secant pair. Every pass then
/// absorbs the latest secant pair into B (optionally replacing B by a finite-difference
/// Jacobian), solves the damped system for p, line-searches along p and adapts lambda. A pass
/// whose line search finds no sufficient decrease leaves beta unchanged, raises lambda and
/// hands the best trial to the next Broyden update. Configuration problems throw ConfigError;
/// evaluator problems end the run with status EvaluatorFailure.
template <typename Scalar>
using IterationObserver = std::function<void(const IterationRecord<Scalar>&)>;

template <typename Scalar>
RunReport<Scalar> optimize(const ResidualFunction<Scalar>& evaluate, const ParameterVector<Scalar>& beta0,
                           const SolverConfig<Scalar>& cfg, const Weights<Scalar>& weights = Weights<Scalar>::none(),
                           const IterationObserver<Scalar>& observer = {}) {
    cfg.validate();
    beta0.validate();

    RunReport<Scalar> report;
    report.final_beta = beta0;
    detail::CheckedEvaluator<Scalar> checked(evaluate, report.evaluation_count);
    const ResidualFunction<Scalar> eval = checked.function();
    const Eigen::Index n = beta0.size();

    const auto fail = [&](const EvaluatorFailure& e) {
        report.status = RunStatus::EvaluatorFailure;
        report.message = e.what();
        return report;
    };

    VectorX<Scalar> r0;
    VectorX<Scalar> beta1;
    VectorX<Scalar> r1;
    try {
        r0 = eval(beta0.values);
        if (cfg.check_determinism && eval(beta0.values) != r0)
            throw EvaluatorFailure(FailureKind::NonDeterministic, "repeated evaluation at beta0 differs");
        if (r0.size() < n)
            throw ConfigError("model", "fewer residuals (" + std::to_string(r0.size()) + ") than parameters (" +
                                           std::to_string(n) + ")");
        beta1 = perturb_initial(beta0, cfg);
        r1 = eval(beta1);
    } catch (const EvaluatorFailure& e) {
        return fail(e);
    }

    const Eigen::Index m = r0.size();
    const std::optional<VectorX<Scalar>> w = weights.resolve(m);
    std::optional<VectorX<Scalar>> sqrt_w;
    if (w)
        sqrt_w = w->cwiseSqrt();
    const auto weighted_norm = [&](const VectorX<Scalar>& r) {
        return sqrt_w ? sqrt_w->cwiseProduct(r).norm() : r.norm();
    };

    ParameterVector<Scalar> beta(beta1, beta0.lower, beta0.upper);
    VectorX<Scalar> r = r1;
    MatrixX<Scalar> B = unit_broyden<Scalar>(m, n);
    VectorX<Scalar> s = beta1 - beta0.values;
    VectorX<Scalar> t = r1 - r0;
    Scalar lambda = cfg.lambda_init;
    report.initial_residual_norm = weighted_norm(r);

    const auto record = [&](const IterationRecord<Scalar>& rec) {
        report.iterations.push_back(rec);
        if (observer)
            observer(rec);
    };

    const auto fail_at_current = [&](const EvaluatorFailure& e) {
        report.final_beta = beta;
        report.final_objective = w ? objective_value(r, *w) : objective_value(r);
        return fail(e);
    };

    const auto finish = [&](RunStatus status) {
        report.status = status;
        report.final_beta = beta;
        report.final_objective = w ? objective_value(r, *w) : objective_value(r);
        try {
            B = broyden_update(B, s, t);
        } catch (const StagnantStep&) {
        }
        report.broyden = B;
        report.last_step = s;
        return report;
    };

    for (int k = 1; k <= cfg.max_iterations; ++k) {
        IterationRecord<Scalar> rec;
        rec.k = k;
        try {
            B = broyden_update(B, s, t);
        } catch (const StagnantStep&) {
            rec.broyden_skipped = true;
        }

        try {
            if (cfg.fd_refresh_period && (k - 1) % *cfg.fd_refresh_period == 0)
                B = fd_jacobian(eval, beta.values, cfg.fd);
        } catch (const EvaluatorFailure& e) {
            return fail_at_current(e);
        }

        // Solve, raising lambda until the damped system is regular.
        VectorX<Scalar> p;
        DenseSystem<Scalar> sys;
        bool singular_at_cap = false;
        for (;;) {
            sys = assemble_lm_system(B, r, lambda, w);
            try {
                p = lm_step(sys);
                break;
            } catch (const SingularSystem&) {
                if (lambda >= Scalar(kLambdaCap)) {
                    singular_at_cap = true;
                    break;
                }
                lambda = update_lambda(lambda, false, cfg);
            }
        }
        rec.lambda = lambda;
        if (cfg.diagnostics)
            rec.condition = condition_estimate(sys);
        rec.beta = beta.values;
        rec.residual_norm = weighted_norm(r);
        rec.objective = Scalar(0.5) * rec.residual_norm * rec.residual_norm;

        if (singular_at_cap) {
            rec.p_norm = std::numeric_limits<Scalar>::quiet_NaN();
            rec.max_rel_change = std::numeric_limits<Scalar>::quiet_NaN();
            record(rec);
            report.message = "damped system singular at the lambda cap";
            return finish(RunStatus::LineSearchFloor);
        }

        rec.p_norm = p.norm();
        if (rec.p_norm == 0) {
            rec.max_rel_change = 0;
            record(rec);
            return finish(RunStatus::Converged);
        }

        LineSearchResult<Scalar> ls;
        try {
            ls = backtrack(beta, p, cfg, eval, DescentModel<Scalar>{r, B, sqrt_w ? &*sqrt_w : nullptr});
        } catch (const EvaluatorFailure& e) {
            rec.max_rel_change = max_relative_change(p, beta.values);
            record(rec);
            return fail_at_current(e);
        }

        s = ls.beta - beta.values;
        t = ls.residuals - r;
        rec.alpha = ls.alpha;
        rec.armijo_satisfied = ls.armijo_satisfied;
        const bool floor_reached = !ls.armijo_satisfied && lambda >= Scalar(kLambdaCap);
        if (ls.armijo_satisfied) {
            beta.values = std::move(ls.beta);
            r = std::move(ls.residuals);
        }
        lambda = update_lambda(lambda, ls.armijo_satisfied, cfg);

        rec.beta = beta.values;
        rec.residual_norm = weighted_norm(r);
        rec.objective = Scalar(0.5) * rec.residual_norm * rec.residual_norm;
        rec.max_rel_change = max_relative_change(p, beta.values);
        record(rec);

        if (check_convergence(p, beta.values, cfg))
            return finish(RunStatus::Converged);
        if (floor_reached) {
            report.message = "no sufficient decrease with lambda at its cap";
            return finish(RunStatus::LineSearchFloor);
        }
    }
    return finish(RunStatus::MaxIterations);
}

} // namespace qlm
