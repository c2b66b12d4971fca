#pragma once

#include "qlm/types.hpp"

#include <vector>

namespace qlm {

enum class FdScheme { Forward, Central };

template <typename Scalar>
struct FdConfig {
    FdScheme scheme = FdScheme::Central;
    Scalar h_rel = Scalar(1e-6);
    /// Absolute step floor, used when |beta_j| is small or zero.
    Scalar h_abs = Scalar(1e-8);

    void validate() const {
        if (!(h_rel > 0) || !std::isfinite(h_rel))
            throw ConfigError("h_rel", "h_rel must be positive");
        if (!(h_abs > 0) || !std::isfinite(h_abs))
            throw ConfigError("h_abs", "h_abs must be positive");
    }
};

/// Column-wise finite-difference Jacobian of the residual map.
///
/// Column j uses the step h_j = h_rel * max(|beta_j|, h_abs / h_rel). Forward differences cost
/// n extra evaluations, central differences 2n. Because r = y - f, the result approximates
/// -df/dbeta. Evaluator failures are rethrown naming the column being probed.
template <typename Scalar>
MatrixX<Scalar> fd_jacobian(const ResidualFunction<Scalar>& evaluate, const VectorX<Scalar>& beta,
                            const FdConfig<Scalar>& cfg = {}) {
    cfg.validate();
    const Eigen::Index n = beta.size();

    VectorX<Scalar> base;
    if (cfg.scheme == FdScheme::Forward)
        base = evaluate(beta);

    MatrixX<Scalar> jac;
    for (Eigen::Index j = 0; j < n; ++j) {
        const Scalar h = cfg.h_rel * std::max(std::abs(beta[j]), cfg.h_abs / cfg.h_rel);
        VectorX<Scalar> column;
        try {
            VectorX<Scalar> probe = beta;
            probe[j] = beta[j] + h;
            const VectorX<Scalar> r_plus = evaluate(probe);
            if (cfg.scheme == FdScheme::Forward) {
                // Divide by the representable step, not the nominal one.
                column = (r_plus - base) / (probe[j] - beta[j]);
            } else {
                VectorX<Scalar> probe_minus = beta;
                probe_minus[j] = beta[j] - h;
                const VectorX<Scalar> r_minus = evaluate(probe_minus);
                if (r_minus.size() != r_plus.size())
                    throw EvaluatorFailure(FailureKind::LengthChanged, "residual length changed");
                column = (r_plus - r_minus) / (probe[j] - probe_minus[j]);
            }
        } catch (const EvaluatorFailure& e) {
            throw EvaluatorFailure(e.kind(), "finite-difference column " + std::to_string(j) + ": " + e.what());
        }
        if (j == 0)
            jac.resize(column.size(), n);
        else if (column.size() != jac.rows())
            throw EvaluatorFailure(FailureKind::LengthChanged,
                                   "finite-difference column " + std::to_string(j) + ": residual length changed");
        jac.col(j) = column;
    }
    return jac;
}

template <typename Scalar>
struct GridMinimum {
    VectorX<Scalar> beta;
    Scalar objective;
};

/// Exhaustive grid search over a box, for bracketing minima in tests. At most three parameters.
/// Nodes are visited with the first parameter varying slowest; the first node attaining the
/// minimum wins. Nodes where the evaluator fails are skipped.
template <typename Scalar>
GridMinimum<Scalar> brute_force_minimum(const ResidualFunction<Scalar>& evaluate,
                                        const VectorX<Scalar>& lower, const VectorX<Scalar>& upper,
                                        int grid_points) {
    const Eigen::Index n = lower.size();
    if (n < 1 || n > 3)
        throw ConfigError("box", "brute-force search supports 1 to 3 parameters");
    if (upper.size() != n)
        throw ConfigError("box", "box bounds have different lengths");
    if (grid_points < 2)
        throw ConfigError("grid_points", "need at least two grid points per axis");
    if (!lower.allFinite() || !upper.allFinite() || (upper.array() < lower.array()).any())
        throw ConfigError("box", "box must be finite with lower <= upper");

    std::vector<int> index(static_cast<std::size_t>(n), 0);
    const auto node = [&] {
        VectorX<Scalar> beta(n);
        for (Eigen::Index j = 0; j < n; ++j)
            beta[j] = lower[j] + (upper[j] - lower[j]) * Scalar(index[j]) / Scalar(grid_points - 1);
        return beta;
    };

    GridMinimum<Scalar> best{VectorX<Scalar>(), std::numeric_limits<Scalar>::infinity()};
    for (;;) {
        VectorX<Scalar> beta = node();
        try {
            const VectorX<Scalar> r = evaluate(beta);
            const Scalar s = Scalar(0.5) * r.squaredNorm();
            if (std::isfinite(s) && (best.beta.size() == 0 || s < best.objective))
                best = {std::move(beta), s};
        } catch (const EvaluatorFailure&) {
        }
        Eigen::Index j = n - 1;
        while (j >= 0 && ++index[j] == grid_points) {
            index[j] = 0;
            --j;
        }
        if (j < 0)
            break;
    }
    if (best.beta.size() == 0)
        throw EvaluatorFailure(FailureKind::NonFinite, "evaluator failed at every grid node");
    return best;
}

} // namespace qlm
