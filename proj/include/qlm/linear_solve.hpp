#pragma once

#include "qlm/types.hpp"

#include <Eigen/LU>

namespace qlm {

/// Square system a·x = b. `a` is symmetric when assembled from B^T B forms.
template <typename Scalar>
struct DenseSystem {
    MatrixX<Scalar> a;
    VectorX<Scalar> b;
};

/// Pivots smaller than this fraction of the largest entry of `a` mark the system singular.
inline constexpr double kSingularPivotRatio = 1e-14;

namespace detail {

template <typename Scalar>
Eigen::PartialPivLU<MatrixX<Scalar>> factorize(const DenseSystem<Scalar>& sys) {
    if (sys.a.rows() < 1 || sys.a.rows() != sys.a.cols() || sys.b.size() != sys.a.rows())
        throw ConfigError("system", "linear system must be square with matching right-hand side");
    if (!sys.a.allFinite())
        throw SingularSystem("matrix contains non-finite entries");

    const Scalar scale = sys.a.cwiseAbs().maxCoeff();
    if (scale == Scalar(0))
        throw SingularSystem("zero matrix");

    Eigen::PartialPivLU<MatrixX<Scalar>> lu(sys.a);
    const Scalar floor = Scalar(kSingularPivotRatio) * scale;
    const auto& packed = lu.matrixLU();
    for (Eigen::Index i = 0; i < packed.rows(); ++i) {
        if (!(std::abs(packed(i, i)) >= floor))
            throw SingularSystem("pivot " + std::to_string(i) + " below singularity threshold");
    }
    return lu;
}

} // namespace detail

/// Solves a·x = b by LU factorization with partial pivoting.
/// Throws SingularSystem when a pivot drops below kSingularPivotRatio times max|a_ij|.
template <typename Scalar>
VectorX<Scalar> solve(const DenseSystem<Scalar>& sys) {
    const auto lu = detail::factorize(sys);
    VectorX<Scalar> x = lu.solve(sys.b);
    if (!x.allFinite())
        throw SingularSystem("solution is not finite");
    return x;
}

/// Estimate of the 1-norm condition number ||a||_1 ||a^-1||_1; +inf for singular systems.
template <typename Scalar>
Scalar condition_estimate(const DenseSystem<Scalar>& sys) {
    try {
        const auto lu = detail::factorize(sys);
        const Scalar rcond = lu.rcond();
        if (!(rcond > Scalar(0)))
            return std::numeric_limits<Scalar>::infinity();
        return Scalar(1) / rcond;
    } catch (const SingularSystem&) {
        return std::numeric_limits<Scalar>::infinity();
    }
}

} // namespace qlm
