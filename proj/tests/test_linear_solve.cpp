#include "qlm/linear_solve.hpp"

#include "support/synthetic.hpp"

#include <doctest.h>

#include <Eigen/LU>
#include <algorithm>
#include <numeric>

using namespace qlm;
using qlm::testing::Draw;

namespace {

DenseSystem<double> system(Matrix a, Vector b) {
    return {std::move(a), std::move(b)};
}

/// Exact ||A||_1 ||A^-1||_1 via an explicit inverse.
double exact_condition_1(const Matrix& a) {
    const Matrix inv = a.fullPivLu().inverse();
    return a.cwiseAbs().colwise().sum().maxCoeff() * inv.cwiseAbs().colwise().sum().maxCoeff();
}

} // namespace

TEST_CASE("solve: hand-checked systems") {
    const Vector x = solve(system(Matrix::Identity(3, 3), Vector::LinSpaced(3, 1, 3)));
    CHECK(x.isApprox(Vector::LinSpaced(3, 1, 3)));

    Matrix d(2, 2);
    d << 2, 0, 0, 4;
    const Vector y = solve(system(d, (Vector(2) << 2, 8).finished()));
    CHECK(y[0] == doctest::Approx(1.0));
    CHECK(y[1] == doctest::Approx(2.0));
}

TEST_CASE("solve: rank-deficient and degenerate input") {
    Matrix ones = Matrix::Ones(2, 2);
    CHECK_THROWS_AS(solve(system(ones, (Vector(2) << 1, 2).finished())), SingularSystem);
    CHECK_THROWS_AS(solve(system(Matrix::Zero(2, 2), Vector::Ones(2))), SingularSystem);
    CHECK_THROWS_AS(solve(system(Matrix::Identity(2, 3), Vector::Ones(2))), ConfigError);

    // Pivot 1e-8 relative is far above the 1e-14 threshold.
    Matrix tiny(2, 2);
    tiny << 1, 0, 0, 1e-8;
    CHECK_NOTHROW(solve(system(tiny, Vector::Ones(2))));
    tiny(1, 1) = 1e-15;
    CHECK_THROWS_AS(solve(system(tiny, Vector::Ones(2))), SingularSystem);
}

TEST_CASE("condition_estimate: diagonal systems") {
    CHECK(condition_estimate(system(Matrix::Identity(2, 2), Vector::Ones(2))) == doctest::Approx(1.0));
    CHECK(condition_estimate(system(2.0 * Matrix::Identity(2, 2), Vector::Ones(2))) == doctest::Approx(1.0));

    Matrix d(2, 2);
    d << 1, 0, 0, 1e-8;
    const double c = condition_estimate(system(d, Vector::Ones(2)));
    CHECK(c >= 0.5e8);
    CHECK(c <= 2e8);

    CHECK(std::isinf(condition_estimate(system(Matrix::Ones(2, 2), Vector::Ones(2)))));
}

TEST_CASE("condition_estimate: within a factor n of the exact 1-norm condition number") {
    Draw draw(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = draw.integer(1, 12);
        const Matrix m = draw.matrix(n, n);
        const Matrix a = m.transpose() * m + 0.01 * Matrix::Identity(n, n);
        const double exact = exact_condition_1(a);
        const double est = condition_estimate(system(a, Vector::Ones(n)));
        CHECK(est <= exact * (1 + 1e-8));
        CHECK(est * n >= exact * (1 - 1e-8));
    }
}

TEST_CASE("solve: round trip on random SPD systems") {
    Draw draw(7);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = draw.integer(1, 50);
        const Matrix m = draw.matrix(n, n);
        const Matrix a = m.transpose() * m + Matrix::Identity(n, n);
        const Vector b = draw.vector(n, -10, 10);
        const Vector x = solve(system(a, b));
        const double bound = 1e-9 * (1 + b.cwiseAbs().maxCoeff());
        CHECK((a * x - b).cwiseAbs().maxCoeff() <= bound);
        const double rel = (a * x - b).norm() / (a.norm() * x.norm() + b.norm());
        CHECK(rel <= 1e-10);
    }
}

TEST_CASE("solve: symmetric permutation permutes the solution") {
    Draw draw(5);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = draw.integer(2, 20);
        const Matrix m = draw.matrix(n, n);
        const Matrix a = m.transpose() * m + Matrix::Identity(n, n);
        const Vector b = draw.vector(n);

        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), std::mt19937(static_cast<unsigned>(trial)));
        Eigen::PermutationMatrix<Eigen::Dynamic> perm(n);
        for (int i = 0; i < n; ++i)
            perm.indices()[i] = order[static_cast<std::size_t>(i)];

        const Matrix pa = perm * a * perm.transpose();
        const Vector pb = perm * b;
        const Vector x = solve(system(a, b));
        const Vector px = solve(system(pa, pb));
        CHECK((px - perm * x).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("DenseSystem from B^T B forms is symmetric") {
    Draw draw(3);
    const Matrix b = draw.matrix(9, 4);
    const Matrix a = b.transpose() * b;
    CHECK((a - a.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * a.cwiseAbs().maxCoeff());
}
