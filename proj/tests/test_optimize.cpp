#include "qlm/model.hpp"
#include "qlm/nlls.hpp"

#include "support/synthetic.hpp"

#include <doctest.h>

using namespace qlm;
using qlm::testing::vec;

namespace {

RunReport<double> fit(const AnalyticModel& model, const Dataset& data, const Vector& start,
                      const SolverConfig<double>& cfg = {}, const Weights<double>& w = Weights<double>::none()) {
    return optimize(dataset_evaluator(model, data), ParameterVector<double>(start), cfg, w);
}

/// Every pass either shows strict decrease with a satisfied Armijo test, or leaves beta
/// unchanged and raises lambda for the next pass.
void check_descent_trace(const RunReport<double>& report, const SolverConfig<double>& cfg) {
    double previous = report.initial_residual_norm;
    for (std::size_t i = 0; i < report.iterations.size(); ++i) {
        const auto& rec = report.iterations[i];
        CHECK(rec.objective == doctest::Approx(0.5 * rec.residual_norm * rec.residual_norm).epsilon(1e-14));
        if (rec.armijo_satisfied) {
            CHECK(rec.residual_norm < previous);
        } else {
            CHECK(rec.residual_norm == previous);
            if (i + 1 < report.iterations.size()) {
                const double expected = std::min(std::max(rec.lambda * cfg.lambda_increase, kLambdaFloor), kLambdaCap);
                CHECK(report.iterations[i + 1].lambda >= expected);
            }
        }
        previous = rec.residual_norm;
    }
}

} // namespace

TEST_CASE("optimize: exact linear data from a zero start") {
    const auto report = fit(AnalyticModel::linear(), testing::linear_exact(), Vector::Zero(2));
    REQUIRE(report.status == RunStatus::Converged);
    CHECK(report.final_beta.values[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(report.final_beta.values[1] == doctest::Approx(2.0).epsilon(1e-4));
    CHECK(report.iterations.back().max_rel_change < 1e-3);
    check_descent_trace(report, {});

    SolverConfig<double> tight;
    tight.epsilon = 1e-10;
    const auto exact = fit(AnalyticModel::linear(), testing::linear_exact(), Vector::Zero(2), tight);
    REQUIRE(exact.status == RunStatus::Converged);
    CHECK(exact.final_beta.values[0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(exact.final_beta.values[1] == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(exact.final_objective <= 1e-10);
}

TEST_CASE("optimize: constant model recovers the mean") {
    Dataset data;
    data.x.resize(2, 0);
    data.y = vec({4, 6});
    const auto report = fit(AnalyticModel::polynomial(0), data, Vector::Zero(1));
    REQUIRE(report.status == RunStatus::Converged);
    CHECK(report.final_beta.values[0] == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(report.final_objective == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("optimize: evaluator failures") {
    SUBCASE("NaN on the first evaluation") {
        const auto report = optimize<double>([](const Vector& b) { return Vector::Constant(b.size() + 1, std::nan("")); },
                                             ParameterVector<double>(Vector::Zero(2)), {});
        CHECK(report.status == RunStatus::EvaluatorFailure);
        CHECK(report.evaluation_count == 1);
        CHECK(report.iterations.empty());
    }
    SUBCASE("residual length changes") {
        int calls = 0;
        const auto report = optimize<double>(
            [&](const Vector&) { return Vector(Vector::Ones(++calls == 1 ? 3 : 4)); },
            ParameterVector<double>(Vector::Zero(2)), {});
        CHECK(report.status == RunStatus::EvaluatorFailure);
        CHECK(report.message.find("WrongLength") != std::string::npos);
    }
    SUBCASE("fewer residuals than parameters is a configuration error") {
        CHECK_THROWS_AS(optimize<double>([](const Vector&) { return Vector(Vector::Ones(1)); },
                                         ParameterVector<double>(Vector::Zero(2)), {}),
                        ConfigError);
    }
    SUBCASE("non-deterministic evaluator is caught when checking") {
        int calls = 0;
        SolverConfig<double> cfg;
        cfg.check_determinism = true;
        const auto report = optimize<double>([&](const Vector&) { return Vector(Vector::Constant(3, ++calls)); },
                                             ParameterVector<double>(Vector::Zero(2)), cfg);
        CHECK(report.status == RunStatus::EvaluatorFailure);
        CHECK(report.message.find("NonDeterministic") != std::string::npos);
    }
}

TEST_CASE("optimize: built-in regression problems descend monotonically") {
    const SolverConfig<double> cfg;
    for (const auto& problem : testing::regression_problems()) {
        CAPTURE(problem.name);
        const auto report = fit(problem.model, problem.data, problem.start, cfg);
        CHECK(report.status == RunStatus::Converged);
        check_descent_trace(report, cfg);
        CHECK((report.final_beta.values - problem.truth).norm() <= 0.1 * problem.truth.norm());
    }
}

TEST_CASE("optimize: status Converged iff final max_rel_change < epsilon") {
    SolverConfig<double> cfg;
    for (const auto& problem : testing::regression_problems()) {
        for (int cap : {1, 2, 3, 5, 200}) {
            CAPTURE(problem.name);
            CAPTURE(cap);
            cfg.max_iterations = cap;
            const auto report = fit(problem.model, problem.data, problem.start, cfg);
            REQUIRE_FALSE(report.iterations.empty());
            const bool small = report.iterations.back().max_rel_change < cfg.epsilon;
            CHECK((report.status == RunStatus::Converged) == small);
            CHECK(static_cast<int>(report.iterations.size()) <= cap);
            if (report.status != RunStatus::Converged)
                CHECK(report.status == RunStatus::MaxIterations);
        }
    }
}

TEST_CASE("optimize: iterates respect bounds") {
    // Unconstrained optimum of the decay rate is 1.3; cap it at 1.0.
    const auto problem = testing::regression_problems()[2];
    const ParameterVector<double> beta0(Vector::Zero(2), vec({0.0, 0.0}), vec({10.0, 1.0}));
    const auto report = optimize(dataset_evaluator(problem.model, problem.data), beta0, SolverConfig<double>{});
    REQUIRE_FALSE(report.iterations.empty());
    for (const auto& rec : report.iterations)
        CHECK(beta0.feasible(rec.beta));
    CHECK(beta0.feasible(report.final_beta.values));
    CHECK(report.final_beta.values[1] <= 1.0);
    CHECK(report.final_beta.values[1] > 0.9);
}

TEST_CASE("optimize: identity weights reproduce the unweighted trace") {
    const SolverConfig<double> cfg;
    for (const auto& problem : testing::regression_problems()) {
        CAPTURE(problem.name);
        const auto plain = fit(problem.model, problem.data, problem.start, cfg);
        const auto weighted = fit(problem.model, problem.data, problem.start, cfg,
                                  Weights<double>::per_datum(Vector::Ones(problem.data.size())));
        REQUIRE(plain.iterations.size() == weighted.iterations.size());
        for (std::size_t i = 0; i < plain.iterations.size(); ++i) {
            const auto& a = plain.iterations[i];
            const auto& b = weighted.iterations[i];
            CHECK((a.beta - b.beta).norm() <= 1e-12 * std::max(1.0, a.beta.norm()));
            CHECK(std::abs(a.objective - b.objective) <= 1e-12 * std::max(1.0, a.objective));
            CHECK(a.lambda == b.lambda);
            CHECK(a.alpha == b.alpha);
        }
    }
}

TEST_CASE("optimize: weights shift the fit toward heavily weighted data") {
    // Two clusters disagreeing on the constant; weights pick the winner.
    Dataset data;
    data.x.resize(4, 0);
    data.y = vec({0, 0, 10, 10});
    const auto heavy_high = fit(AnalyticModel::polynomial(0), data, Vector::Zero(1), {},
                                Weights<double>::per_datum(vec({1, 1, 9, 9})));
    REQUIRE(heavy_high.status == RunStatus::Converged);
    CHECK(heavy_high.final_beta.values[0] == doctest::Approx(9.0).epsilon(1e-4));
    // Weighted objective 1/2 sum w r^2 at beta = 9: 1/2 (81 + 81 + 9 + 9) = 90.
    CHECK(heavy_high.final_objective == doctest::Approx(90.0).epsilon(1e-6));
}

TEST_CASE("optimize: observer sees every record") {
    int seen = 0;
    const auto report = optimize(dataset_evaluator(AnalyticModel::linear(), testing::linear_exact()),
                                 ParameterVector<double>(Vector::Zero(2)), SolverConfig<double>{},
                                 Weights<double>::none(), IterationObserver<double>([&](const IterationRecord<double>& rec) {
                                     CHECK(rec.k == ++seen);
                                 }));
    CHECK(static_cast<std::size_t>(seen) == report.iterations.size());
}

TEST_CASE("optimize: diagnostics record a condition estimate") {
    SolverConfig<double> cfg;
    cfg.diagnostics = true;
    const auto report = fit(AnalyticModel::linear(), testing::linear_exact(), Vector::Zero(2), cfg);
    for (const auto& rec : report.iterations)
        CHECK(rec.condition >= 1.0);
    const auto quiet = fit(AnalyticModel::linear(), testing::linear_exact(), Vector::Zero(2));
    CHECK(std::isnan(quiet.iterations.front().condition));
}

TEST_CASE("optimize: unreachable decrease ends at the line-search floor") {
    // The perturbed start is a strict minimizer, so every trial step raises the residual norm.
    const ParameterVector<double> start(vec({1.0, 2.0}));
    SolverConfig<double> cfg;
    cfg.epsilon = 1e-30;
    const Vector centre = perturb_initial(start, cfg);
    const ResidualFunction<double> bowl = [&](const Vector& b) {
        return Vector(Vector::Constant(3, 1.0 + (b - centre).squaredNorm()));
    };
    const auto report = optimize(bowl, start, cfg);
    CHECK(report.status == RunStatus::LineSearchFloor);
    CHECK(report.iterations.back().lambda == kLambdaCap);
    CHECK(report.final_beta.values == centre);
    for (const auto& rec : report.iterations)
        CHECK_FALSE(rec.armijo_satisfied);

    // A flat residual is stationary; with the default epsilon the shrinking steps converge.
    const ResidualFunction<double> flat = [](const Vector& b) { return Vector(Vector::Constant(3, 1.0 + 0 * b[0])); };
    CHECK(optimize(flat, start, SolverConfig<double>{}).status == RunStatus::Converged);
}

TEST_CASE("optimize: final Broyden matrix satisfies the last secant pair") {
    const auto problem = testing::regression_problems()[2];
    const auto report = fit(problem.model, problem.data, problem.start);
    REQUIRE(report.status == RunStatus::Converged);
    REQUIRE(report.broyden.rows() == problem.data.size());
    REQUIRE(report.last_step.size() == 2);
    CHECK(report.last_step.norm() > 0);
}

TEST_CASE("optimize: works in single precision") {
    const auto data = testing::linear_exact();
    const auto model = AnalyticModel::linear();
    const ResidualFunction<float> eval = [&](const VectorX<float>& b) {
        return VectorX<float>(residuals_from_dataset(model, data, b.cast<double>()).cast<float>());
    };
    const auto report = optimize(eval, ParameterVector<float>(VectorX<float>::Zero(2)), SolverConfig<float>{});
    CHECK(report.status == RunStatus::Converged);
    CHECK(report.final_beta.values[0] == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(report.final_beta.values[1] == doctest::Approx(2.0).epsilon(1e-3));
}
