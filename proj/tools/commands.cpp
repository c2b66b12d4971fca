#include "commands.hpp"

#include "qlm/protocol.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>

namespace qlm::cli {

int exit_code(RunStatus status) {
    switch (status) {
    case RunStatus::Converged: return kExitConverged;
    case RunStatus::MaxIterations:
    case RunStatus::LineSearchFloor: return kExitNotConverged;
    case RunStatus::EvaluatorFailure: return kExitEvaluator;
    }
    return kExitConfig;
}

BoundEvaluator::BoundEvaluator(const RunSpec& spec) {
    if (spec.external) {
        external_ = std::make_unique<ExternalEvaluator>(*spec.external);
        function_ = external_->function();
    } else {
        function_ = dataset_evaluator(*spec.model, *spec.dataset);
    }
}

namespace {

std::string join(const Vector& v) {
    std::string out = "[";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i > 0)
            out += ", ";
        out += format_real(v[i]);
    }
    return out + "]";
}

void print_warnings(const RunSpec& spec, std::ostream& err) {
    for (const auto& w : spec.warnings)
        err << "warning: " << w << '\n';
}

/// Loads a spec, mapping every load failure to a diagnostic.
std::optional<RunSpec> load(const std::filesystem::path& path, std::ostream& err) {
    try {
        RunSpec spec = load_runspec(path);
        print_warnings(spec, err);
        return spec;
    } catch (const ConfigError& e) {
        err << "error: invalid spec (" << e.key() << "): " << e.what() << '\n';
    } catch (const ParseError& e) {
        err << "error: dataset " << e.what() << '\n';
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
    }
    return std::nullopt;
}

} // namespace

int cmd_fit(const FitOptions& opts, std::ostream& out, std::ostream& err) {
    const auto spec = load(opts.spec, err);
    if (!spec)
        return kExitConfig;

    RunReport<double> report;
    try {
        BoundEvaluator evaluator(*spec);
        IterationObserver<double> observer;
        if (opts.verbose) {
            observer = [&err](const IterationRecord<double>& rec) {
                err << "k=" << rec.k << " objective=" << format_real(rec.objective)
                    << " lambda=" << format_real(rec.lambda) << " alpha=" << format_real(rec.alpha)
                    << " p_norm=" << format_real(rec.p_norm) << " max_rel_change=" << format_real(rec.max_rel_change)
                    << " armijo=" << (rec.armijo_satisfied ? "true" : "false") << " beta=" << join(rec.beta)
                    << std::endl;
            };
        }
        report = optimize(evaluator.function(), spec->beta0, spec->solver, spec->weights(), observer);
    } catch (const ConfigError& e) {
        err << "error: invalid configuration (" << e.key() << "): " << e.what() << '\n';
        return kExitConfig;
    }

    out << "status=" << to_string(report.status) << " iterations=" << report.iterations.size()
        << " objective=" << format_real(report.final_objective) << " evaluations=" << report.evaluation_count
        << " beta=" << join(report.final_beta.values) << '\n';
    if (!report.message.empty())
        err << to_string(report.status) << ": " << report.message << '\n';

    if (opts.out) {
        try {
            write_report(report, *opts.out, opts.format);
        } catch (const IoError& e) {
            err << "error: " << e.what() << '\n';
            return kExitConfig;
        }
    }
    return exit_code(report.status);
}

int cmd_check_jacobian(const CheckJacobianOptions& opts, std::ostream& out, std::ostream& err) {
    const auto spec = load(opts.spec, err);
    if (!spec)
        return kExitConfig;

    try {
        BoundEvaluator evaluator(*spec);
        const auto report = optimize(evaluator.function(), spec->beta0, spec->solver, spec->weights());
        if (report.status == RunStatus::EvaluatorFailure) {
            err << "error: " << report.message << '\n';
            return kExitEvaluator;
        }

        FdConfig<double> fd = spec->solver.fd;
        fd.scheme = opts.scheme;
        const Matrix jac = fd_jacobian(evaluator.function(), report.final_beta.values, fd);
        const Matrix& B = report.broyden;

        out << "status=" << to_string(report.status) << " iterations=" << report.iterations.size()
            << " beta=" << join(report.final_beta.values) << '\n';
        const auto relative = [](double diff, double ref) { return ref > 0 ? diff / ref : diff; };
        for (Eigen::Index j = 0; j < jac.cols(); ++j) {
            out << "column " << j << ": discrepancy "
                << format_real(relative((B.col(j) - jac.col(j)).norm(), jac.col(j).norm())) << '\n';
        }
        out << "frobenius: discrepancy " << format_real(relative((B - jac).norm(), jac.norm())) << '\n';
        const Vector& s = report.last_step;
        if (s.size() == jac.cols() && s.squaredNorm() > 0) {
            const Vector js = jac * s;
            out << "secant direction: discrepancy " << format_real(relative((B * s - js).norm(), js.norm()))
                << '\n';
        }
        out << "finite-difference jacobian:\n";
        for (Eigen::Index i = 0; i < jac.rows(); ++i)
            out << "  " << join(jac.row(i).transpose()) << '\n';
        return kExitConverged;
    } catch (const ConfigError& e) {
        err << "error: invalid configuration (" << e.key() << "): " << e.what() << '\n';
        return kExitConfig;
    } catch (const EvaluatorFailure& e) {
        err << "error: " << e.what() << '\n';
        return kExitEvaluator;
    }
}

int cmd_serve_model(const std::filesystem::path& spec_path, std::istream& in, std::ostream& out, std::ostream& err) {
    const auto spec = load(spec_path, err);
    if (!spec)
        return kExitConfig;
    if (!spec->model) {
        err << "error: serve-model needs an analytic model and dataset\n";
        return kExitConfig;
    }

    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos)
            continue;
        std::string reply;
        try {
            const auto req = protocol::decode_request(line);
            try {
                reply = protocol::encode_residuals(req.id, residuals_from_dataset(*spec->model, *spec->dataset, req.params));
            } catch (const EvaluatorFailure& e) {
                reply = protocol::encode_error(req.id, e.what());
            }
        } catch (const protocol::RequestError& e) {
            reply = protocol::encode_error(e.id(), e.what());
        }
        out << reply << '\n';
        out.flush();
    }
    return kExitConverged;
}

int run(int argc, char** argv) {
    CLI::App app{"Jacobian-free Levenberg-Marquardt least squares with Broyden updates"};
    app.require_subcommand(1);

    FitOptions fit;
    std::string format = "json";
    auto* fit_cmd = app.add_subcommand("fit", "optimize the parameters described by a run spec");
    fit_cmd->add_option("--spec", fit.spec, "run specification (JSON)")->required();
    fit_cmd->add_option("--out", fit.out, "write the run report here");
    fit_cmd->add_option("--format", format, "report format")->check(CLI::IsMember({"json", "csv"}));
    fit_cmd->add_flag("-v,--verbose", fit.verbose, "print every iteration to standard error");

    CheckJacobianOptions check;
    std::string scheme = "central";
    auto* check_cmd = app.add_subcommand("check-jacobian", "compare the final Broyden matrix with finite differences");
    check_cmd->add_option("--spec", check.spec, "run specification (JSON)")->required();
    check_cmd->add_option("--scheme", scheme, "finite-difference scheme")->check(CLI::IsMember({"central", "forward"}));

    std::filesystem::path serve_spec;
    auto* serve_cmd = app.add_subcommand("serve-model", "answer residual requests on stdin/stdout");
    serve_cmd->add_option("--spec", serve_spec, "run specification naming an analytic model")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (*fit_cmd) {
        fit.format = format == "csv" ? ReportFormat::CsvTrace : ReportFormat::Json;
        return cmd_fit(fit, std::cout, std::cerr);
    }
    if (*check_cmd) {
        check.scheme = scheme == "forward" ? FdScheme::Forward : FdScheme::Central;
        return cmd_check_jacobian(check, std::cout, std::cerr);
    }
    return cmd_serve_model(serve_spec, std::cin, std::cout, std::cerr);
}

} // namespace qlm::cli
