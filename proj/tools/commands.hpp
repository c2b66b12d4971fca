#pragma once

#include "qlm/io.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>

namespace qlm::cli {

/// Exit codes shared by every subcommand.
enum ExitCode : int {
    kExitConverged = 0,
    kExitConfig = 1,
    kExitNotConverged = 2,
    kExitEvaluator = 3,
};

int exit_code(RunStatus status);

/// The residual function described by a RunSpec, owning any child process it needs.
class BoundEvaluator {
public:
    explicit BoundEvaluator(const RunSpec& spec);

    const ResidualFunction<double>& function() const { return function_; }

private:
    std::unique_ptr<ExternalEvaluator> external_;
    ResidualFunction<double> function_;
};

struct FitOptions {
    std::filesystem::path spec;
    std::optional<std::filesystem::path> out;
    ReportFormat format = ReportFormat::Json;
    bool verbose = false;
};

struct CheckJacobianOptions {
    std::filesystem::path spec;
    FdScheme scheme = FdScheme::Central;
};

int cmd_fit(const FitOptions& opts, std::ostream& out, std::ostream& err);
int cmd_check_jacobian(const CheckJacobianOptions& opts, std::ostream& out, std::ostream& err);
int cmd_serve_model(const std::filesystem::path& spec, std::istream& in, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches to a subcommand.
int run(int argc, char** argv);

} // namespace qlm::cli
