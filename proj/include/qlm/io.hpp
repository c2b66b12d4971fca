#pragma once

#include "qlm/external.hpp"
#include "qlm/model.hpp"
#include "qlm/nlls.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qlm {

inline constexpr std::string_view kRunSpecSchema = "qlm.runspec/1";
inline constexpr std::string_view kReportSchema = "qlm.report/1";

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    /// 1-based line of the offending input.
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reads delimiter-separated data with a header row naming x1..xd, y and optionally weight.
/// The delimiter is the first of ',', tab or ';' found in the header. Blank lines and lines
/// starting with '#' are ignored.
Dataset load_dataset(const std::filesystem::path& path);
Dataset parse_dataset(std::istream& in);

enum class WeightMode { None, Column, Uniform };

struct RunSpec {
    std::optional<AnalyticModel> model;
    std::optional<ExternalEvaluatorSpec> external;
    std::optional<Dataset> dataset;
    ParameterVector<double> beta0;
    SolverConfig<double> solver;
    WeightMode weight_mode = WeightMode::None;
    double uniform_weight = 1.0;
    /// Unknown keys, reported but otherwise ignored.
    std::vector<std::string> warnings;

    Weights<double> weights() const;
};

/// Reads a JSON run specification. Relative dataset paths and working directories are
/// resolved against the directory containing the spec. Throws ConfigError naming the key.
RunSpec load_runspec(const std::filesystem::path& path);
RunSpec parse_runspec(std::string_view text, const std::filesystem::path& base_dir = {});

enum class ReportFormat { Json, CsvTrace };

void write_report(const RunReport<double>& report, const std::filesystem::path& path, ReportFormat format);
std::string report_to_json(const RunReport<double>& report);
RunReport<double> report_from_json(std::string_view text);
std::string report_to_csv(const RunReport<double>& report);
RunReport<double> read_report(const std::filesystem::path& path);

/// Shortest text that parses back to exactly `value`, independent of the C locale.
std::string format_real(double value);

} // namespace qlm
