#include "qlm/io.hpp"

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace qlm {

using nlohmann::json;

std::string format_real(double value) {
    if (std::isnan(value))
        return "nan";
    if (std::isinf(value))
        return value > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// datasets

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view line, char delim) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(delim, start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return out;
}

std::optional<double> parse_real(std::string_view text) {
    if (!text.empty() && text.front() == '+')
        text.remove_prefix(1);
    double value = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || text.empty() || !std::isfinite(value))
        return std::nullopt;
    return value;
}

} // namespace

Dataset parse_dataset(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    char delim = ',';
    std::optional<std::size_t> y_col;
    std::optional<std::size_t> w_col;
    std::vector<std::size_t> x_cols;
    std::size_t columns = 0;
    bool have_header = false;

    std::vector<std::vector<double>> xs;
    std::vector<double> ys;
    std::vector<double> ws;

    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view view = trim(line);
        if (view.empty() || view.front() == '#')
            continue;

        if (!have_header) {
            for (char c : {',', '\t', ';'}) {
                if (view.find(c) != std::string_view::npos) {
                    delim = c;
                    break;
                }
            }
            const auto names = split(view, delim);
            columns = names.size();
            std::map<std::size_t, std::size_t> x_by_index;
            std::set<std::string_view> seen;
            for (std::size_t c = 0; c < names.size(); ++c) {
                const std::string_view name = names[c];
                if (!seen.insert(name).second)
                    throw ParseError(line_no, "duplicate column '" + std::string(name) + "'");
                if (name == "y") {
                    y_col = c;
                } else if (name == "weight") {
                    w_col = c;
                } else if (name.size() > 1 && name.front() == 'x') {
                    std::size_t idx = 0;
                    const auto digits = name.substr(1);
                    const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), idx);
                    if (res.ec != std::errc() || res.ptr != digits.data() + digits.size() || idx == 0)
                        throw ParseError(line_no, "unknown column '" + std::string(name) + "'");
                    x_by_index[idx] = c;
                } else {
                    throw ParseError(line_no, "unknown column '" + std::string(name) + "'");
                }
            }
            if (!y_col)
                throw ParseError(line_no, "header has no y column");
            std::size_t expected = 1;
            for (const auto& [idx, col] : x_by_index) {
                if (idx != expected++)
                    throw ParseError(line_no, "independent variables must be named x1..xd without gaps");
                x_cols.push_back(col);
            }
            have_header = true;
            continue;
        }

        const auto cells = split(view, delim);
        if (cells.size() != columns)
            throw ParseError(line_no, "expected " + std::to_string(columns) + " cells, found " +
                                          std::to_string(cells.size()));
        const auto cell = [&](std::size_t c) {
            const auto v = parse_real(cells[c]);
            if (!v)
                throw ParseError(line_no, "non-numeric cell '" + std::string(cells[c]) + "'");
            return *v;
        };
        std::vector<double> row;
        for (std::size_t c : x_cols)
            row.push_back(cell(c));
        xs.push_back(std::move(row));
        ys.push_back(cell(*y_col));
        if (w_col) {
            const double w = cell(*w_col);
            if (!(w > 0))
                throw ParseError(line_no, "weight must be positive");
            ws.push_back(w);
        }
    }

    if (!have_header)
        throw ParseError(line_no == 0 ? 1 : line_no, "missing header row");
    if (ys.empty())
        throw ParseError(line_no + 1, "dataset has no data rows");

    Dataset data;
    const auto m = static_cast<Eigen::Index>(ys.size());
    const auto d = static_cast<Eigen::Index>(x_cols.size());
    data.x.resize(m, d);
    data.y.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < d; ++j)
            data.x(i, j) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        data.y[i] = ys[static_cast<std::size_t>(i)];
    }
    if (w_col)
        data.weights = Eigen::Map<const Vector>(ws.data(), m);
    return data;
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open dataset '" + path.string() + "'");
    return parse_dataset(in);
}

// ---------------------------------------------------------------------------
// run specification

namespace {

double get_real(const json& j, const std::string& key) {
    if (!j.is_number())
        throw ConfigError(key, key + ": expected a number");
    return j.get<double>();
}

int get_int(const json& j, const std::string& key) {
    if (!j.is_number_integer())
        throw ConfigError(key, key + ": expected an integer");
    return j.get<int>();
}

bool get_bool(const json& j, const std::string& key) {
    if (!j.is_boolean())
        throw ConfigError(key, key + ": expected true or false");
    return j.get<bool>();
}

Vector get_vector(const json& j, const std::string& key) {
    if (!j.is_array())
        throw ConfigError(key, key + ": expected an array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = get_real(j[i], key);
    return v;
}

void warn_unknown(const json& obj, std::initializer_list<std::string_view> known, const std::string& scope,
                  std::vector<std::string>& warnings) {
    for (const auto& [key, value] : obj.items()) {
        bool found = false;
        for (auto k : known)
            found = found || key == k;
        if (!found)
            warnings.push_back("unknown key '" + scope + key + "' ignored");
    }
}

SolverConfig<double> parse_solver(const json& j, std::vector<std::string>& warnings) {
    SolverConfig<double> cfg;
    if (!j.is_object())
        throw ConfigError("solver", "solver: expected an object");
    warn_unknown(j,
                 {"epsilon", "armijo_c", "alpha_min", "lambda_init", "lambda_decrease", "lambda_increase",
                  "perturbation_rel", "perturbation_abs", "max_iterations", "max_p_norm", "fd_refresh_period",
                  "fd_scheme", "fd_h_rel", "fd_h_abs", "diagnostics", "check_determinism"},
                 "solver.", warnings);
    const std::pair<const char*, double*> reals[] = {
        {"epsilon", &cfg.epsilon},
        {"armijo_c", &cfg.armijo_c},
        {"alpha_min", &cfg.alpha_min},
        {"lambda_init", &cfg.lambda_init},
        {"lambda_decrease", &cfg.lambda_decrease},
        {"lambda_increase", &cfg.lambda_increase},
        {"perturbation_rel", &cfg.perturbation_rel},
        {"perturbation_abs", &cfg.perturbation_abs},
        {"fd_h_rel", &cfg.fd.h_rel},
        {"fd_h_abs", &cfg.fd.h_abs},
    };
    for (const auto& [key, target] : reals) {
        if (auto it = j.find(key); it != j.end())
            *target = get_real(*it, key);
    }
    if (auto it = j.find("max_iterations"); it != j.end())
        cfg.max_iterations = get_int(*it, "max_iterations");
    if (auto it = j.find("max_p_norm"); it != j.end() && !it->is_null())
        cfg.max_p_norm = get_real(*it, "max_p_norm");
    if (auto it = j.find("fd_refresh_period"); it != j.end() && !it->is_null())
        cfg.fd_refresh_period = get_int(*it, "fd_refresh_period");
    if (auto it = j.find("fd_scheme"); it != j.end()) {
        const std::string scheme = it->is_string() ? it->get<std::string>() : "";
        if (scheme == "central")
            cfg.fd.scheme = FdScheme::Central;
        else if (scheme == "forward")
            cfg.fd.scheme = FdScheme::Forward;
        else
            throw ConfigError("fd_scheme", "fd_scheme: expected \"central\" or \"forward\"");
    }
    if (auto it = j.find("diagnostics"); it != j.end())
        cfg.diagnostics = get_bool(*it, "diagnostics");
    if (auto it = j.find("check_determinism"); it != j.end())
        cfg.check_determinism = get_bool(*it, "check_determinism");

    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        // Report the key with its own name; h_rel/h_abs live under fd_ in the file.
        if (e.key() == "h_rel" || e.key() == "h_abs")
            throw ConfigError("fd_" + e.key(), "fd_" + e.key() + ": must be positive");
        throw;
    }
    return cfg;
}

Dataset parse_inline_dataset(const json& j) {
    if (!j.contains("y"))
        throw ConfigError("dataset", "dataset: inline dataset needs a y array");
    Dataset data;
    data.y = get_vector(j.at("y"), "dataset");
    const auto m = data.y.size();
    if (auto it = j.find("x"); it != j.end()) {
        if (!it->is_array() || static_cast<Eigen::Index>(it->size()) != m)
            throw ConfigError("dataset", "dataset: x must have one entry per y");
        Eigen::Index d = -1;
        for (std::size_t i = 0; i < it->size(); ++i) {
            const json& row = (*it)[i];
            const Vector values = row.is_array() ? get_vector(row, "dataset") : Vector::Constant(1, get_real(row, "dataset"));
            if (d < 0) {
                d = values.size();
                data.x.resize(m, d);
            } else if (values.size() != d) {
                throw ConfigError("dataset", "dataset: x rows differ in length");
            }
            data.x.row(static_cast<Eigen::Index>(i)) = values.transpose();
        }
        if (d < 0)
            data.x.resize(m, 0);
    } else {
        data.x.resize(m, 0);
    }
    if (auto it = j.find("weight"); it != j.end())
        data.weights = get_vector(*it, "dataset");
    data.validate();
    return data;
}

} // namespace

Weights<double> RunSpec::weights() const {
    switch (weight_mode) {
    case WeightMode::None:
        return Weights<double>::none();
    case WeightMode::Uniform:
        return Weights<double>::uniform(uniform_weight);
    case WeightMode::Column:
        if (!dataset || !dataset->weights)
            throw ConfigError("weights", "weights: column weighting needs a weight column");
        return Weights<double>::per_datum(*dataset->weights);
    }
    return Weights<double>::none();
}

RunSpec parse_runspec(std::string_view text, const std::filesystem::path& base_dir) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("spec", std::string("spec is not valid JSON: ") + e.what());
    }
    if (!j.is_object())
        throw ConfigError("spec", "spec must be a JSON object");

    RunSpec spec;
    warn_unknown(j, {"schema", "model", "external", "dataset", "beta0", "bounds", "solver", "weights"}, "",
                 spec.warnings);
    if (auto it = j.find("schema"); it != j.end() && (!it->is_string() || it->get<std::string>() != kRunSpecSchema))
        throw ConfigError("schema", "schema: expected \"" + std::string(kRunSpecSchema) + "\"");

    const bool has_model = j.contains("model");
    const bool has_external = j.contains("external");
    if (has_model == has_external)
        throw ConfigError("model", "model: give exactly one of an analytic model or an external evaluator");

    if (has_model) {
        const json& m = j.at("model");
        if (m.is_string()) {
            spec.model = model_from_name(m.get<std::string>());
        } else if (m.is_object() && m.contains("kind") && m.at("kind").is_string()) {
            warn_unknown(m, {"kind", "degree"}, "model.", spec.warnings);
            int degree = 1;
            if (auto d = m.find("degree"); d != m.end())
                degree = get_int(*d, "degree");
            spec.model = model_from_name(m.at("kind").get<std::string>(), degree);
        } else {
            throw ConfigError("model", "model: expected a name or an object with a kind");
        }
        if (!j.contains("dataset"))
            throw ConfigError("dataset", "dataset: analytic models need a dataset");
        const json& ds = j.at("dataset");
        if (ds.is_string()) {
            std::filesystem::path p = ds.get<std::string>();
            if (p.is_relative())
                p = base_dir / p;
            spec.dataset = load_dataset(p);
        } else if (ds.is_object()) {
            spec.dataset = parse_inline_dataset(ds);
        } else {
            throw ConfigError("dataset", "dataset: expected a path or an inline object");
        }
    } else {
        const json& e = j.at("external");
        if (!e.is_object())
            throw ConfigError("external", "external: expected an object");
        warn_unknown(e, {"command", "working_dir", "timeout", "protocol_version"}, "external.", spec.warnings);
        ExternalEvaluatorSpec ext;
        const auto cmd = e.find("command");
        if (cmd == e.end() || !cmd->is_array())
            throw ConfigError("command", "command: expected an array of strings");
        for (const auto& a : *cmd) {
            if (!a.is_string())
                throw ConfigError("command", "command: expected an array of strings");
            ext.command.push_back(a.get<std::string>());
        }
        ext.working_dir = base_dir;
        if (auto w = e.find("working_dir"); w != e.end()) {
            if (!w->is_string())
                throw ConfigError("working_dir", "working_dir: expected a path");
            std::filesystem::path p = w->get<std::string>();
            ext.working_dir = p.is_relative() ? base_dir / p : p;
        }
        if (auto t = e.find("timeout"); t != e.end())
            ext.timeout = std::chrono::duration<double>(get_real(*t, "timeout"));
        if (auto v = e.find("protocol_version"); v != e.end())
            ext.protocol_version = get_int(*v, "protocol_version");
        ext.validate();
        spec.external = std::move(ext);
        if (j.contains("dataset"))
            spec.warnings.push_back("dataset ignored for external evaluators");
    }

    if (auto it = j.find("solver"); it != j.end())
        spec.solver = parse_solver(*it, spec.warnings);

    Eigen::Index n = -1;
    if (spec.model)
        n = spec.model->parameter_count(spec.dataset->dimension());
    Vector beta0;
    if (auto it = j.find("beta0"); it != j.end()) {
        beta0 = get_vector(*it, "beta0");
        if (n >= 0 && beta0.size() != n)
            throw ConfigError("beta0", "beta0: expected " + std::to_string(n) + " values");
        if (beta0.size() < 1)
            throw ConfigError("beta0", "beta0: needs at least one value");
    } else if (n >= 0) {
        beta0 = Vector::Zero(n);
    } else {
        throw ConfigError("beta0", "beta0: required for external evaluators");
    }
    n = beta0.size();

    Vector lower = Vector::Constant(n, -std::numeric_limits<double>::infinity());
    Vector upper = Vector::Constant(n, std::numeric_limits<double>::infinity());
    if (auto it = j.find("bounds"); it != j.end()) {
        if (!it->is_array() || static_cast<Eigen::Index>(it->size()) != n)
            throw ConfigError("bounds", "bounds: expected one [lower, upper] pair per parameter");
        for (std::size_t i = 0; i < it->size(); ++i) {
            const json& pair = (*it)[i];
            if (pair.is_null())
                continue;
            if (!pair.is_array() || pair.size() != 2)
                throw ConfigError("bounds", "bounds: expected [lower, upper] with null for an open side");
            if (!pair[0].is_null())
                lower[static_cast<Eigen::Index>(i)] = get_real(pair[0], "bounds");
            if (!pair[1].is_null())
                upper[static_cast<Eigen::Index>(i)] = get_real(pair[1], "bounds");
        }
    }
    spec.beta0 = ParameterVector<double>(beta0, lower, upper);

    if (auto it = j.find("weights"); it != j.end()) {
        if (it->is_string() && it->get<std::string>() == "none") {
            spec.weight_mode = WeightMode::None;
        } else if (it->is_string() && it->get<std::string>() == "column") {
            if (!spec.dataset || !spec.dataset->weights)
                throw ConfigError("weights", "weights: column weighting needs a dataset with a weight column");
            spec.weight_mode = WeightMode::Column;
        } else if (it->is_object() && it->contains("uniform")) {
            spec.weight_mode = WeightMode::Uniform;
            spec.uniform_weight = get_real(it->at("uniform"), "weights");
            if (!(spec.uniform_weight > 0) || !std::isfinite(spec.uniform_weight))
                throw ConfigError("weights", "weights: uniform weight must be positive");
        } else {
            throw ConfigError("weights", "weights: expected \"none\", \"column\" or {\"uniform\": value}");
        }
    } else if (spec.dataset && spec.dataset->weights) {
        spec.weight_mode = WeightMode::Column;
    }
    return spec;
}

RunSpec load_runspec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open spec '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_runspec(buf.str(), path.parent_path());
}

// ---------------------------------------------------------------------------
// reports

namespace {

json real_to_json(double v) {
    if (std::isfinite(v))
        return v;
    return format_real(v);
}

double real_from_json(const json& j) {
    if (j.is_number())
        return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "nan")
            return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf")
            return std::numeric_limits<double>::infinity();
        if (s == "-inf")
            return -std::numeric_limits<double>::infinity();
    }
    throw ConfigError("report", "report: expected a real, got " + j.dump());
}

json vector_to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i)
        out.push_back(real_to_json(v[i]));
    return out;
}

Vector vector_from_json(const json& j) {
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = real_from_json(j[i]);
    return v;
}

RunStatus status_from_string(const std::string& s) {
    for (auto st : {RunStatus::Converged, RunStatus::MaxIterations, RunStatus::LineSearchFloor,
                    RunStatus::EvaluatorFailure}) {
        if (to_string(st) == s)
            return st;
    }
    throw ConfigError("status", "report: unknown status '" + s + "'");
}

} // namespace

std::string report_to_json(const RunReport<double>& report) {
    json iterations = json::array();
    for (const auto& rec : report.iterations) {
        iterations.push_back({
            {"k", rec.k},
            {"beta", vector_to_json(rec.beta)},
            {"residual_norm", real_to_json(rec.residual_norm)},
            {"objective", real_to_json(rec.objective)},
            {"lambda", real_to_json(rec.lambda)},
            {"alpha", real_to_json(rec.alpha)},
            {"p_norm", real_to_json(rec.p_norm)},
            {"max_rel_change", real_to_json(rec.max_rel_change)},
            {"armijo_satisfied", rec.armijo_satisfied},
            {"broyden_skipped", rec.broyden_skipped},
            {"condition", real_to_json(rec.condition)},
        });
    }
    json broyden = json::array();
    for (Eigen::Index i = 0; i < report.broyden.rows(); ++i)
        broyden.push_back(vector_to_json(report.broyden.row(i).transpose()));

    const json out = {
        {"schema", kReportSchema},
        {"status", to_string(report.status)},
        {"message", report.message},
        {"final_beta",
         {{"values", vector_to_json(report.final_beta.values)},
          {"lower", vector_to_json(report.final_beta.lower)},
          {"upper", vector_to_json(report.final_beta.upper)}}},
        {"final_objective", real_to_json(report.final_objective)},
        {"initial_residual_norm", real_to_json(report.initial_residual_norm)},
        {"evaluation_count", report.evaluation_count},
        {"broyden", broyden},
        {"last_step", vector_to_json(report.last_step)},
        {"iterations", iterations},
    };
    return out.dump(2);
}

RunReport<double> report_from_json(std::string_view text) {
    const json j = json::parse(text);
    if (j.value("schema", "") != kReportSchema)
        throw ConfigError("schema", "report: unexpected schema");
    RunReport<double> report;
    report.status = status_from_string(j.at("status").get<std::string>());
    report.message = j.at("message").get<std::string>();
    const json& fb = j.at("final_beta");
    report.final_beta.values = vector_from_json(fb.at("values"));
    report.final_beta.lower = vector_from_json(fb.at("lower"));
    report.final_beta.upper = vector_from_json(fb.at("upper"));
    report.final_objective = real_from_json(j.at("final_objective"));
    report.initial_residual_norm = real_from_json(j.at("initial_residual_norm"));
    report.evaluation_count = j.at("evaluation_count").get<long>();
    const json& b = j.at("broyden");
    if (!b.empty()) {
        report.broyden.resize(static_cast<Eigen::Index>(b.size()), static_cast<Eigen::Index>(b[0].size()));
        for (std::size_t i = 0; i < b.size(); ++i)
            report.broyden.row(static_cast<Eigen::Index>(i)) = vector_from_json(b[i]).transpose();
    }
    report.last_step = vector_from_json(j.at("last_step"));
    for (const json& it : j.at("iterations")) {
        IterationRecord<double> rec;
        rec.k = it.at("k").get<int>();
        rec.beta = vector_from_json(it.at("beta"));
        rec.residual_norm = real_from_json(it.at("residual_norm"));
        rec.objective = real_from_json(it.at("objective"));
        rec.lambda = real_from_json(it.at("lambda"));
        rec.alpha = real_from_json(it.at("alpha"));
        rec.p_norm = real_from_json(it.at("p_norm"));
        rec.max_rel_change = real_from_json(it.at("max_rel_change"));
        rec.armijo_satisfied = it.at("armijo_satisfied").get<bool>();
        rec.broyden_skipped = it.at("broyden_skipped").get<bool>();
        rec.condition = real_from_json(it.at("condition"));
        report.iterations.push_back(std::move(rec));
    }
    return report;
}

std::string report_to_csv(const RunReport<double>& report) {
    std::string out = "k,objective,residual_norm,lambda,alpha,p_norm,max_rel_change,armijo_satisfied\n";
    for (const auto& rec : report.iterations) {
        out += std::to_string(rec.k);
        for (double v : {rec.objective, rec.residual_norm, rec.lambda, rec.alpha, rec.p_norm, rec.max_rel_change}) {
            out += ',';
            out += format_real(v);
        }
        out += rec.armijo_satisfied ? ",true\n" : ",false\n";
    }
    return out;
}

void write_report(const RunReport<double>& report, const std::filesystem::path& path, ReportFormat format) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + path.string() + "' for writing");
    out << (format == ReportFormat::Json ? report_to_json(report) + "\n" : report_to_csv(report));
    out.flush();
    if (!out)
        throw IoError("failed writing '" + path.string() + "'");
}

RunReport<double> read_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError("cannot open report '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return report_from_json(buf.str());
}

} // namespace qlm
