#include "qlm/protocol.hpp"

#include <json.hpp>

namespace qlm::protocol {

using nlohmann::json;

namespace {

json to_array(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i)
        out.push_back(v[i]);
    return out;
}

std::string dump(const json& j) {
    return j.dump(-1, ' ', false, json::error_handler_t::strict);
}

} // namespace

std::string encode_request(std::int64_t id, const Vector& params) {
    return dump(json{{"v", kVersion}, {"id", id}, {"params", to_array(params)}});
}

std::string encode_residuals(std::int64_t id, const Vector& residuals) {
    return dump(json{{"v", kVersion}, {"id", id}, {"residuals", to_array(residuals)}});
}

std::string encode_error(std::int64_t id, std::string_view message) {
    return dump(json{{"v", kVersion}, {"id", id}, {"error", std::string(message)}});
}

Request decode_request(std::string_view line) {
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw RequestError(-1, "request is not a JSON object");

    std::int64_t id = -1;
    if (auto it = j.find("id"); it != j.end() && it->is_number_integer())
        id = it->get<std::int64_t>();
    else
        throw RequestError(-1, "request lacks an integer id");

    const auto v = j.find("v");
    if (v == j.end() || !v->is_number_integer() || v->get<int>() != kVersion)
        throw RequestError(id, "unsupported protocol version");

    const auto params = j.find("params");
    if (params == j.end() || !params->is_array())
        throw RequestError(id, "request lacks a params array");

    Request req;
    req.id = id;
    req.params.resize(static_cast<Eigen::Index>(params->size()));
    for (std::size_t i = 0; i < params->size(); ++i) {
        const json& p = (*params)[i];
        if (!p.is_number())
            throw RequestError(id, "param " + std::to_string(i) + " is not a number");
        req.params[static_cast<Eigen::Index>(i)] = p.get<double>();
        if (!std::isfinite(req.params[static_cast<Eigen::Index>(i)]))
            throw RequestError(id, "param " + std::to_string(i) + " is not finite");
    }
    return req;
}

Response decode_response(std::string_view line) {
    const auto malformed = [](const std::string& what) {
        return EvaluatorFailure(FailureKind::MalformedResponse, what);
    };

    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw malformed("response is not a JSON object: " + std::string(line.substr(0, 80)));

    const auto v = j.find("v");
    if (v == j.end() || !v->is_number_integer() || v->get<int>() != kVersion)
        throw malformed("unsupported protocol version");
    const auto id = j.find("id");
    if (id == j.end() || !id->is_number_integer())
        throw malformed("response lacks an integer id");

    Response resp;
    resp.id = id->get<std::int64_t>();

    const auto residuals = j.find("residuals");
    const auto error = j.find("error");
    if ((residuals == j.end()) == (error == j.end()))
        throw malformed("response must carry exactly one of residuals or error");

    if (error != j.end()) {
        if (!error->is_string())
            throw malformed("error field is not a string");
        resp.error = error->get<std::string>();
        return resp;
    }

    if (!residuals->is_array())
        throw malformed("residuals field is not an array");
    Vector r(static_cast<Eigen::Index>(residuals->size()));
    for (std::size_t i = 0; i < residuals->size(); ++i) {
        const json& e = (*residuals)[i];
        // Non-finite doubles are serialized as null.
        if (e.is_null())
            throw EvaluatorFailure(FailureKind::NonFinite, "residual " + std::to_string(i) + " is null");
        if (!e.is_number())
            throw malformed("residual " + std::to_string(i) + " is not a number");
        r[static_cast<Eigen::Index>(i)] = e.get<double>();
        if (!std::isfinite(r[static_cast<Eigen::Index>(i)]))
            throw EvaluatorFailure(FailureKind::NonFinite, "residual " + std::to_string(i) + " is not finite");
    }
    resp.residuals = std::move(r);
    return resp;
}

} // namespace qlm::protocol
