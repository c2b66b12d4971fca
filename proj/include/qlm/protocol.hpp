#pragma once

// Line protocol (version 1) spoken between the solver and an external residual evaluator.
// One JSON object per line:
//
//   request   {"v":1,"id":<integer>,"params":[<real>...]}
//   response  {"v":1,"id":<integer>,"residuals":[<real>...]}
//             {"v":1,"id":<integer>,"error":"<message>"}
//
// Reals are written in shortest round-trip form, so values survive the text hop bit for bit.

#include "qlm/types.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qlm::protocol {

inline constexpr int kVersion = 1;

struct Request {
    std::int64_t id = 0;
    Vector params;
};

struct Response {
    std::int64_t id = 0;
    std::optional<Vector> residuals;
    std::string error;
};

/// A request line the server could not accept. `id` is -1 when it could not be recovered.
class RequestError : public std::runtime_error {
public:
    RequestError(std::int64_t id, const std::string& what) : std::runtime_error(what), id_(id) {}
    std::int64_t id() const noexcept { return id_; }

private:
    std::int64_t id_;
};

/// Encoders return a single line without the trailing newline.
std::string encode_request(std::int64_t id, const Vector& params);
std::string encode_residuals(std::int64_t id, const Vector& residuals);
std::string encode_error(std::int64_t id, std::string_view message);

/// Throws RequestError.
Request decode_request(std::string_view line);

/// Throws EvaluatorFailure (MalformedResponse or NonFinite).
Response decode_response(std::string_view line);

} // namespace qlm::protocol
