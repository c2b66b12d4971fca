#pragma once

#include "qlm/types.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <sys/types.h>
#include <vector>

namespace qlm {

struct ExternalEvaluatorSpec {
    /// Program followed by its arguments; the program is looked up on PATH.
    std::vector<std::string> command;
    std::filesystem::path working_dir;
    std::chrono::duration<double> timeout{3600.0};
    int protocol_version = 1;

    void validate() const;
};

/// Residual evaluator backed by a persistent child process speaking the line protocol on its
/// standard input and output. The child is started on the first call and kept for the life of
/// the object; its standard error is inherited.
///
/// The residual length is learned from the first response and enforced afterwards. Failures
/// are reported as EvaluatorFailure. After a failure that desynchronizes the stream (timeout,
/// malformed or mismatched response, child exit) the child is killed and every later call
/// fails with ProcessDied.
class ExternalEvaluator {
public:
    explicit ExternalEvaluator(ExternalEvaluatorSpec spec);
    ~ExternalEvaluator();

    ExternalEvaluator(const ExternalEvaluator&) = delete;
    ExternalEvaluator& operator=(const ExternalEvaluator&) = delete;

    Vector operator()(const Vector& beta);

    /// Callable view for the solver; the evaluator must outlive it.
    ResidualFunction<double> function();

    const ExternalEvaluatorSpec& spec() const { return spec_; }

private:
    void spawn();
    void terminate();
    std::string read_line();
    [[noreturn]] void fail_hard(FailureKind kind, const std::string& what);

    ExternalEvaluatorSpec spec_;
    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    bool broken_ = false;
    std::string buffer_;
    std::int64_t next_id_ = 1;
    Eigen::Index residual_count_ = -1;
};

} // namespace qlm
