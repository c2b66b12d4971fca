#include "qlm/external.hpp"

#include "qlm/protocol.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

namespace qlm {

void ExternalEvaluatorSpec::validate() const {
    if (command.empty() || command.front().empty())
        throw ConfigError("command", "external evaluator command is empty");
    if (!(timeout.count() > 0))
        throw ConfigError("timeout", "timeout must be positive");
    if (protocol_version != 1)
        throw ConfigError("protocol_version", "only protocol version 1 is supported");
}

ExternalEvaluator::ExternalEvaluator(ExternalEvaluatorSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
}

ExternalEvaluator::~ExternalEvaluator() {
    if (pid_ <= 0)
        return;
    // Closing stdin asks a well-behaved child to exit; give it a moment before killing.
    if (to_child_ >= 0) {
        ::close(to_child_);
        to_child_ = -1;
    }
    for (int i = 0; i < 100; ++i) {
        if (::waitpid(pid_, nullptr, WNOHANG) == pid_) {
            pid_ = -1;
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    terminate();
}

void ExternalEvaluator::terminate() {
    if (to_child_ >= 0)
        ::close(to_child_);
    if (from_child_ >= 0)
        ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, nullptr, 0);
    }
    pid_ = -1;
}

void ExternalEvaluator::fail_hard(FailureKind kind, const std::string& what) {
    broken_ = true;
    terminate();
    throw EvaluatorFailure(kind, what);
}

void ExternalEvaluator::spawn() {
    // A dead child must surface as EPIPE on write, not as a fatal signal.
    std::signal(SIGPIPE, SIG_IGN);

    std::vector<std::string> args = spec_.command;
    std::vector<char*> argv;
    for (auto& a : args)
        argv.push_back(a.data());
    argv.push_back(nullptr);
    const std::string dir = spec_.working_dir.string();

    int in_pipe[2];
    int out_pipe[2];
    int err_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0)
        throw EvaluatorFailure(FailureKind::SpawnFailed, std::strerror(errno));
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
        const int e = errno;
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        throw EvaluatorFailure(FailureKind::SpawnFailed, std::strerror(e));
    }
    if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
        const int e = errno;
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]})
            ::close(fd);
        throw EvaluatorFailure(FailureKind::SpawnFailed, std::strerror(e));
    }

    const pid_t pid = ::fork();
    if (pid < 0) {
        const int e = errno;
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]})
            ::close(fd);
        throw EvaluatorFailure(FailureKind::SpawnFailed, std::strerror(e));
    }
    if (pid == 0) {
        // Child: async-signal-safe calls only. err_pipe reports exec failure; it closes on exec.
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        int e = 0;
        if (!dir.empty() && ::chdir(dir.c_str()) != 0)
            e = errno;
        else {
            ::execvp(argv[0], argv.data());
            e = errno;
        }
        [[maybe_unused]] auto n = ::write(err_pipe[1], &e, sizeof e);
        ::_exit(127);
    }

    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];

    int child_errno = 0;
    ssize_t got;
    do {
        got = ::read(err_pipe[0], &child_errno, sizeof child_errno);
    } while (got < 0 && errno == EINTR);
    ::close(err_pipe[0]);
    if (got == static_cast<ssize_t>(sizeof child_errno)) {
        fail_hard(FailureKind::SpawnFailed,
                  "cannot start '" + spec_.command.front() + "': " + std::strerror(child_errno));
    }
}

std::string ExternalEvaluator::read_line() {
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + std::chrono::duration_cast<clock::duration>(spec_.timeout);
    for (;;) {
        if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r')
                line.pop_back();
            return line;
        }
        const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now());
        if (remaining.count() <= 0)
            fail_hard(FailureKind::Timeout, "no response within " + std::to_string(spec_.timeout.count()) + " s");

        pollfd pfd{from_child_, POLLIN, 0};
        const int ready = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(remaining.count() + 1, 1 << 30)));
        if (ready < 0) {
            if (errno == EINTR)
                continue;
            fail_hard(FailureKind::ProcessDied, std::string("poll failed: ") + std::strerror(errno));
        }
        if (ready == 0)
            continue;

        char chunk[4096];
        const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN)
                continue;
            fail_hard(FailureKind::ProcessDied, std::string("read failed: ") + std::strerror(errno));
        }
        if (n == 0)
            fail_hard(FailureKind::ProcessDied, "child closed its output before responding");
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

Vector ExternalEvaluator::operator()(const Vector& beta) {
    if (broken_)
        throw EvaluatorFailure(FailureKind::ProcessDied, "external evaluator unusable after an earlier failure");
    if (pid_ <= 0)
        spawn();

    const std::int64_t id = next_id_++;
    std::string line = protocol::encode_request(id, beta);
    line.push_back('\n');
    std::size_t written = 0;
    while (written < line.size()) {
        const ssize_t n = ::write(to_child_, line.data() + written, line.size() - written);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            fail_hard(FailureKind::ProcessDied, std::string("cannot write request: ") + std::strerror(errno));
        }
        written += static_cast<std::size_t>(n);
    }

    const std::string reply = read_line();
    protocol::Response resp;
    try {
        resp = protocol::decode_response(reply);
    } catch (const EvaluatorFailure& e) {
        if (e.kind() == FailureKind::MalformedResponse)
            fail_hard(e.kind(), e.what());
        throw;
    }
    if (resp.id != id)
        fail_hard(FailureKind::IdMismatch,
                  "response id " + std::to_string(resp.id) + " does not echo request id " + std::to_string(id));
    if (!resp.residuals)
        throw EvaluatorFailure(FailureKind::ModelError, resp.error);

    const Eigen::Index m = resp.residuals->size();
    if (residual_count_ < 0)
        residual_count_ = m;
    else if (m != residual_count_)
        throw EvaluatorFailure(FailureKind::LengthChanged, "residual length changed from " +
                                                               std::to_string(residual_count_) + " to " +
                                                               std::to_string(m));
    return std::move(*resp.residuals);
}

ResidualFunction<double> ExternalEvaluator::function() {
    return [this](const Vector& beta) { return (*this)(beta); };
}

} // namespace qlm
