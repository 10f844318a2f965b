#pragma once

// Orchestrator side of the runner wire protocol: a long-lived runner
// process fed one JSON request per line on stdin, answering one JSON
// response per line on stdout. POSIX only.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "calm/sandbox.hpp"

namespace calm {

class ProcessRunner final : public Runner {
public:
    /// `command` is run through /bin/sh -c.
    explicit ProcessRunner(std::string command) : command_(std::move(command)) {
        static const bool sigpipe_ignored = [] {
            ::signal(SIGPIPE, SIG_IGN);
            return true;
        }();
        (void)sigpipe_ignored;
    }

    ProcessRunner(const ProcessRunner&) = delete;
    ProcessRunner& operator=(const ProcessRunner&) = delete;

    ~ProcessRunner() override { shutdown(false); }

    SandboxResult run(const RunnerRequest& request) override {
        using Clock = std::chrono::steady_clock;
        if (pid_ <= 0) spawn();
        auto line = encode_request(request);
        if (!write_all(line)) {
            shutdown(true);
            throw Error(ErrorKind::RunnerUnavailable, "runner closed its input", command_);
        }
        auto start = Clock::now();
        auto deadline = start + std::chrono::duration_cast<Clock::duration>(
                                    std::chrono::duration<double>(request.wall_time_seconds)) +
                        kSupervisionGrace;
        for (;;) {
            auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string response = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return decode_response(response);
            }
            auto now = Clock::now();
            if (now >= deadline) {
                shutdown(true);
                SandboxResult r;
                r.exit = ExitKind::Timeout;
                r.wall_time_used = std::chrono::duration<double>(Clock::now() - start).count();
                return r;
            }
            auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1;
            pollfd pfd{out_fd_, POLLIN, 0};
            int rc = ::poll(&pfd, 1, static_cast<int>(wait_ms));
            if (rc < 0 && errno == EINTR) continue;
            if (rc < 0) {
                shutdown(true);
                throw Error(ErrorKind::RunnerUnavailable, "poll failed", command_);
            }
            if (rc == 0) continue;
            char chunk[4096];
            auto n = ::read(out_fd_, chunk, sizeof chunk);
            if (n < 0 && (errno == EINTR || errno == EAGAIN)) continue;
            if (n <= 0) {
                shutdown(true);
                throw Error(ErrorKind::RunnerUnavailable, "runner exited", command_);
            }
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    bool alive() const { return pid_ > 0; }

private:
    void spawn() {
        int in_pipe[2];
        int out_pipe[2];
        if (::pipe(in_pipe) != 0) throw Error(ErrorKind::RunnerUnavailable, "pipe failed", command_);
        if (::pipe(out_pipe) != 0) {
            ::close(in_pipe[0]);
            ::close(in_pipe[1]);
            throw Error(ErrorKind::RunnerUnavailable, "pipe failed", command_);
        }
        pid_t pid = ::fork();
        if (pid < 0) {
            for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
            throw Error(ErrorKind::RunnerUnavailable, "fork failed", command_);
        }
        if (pid == 0) {
            ::dup2(in_pipe[0], STDIN_FILENO);
            ::dup2(out_pipe[1], STDOUT_FILENO);
            for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
            ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
            ::_exit(127);
        }
        ::close(in_pipe[0]);
        ::close(out_pipe[1]);
        ::fcntl(in_pipe[1], F_SETFD, FD_CLOEXEC);
        ::fcntl(out_pipe[0], F_SETFD, FD_CLOEXEC);
        pid_ = pid;
        in_fd_ = in_pipe[1];
        out_fd_ = out_pipe[0];
        buffer_.clear();
    }

    bool write_all(std::string_view data) {
        while (!data.empty()) {
            auto n = ::write(in_fd_, data.data(), data.size());
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) return false;
            data.remove_prefix(static_cast<std::size_t>(n));
        }
        return true;
    }

    void shutdown(bool kill_now) {
        if (in_fd_ >= 0) ::close(in_fd_);
        if (out_fd_ >= 0) ::close(out_fd_);
        in_fd_ = out_fd_ = -1;
        if (pid_ > 0) {
            if (kill_now) ::kill(pid_, SIGKILL);
            int status = 0;
            // Closing stdin asks a well-behaved runner to exit; give it a moment.
            for (int i = 0; i < 50 && !kill_now; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) == pid_) {
                    pid_ = -1;
                    return;
                }
                ::usleep(10000);
            }
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
        }
        pid_ = -1;
        buffer_.clear();
    }

    std::string command_;
    pid_t pid_ = -1;
    int in_fd_ = -1;
    int out_fd_ = -1;
    std::string buffer_;
};

/// Bounded pool of runners shared by concurrent flows. Each `run` borrows
/// one idle runner for the duration of the request.
class RunnerPool final : public Runner {
public:
    using Factory = std::function<std::unique_ptr<Runner>()>;

    RunnerPool(Factory factory, std::size_t size) : factory_(std::move(factory)), size_(size) {
        if (size_ == 0) throw Error(ErrorKind::InvalidArgument, "pool size must be >= 1", "workers");
    }

    static std::shared_ptr<RunnerPool> of_command(const std::string& command, std::size_t size) {
        return std::make_shared<RunnerPool>(
            [command] { return std::make_unique<ProcessRunner>(command); }, size);
    }

    SandboxResult run(const RunnerRequest& request) override {
        std::unique_ptr<Runner> runner;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return !idle_.empty() || created_ < size_; });
            if (!idle_.empty()) {
                runner = std::move(idle_.back());
                idle_.pop_back();
            } else {
                ++created_;
            }
        }
        if (!runner) {
            try {
                runner = factory_();
            } catch (...) {
                release(nullptr);
                throw;
            }
        }
        try {
            auto result = runner->run(request);
            release(std::move(runner));
            return result;
        } catch (...) {
            release(std::move(runner));
            throw;
        }
    }

private:
    void release(std::unique_ptr<Runner> runner) {
        {
            std::lock_guard lock(mu_);
            if (runner) idle_.push_back(std::move(runner));
            else --created_;
        }
        cv_.notify_one();
    }

    Factory factory_;
    std::size_t size_;
    std::size_t created_ = 0;
    std::vector<std::unique_ptr<Runner>> idle_;
    std::mutex mu_;
    std::condition_variable cv_;
};

} // namespace calm
