#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <mutex>
#include <thread>

#include "calm/error.hpp"

namespace calm {

/// Token bucket refilled at `per_minute / 60` tokens per second, holding at
/// most `burst` tokens. `acquire()` blocks until a token is available.
class TokenBucket {
public:
    using Clock = std::chrono::steady_clock;
    using NowFn = std::function<Clock::time_point()>;
    using SleepFn = std::function<void(Clock::duration)>;

    explicit TokenBucket(double per_minute, double burst = 1.0,
                         NowFn now = [] { return Clock::now(); },
                         SleepFn sleep = [](Clock::duration d) { std::this_thread::sleep_for(d); })
        : rate_per_sec_(per_minute / 60.0),
          burst_(burst),
          tokens_(burst),
          now_(std::move(now)),
          sleep_(std::move(sleep)) {
        if (!(per_minute > 0.0) || !(burst >= 1.0))
            throw Error(ErrorKind::InvalidArgument,
                        "rate limit needs requests_per_minute > 0 and burst >= 1",
                        "requests_per_minute");
        last_ = now_();
    }

    void acquire() {
        for (;;) {
            Clock::duration wait{};
            {
                std::lock_guard lock(mu_);
                refill();
                if (tokens_ >= 1.0) {
                    tokens_ -= 1.0;
                    return;
                }
                wait = std::chrono::duration_cast<Clock::duration>(
                    std::chrono::duration<double>((1.0 - tokens_) / rate_per_sec_));
            }
            sleep_(std::max(wait, Clock::duration(1)));
        }
    }

    bool try_acquire() {
        std::lock_guard lock(mu_);
        refill();
        if (tokens_ < 1.0) return false;
        tokens_ -= 1.0;
        return true;
    }

private:
    void refill() {
        auto now = now_();
        double elapsed = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        tokens_ = std::min(burst_, tokens_ + elapsed * rate_per_sec_);
    }

    double rate_per_sec_;
    double burst_;
    double tokens_;
    NowFn now_;
    SleepFn sleep_;
    Clock::time_point last_;
    std::mutex mu_;
};

} // namespace calm
