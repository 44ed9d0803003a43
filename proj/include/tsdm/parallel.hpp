#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace tsdm {

// Worker pool for data-parallel kernels. Every parallel region assigns each
// output element to exactly one chunk, and summations inside a chunk run in a
// fixed order, so results are bit-identical for any thread count.
// TSDM_THREADS overrides the pool size; TSDM_DETERMINISTIC=1 forces
// single-threaded execution (the results are the same either way).
inline int configured_threads() {
    static const int n = [] {
        if (const char* d = std::getenv("TSDM_DETERMINISTIC"); d && d[0] == '1') return 1;
        if (const char* e = std::getenv("TSDM_THREADS")) {
            const int v = std::atoi(e);
            if (v > 0) return v;
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc > 0 ? static_cast<int>(hc) : 1;
    }();
    return n;
}

// Set while a thread is executing pool chunks; nested parallel_for calls run
// inline instead of re-entering the pool.
inline bool& in_parallel_region() {
    thread_local bool flag = false;
    return flag;
}

class ThreadPool {
  public:
    static ThreadPool& instance() {
        static ThreadPool pool(configured_threads() - 1);
        return pool;
    }

    ~ThreadPool() {
        {
            std::lock_guard lk(m_);
            stop_ = true;
        }
        cv_task_.notify_all();
        for (auto& w : workers_) w.join();
    }

    // Runs fn(chunk) for chunk in [0, chunks); the calling thread participates.
    void run_chunks(int chunks, const std::function<void(int)>& fn) {
        if (chunks <= 0) return;
        if (workers_.empty() || chunks == 1) {
            for (int i = 0; i < chunks; ++i) fn(i);
            return;
        }
        {
            std::lock_guard lk(m_);
            fn_ = &fn;
            chunks_ = chunks;
            next_.store(0, std::memory_order_relaxed);
            active_ = static_cast<int>(workers_.size());
            ++epoch_;
        }
        cv_task_.notify_all();
        claim_loop(fn);
        std::unique_lock lk(m_);
        cv_done_.wait(lk, [&] { return active_ == 0; });
        fn_ = nullptr;
        if (error_) {
            auto e = error_;
            error_ = nullptr;
            std::rethrow_exception(e);
        }
    }

  private:
    explicit ThreadPool(int n_workers) {
        for (int i = 0; i < n_workers; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    void claim_loop(const std::function<void(int)>& fn) {
        in_parallel_region() = true;
        int i;
        while ((i = next_.fetch_add(1, std::memory_order_relaxed)) < chunks_) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lk(m_);
                if (!error_) error_ = std::current_exception();
                next_.store(chunks_, std::memory_order_relaxed);
            }
        }
        in_parallel_region() = false;
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* fn = nullptr;
            {
                std::unique_lock lk(m_);
                cv_task_.wait(lk, [&] { return stop_ || epoch_ != seen; });
                if (stop_) return;
                seen = epoch_;
                fn = fn_;
            }
            claim_loop(*fn);
            {
                std::lock_guard lk(m_);
                --active_;
            }
            cv_done_.notify_all();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex m_;
    std::condition_variable cv_task_, cv_done_;
    const std::function<void(int)>* fn_ = nullptr;
    int chunks_ = 0;
    std::atomic<int> next_{0};
    int active_ = 0;
    std::uint64_t epoch_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
};

/// Splits [0, n) into contiguous ranges and runs body(begin, end) on the
/// pool. Runs inline when already inside a pool worker or when n is tiny.
template <typename F>
void parallel_for(std::int64_t n, F&& body) {
    if (n <= 0) return;
    const int threads = configured_threads();
    if (threads <= 1 || n == 1 || in_parallel_region()) {
        body(std::int64_t{0}, n);
        return;
    }
    const int chunks = static_cast<int>(std::min<std::int64_t>(n, threads));
    const std::int64_t per = (n + chunks - 1) / chunks;
    ThreadPool::instance().run_chunks(chunks, [&](int c) {
        const std::int64_t b = c * per;
        const std::int64_t e = std::min<std::int64_t>(n, b + per);
        if (b < e) body(b, e);
    });
}

}  // namespace tsdm
