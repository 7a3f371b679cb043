#include "dmaudit/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace dmaudit {

namespace {

thread_local bool t_in_worker = false;

int resolve_worker_count() {
  if (const char* env = std::getenv("DMAUDIT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

class Pool {
 public:
  static Pool& instance() {
    // Intentionally leaked: workers park forever in wait(), so running the
    // destructor at exit would hang or race. The OS reclaims them.
    static Pool* pool = new Pool(resolve_worker_count());
    return *pool;
  }

  int workers() const { return total_; }

  void run(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (t_in_worker || total_ == 1 || n == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::unique_lock<std::mutex> jl(job_mutex_);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      fn_ = &fn;
      n_ = n;
      next_.store(0, std::memory_order_relaxed);
      error_ = nullptr;
      failed_.store(false, std::memory_order_relaxed);
      pending_ = total_ - 1;
      ++generation_;
    }
    cv_.notify_all();
    work();  // caller participates
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    fn_ = nullptr;
    if (error_) {
      std::exception_ptr e = error_;
      error_ = nullptr;
      lk.unlock();
      std::rethrow_exception(e);
    }
  }

 private:
  explicit Pool(int workers) : total_(workers) {
    for (int i = 0; i < total_ - 1; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
      threads_.back().detach();
    }
  }

  void worker_loop() {
    t_in_worker = true;
    std::size_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
      }
      work();
      {
        std::lock_guard<std::mutex> lk(mutex_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  void work() {
    const bool was = t_in_worker;
    t_in_worker = true;
    for (;;) {
      if (failed_.load(std::memory_order_relaxed)) break;
      const std::size_t i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= n_) break;
      try {
        (*fn_)(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mutex_);
        if (!error_) error_ = std::current_exception();
        failed_.store(true, std::memory_order_relaxed);
      }
    }
    t_in_worker = was;
  }

  const int total_;
  std::vector<std::thread> threads_;
  std::mutex mutex_, job_mutex_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(std::size_t)>* fn_ = nullptr;
  std::size_t n_ = 0;
  std::atomic<std::size_t> next_{0};
  std::atomic<bool> failed_{false};
  std::exception_ptr error_ = nullptr;
  int pending_ = 0;
  std::size_t generation_ = 0;
};

}  // namespace

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  Pool::instance().run(n, fn);
}

int worker_count() { return Pool::instance().workers(); }

}  // namespace dmaudit
