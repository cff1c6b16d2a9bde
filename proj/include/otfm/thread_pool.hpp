// Fork-join worker pool. Tasks are indexed; callers that reduce over task
// results must combine them in index order so results do not depend on the
// number of workers.
#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace otfm {

class ThreadPool {
 public:
  explicit ThreadPool(unsigned workers) {
    if (workers < 1) workers = 1;
    // worker 0 is the calling thread
    for (unsigned i = 1; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  unsigned size() const { return static_cast<unsigned>(threads_.size()) + 1; }

  // Runs task(i) for i in [0, n_tasks), blocking until every task finished.
  // The first exception thrown by a task is rethrown here.
  void run(std::size_t n_tasks, const std::function<void(std::size_t)>& task) {
    if (n_tasks == 0) return;
    if (threads_.empty() || n_tasks == 1) {
      for (std::size_t i = 0; i < n_tasks; ++i) task(i);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      task_ = &task;
      n_tasks_ = n_tasks;
      next_.store(0, std::memory_order_relaxed);
      pending_.store(static_cast<long>(n_tasks), std::memory_order_relaxed);
      error_ = nullptr;
      ++generation_;
    }
    cv_.notify_all();
    drain(&task, n_tasks);  // participate
    {
      std::unique_lock<std::mutex> lk(mu_);
      done_cv_.wait(lk, [this] { return pending_.load(std::memory_order_acquire) == 0; });
      task_ = nullptr;
      if (error_) std::rethrow_exception(error_);
    }
  }

  // Worker count from OTFM_THREADS if set, otherwise the hardware count.
  static unsigned default_workers() {
    if (const char* env = std::getenv("OTFM_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
  }

  static ThreadPool& global() {
    static ThreadPool pool(default_workers());
    return pool;
  }

 private:
  void drain(const std::function<void(std::size_t)>* task, std::size_t n) {
    for (;;) {
      std::size_t i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= n) break;
      try {
        (*task)(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!error_) error_ = std::current_exception();
      }
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* task = nullptr;
      std::size_t n = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        task = task_;
        n = n_tasks_;
      }
      if (task) drain(task, n);
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::size_t n_tasks_ = 0;
  std::atomic<std::size_t> next_{0};
  std::atomic<long> pending_{0};
  std::exception_ptr error_;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

// Splits [0, total) into fixed-size chunks and runs fn(chunk_index, begin,
// end) on the pool. Chunk boundaries depend only on chunk_size, never on the
// worker count.
template <class Fn>
inline void parallel_chunks(ThreadPool& pool, std::size_t total, std::size_t chunk_size, Fn&& fn) {
  if (total == 0) return;
  if (chunk_size == 0) chunk_size = total;
  std::size_t n_chunks = (total + chunk_size - 1) / chunk_size;
  pool.run(n_chunks, [&](std::size_t c) {
    std::size_t b = c * chunk_size;
    std::size_t e = b + chunk_size < total ? b + chunk_size : total;
    fn(c, b, e);
  });
}

}  // namespace otfm
