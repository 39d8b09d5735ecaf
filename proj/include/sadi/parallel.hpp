#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace sadi {

// Fixed-size pool running index-parallel loops. Work items must be
// independent; callers that need deterministic results write into
// per-index slots and reduce in index order afterwards, so the outcome
// never depends on the worker count or scheduling.
//
// Index claims are mutex-guarded: items are coarse (a forward/backward pass,
// a sampling chain), so lock traffic is negligible and a worker can never
// claim an index belonging to a later loop.
class ThreadPool {
 public:
  explicit ThreadPool(int workers = 0) {
    int n = workers > 0 ? workers : int(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    size_ = n;
    // n-1 helper threads; the calling thread participates in every loop.
    for (int i = 0; i < n - 1; ++i)
      threads_.emplace_back([this] { worker_loop(); });
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return size_; }

  void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    if (size_ == 1 || n == 1) {
      for (size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    uint64_t gen;
    {
      std::unique_lock<std::mutex> lk(mu_);
      fn_ = &fn;
      total_ = n;
      claimed_ = 0;
      pending_ = n;
      gen = ++generation_;
    }
    cv_.notify_all();
    drain(gen);
    {
      std::unique_lock<std::mutex> lk(mu_);
      done_cv_.wait(lk, [this] { return pending_ == 0; });
      fn_ = nullptr;
    }
  }

 private:
  // Runs items of generation `gen` until none are left. Claims and
  // completions share one mutex, so a stale worker can never touch a later
  // generation's indices or its (by then destroyed) function object.
  void drain(uint64_t gen) {
    while (true) {
      size_t i;
      const std::function<void(size_t)>* fn;
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (generation_ != gen || fn_ == nullptr || claimed_ >= total_) return;
        i = claimed_++;
        fn = fn_;
      }
      (*fn)(i);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  void worker_loop() {
    uint64_t seen = 0;
    while (true) {
      uint64_t gen;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this, seen] { return stop_ || generation_ != seen; });
        if (stop_) return;
        gen = seen = generation_;
      }
      drain(gen);
    }
  }

  int size_ = 1;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(size_t)>* fn_ = nullptr;
  size_t total_ = 0;
  size_t claimed_ = 0;
  size_t pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace sadi
