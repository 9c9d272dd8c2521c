#pragma once

#include <cstdint>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pavt {

// Error taxonomy, mapped to CLI exit codes: ConfigError -> 2, DataError -> 3,
// NumericError -> 4. Everything else is a plain bug (exit 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Small row-major matrix of doubles used for detached snapshots and metrics.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
  const double* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
  double* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
};

// Dense video clip, values in [0,1], index order (t, y, x, c).
struct VideoTensor {
  int tau = 0, H = 0, W = 0, C = 0;
  std::vector<double> v;

  VideoTensor() = default;
  VideoTensor(int tau_, int H_, int W_, int C_)
      : tau(tau_), H(H_), W(W_), C(C_),
        v(static_cast<size_t>(tau_) * H_ * W_ * C_, 0.0) {}

  size_t idx(int t, int y, int x, int c) const {
    return ((static_cast<size_t>(t) * H + y) * W + x) * C + c;
  }
  double& at(int t, int y, int x, int c) { return v[idx(t, y, x, c)]; }
  double at(int t, int y, int x, int c) const { return v[idx(t, y, x, c)]; }
};

// splitmix64; used to derive independent RNG streams from (seed, stream ids).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::mt19937_64 rng_stream(uint64_t seed, uint64_t a = 0, uint64_t b = 0,
                                  uint64_t c = 0) {
  uint64_t s = mix64(seed);
  s = mix64(s ^ mix64(a + 1));
  s = mix64(s ^ mix64(b + 2));
  s = mix64(s ^ mix64(c + 3));
  return std::mt19937_64(s);
}

// Deterministic parallel map: fn(i) for i in [0, n). Each index writes only its
// own outputs, so results do not depend on the thread schedule.
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = std::min(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr err;
  std::mutex err_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace pavt
