#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sopo {

using Vec = std::vector<double>;

inline constexpr double kPi = 3.14159265358979323846;

// -------------------------------------------------------------------------
// Seeding and random streams.
//
// All randomness flows through explicit seeds; there is no hidden global
// state. splitmix64 doubles as the stream generator and the seed mixer, so
// identical (seed, call sequence) pairs produce bit-identical output on
// every platform.

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
  return splitmix64_next(s);
}

// Derives an independent stream id from a master seed and up to three tags
// (e.g. condition id, iteration, purpose).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag0,
                                 std::uint64_t tag1 = 0, std::uint64_t tag2 = 0) {
  return mix_seed(mix_seed(mix_seed(master, tag0), tag1), tag2);
}

class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (no cached state)
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    int v = static_cast<int>(uniform() * static_cast<double>(n));
    return v < n ? v : n - 1;
  }

 private:
  std::uint64_t state_;
};

// -------------------------------------------------------------------------
// Numerics.

// Neumaier-compensated accumulator; reductions built on it are insensitive
// to summation order well below 1e-12 at the problem sizes used here.
class KahanSum {
 public:
  void add(double v) {
    double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// log(1 + e^x), overflow-safe
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid(double x) { return -softplus(-x); }

// -log sigma(x); strictly positive and finite for finite x
inline double neg_log_sigmoid(double x) { return softplus(-x); }

inline double logsumexp(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("logsumexp: empty input");
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  KahanSum s;
  for (double x : xs) s.add(std::exp(x - m));
  return m + std::log(s.value());
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  KahanSum s;
  for (std::size_t i = 0; i < a.size(); ++i) s.add(a[i] * b[i]);
  return s.value();
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// -------------------------------------------------------------------------
// Exhaustive tuple iteration.
//
// Visits every ordered K-tuple (with repetition) over {0, ..., vocab-1}.
// The tuple count vocab^K is capped so exact-expectation oracles stay fast.

inline constexpr double kMaxTupleCount = 1e6;

template <typename Fn>
void for_each_tuple(int vocab, int k, Fn&& fn) {
  if (vocab < 1 || k < 1) throw std::invalid_argument("for_each_tuple: vocab and k must be >= 1");
  if (std::pow(static_cast<double>(vocab), static_cast<double>(k)) > kMaxTupleCount)
    throw std::invalid_argument("for_each_tuple: vocab^k exceeds enumeration cap");
  std::vector<int> idx(static_cast<std::size_t>(k), 0);
  while (true) {
    fn(static_cast<const std::vector<int>&>(idx));
    int pos = k - 1;
    while (pos >= 0) {
      if (++idx[static_cast<std::size_t>(pos)] < vocab) break;
      idx[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
}

// -------------------------------------------------------------------------
// Deterministic text formatting for result files.

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return std::string(buf);
}

}  // namespace sopo
