#pragma once

// Shared utilities: error types, log-space arithmetic, deterministic RNG,
// text I/O and a minimal thread pool helper.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace clm {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto distinct exit codes.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed values, shape mismatches, violated preconditions.
struct value_error : error {
  using error::error;
};

// Missing or unreadable files, malformed serialized data.
struct io_error : error {
  using error::error;
};

// Bad run configuration (flags, config files, incompatible artifacts).
struct config_error : error {
  using error::error;
};

// Non-finite values where the math guarantees finite ones.
struct numeric_error : error {
  using error::error;
};

// ---------------------------------------------------------------------------
// Log-space arithmetic
// ---------------------------------------------------------------------------

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

// log(exp(a) + exp(b)), safe for -inf operands.
inline double log_add(double a, double b) {
  if (a == neg_inf) return b;
  if (b == neg_inf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = neg_inf;
  for (double x : xs) m = std::max(m, x);
  if (m == neg_inf) return neg_inf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

// ---------------------------------------------------------------------------
// Deterministic randomness. mt19937_64 output is specified by the standard,
// but the std distributions are not; we map raw bits ourselves so identical
// seeds give identical draws on every platform.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives independent sub-seeds, e.g. per (run, sentence) or (seed, epoch).
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x51ed2701a2b5f6c3ULL));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double next_double() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double next_double(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw value_error("next_below: empty range");
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// Text I/O
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_text_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open file for writing: " + path);
  out << content;
  if (!out) throw io_error("write failed: " + path);
}

inline std::vector<std::string> split_whitespace(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(std::move(tok));
  return out;
}

// Shortest decimal form that round-trips the exact double.
inline std::string format_double(double x) {
  if (x == 0.0) return "0";  // collapse negative zero
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  double back = std::strtod(buf, nullptr);
  if (back == x) {
    for (int prec = 1; prec < 17; ++prec) {
      char tmp[64];
      std::snprintf(tmp, sizeof(tmp), "%.*g", prec, x);
      if (std::strtod(tmp, nullptr) == x) return std::string(tmp);
    }
  }
  return std::string(buf);
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw io_error("malformed number: '" + s + "'");
  return v;
}

inline int64_t parse_int(const std::string& s) {
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0') throw io_error("malformed integer: '" + s + "'");
  return v;
}

inline uint64_t parse_uint64(const std::string& s) {
  char* end = nullptr;
  unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0') throw io_error("malformed integer: '" + s + "'");
  return v;
}

// FNV-1a, used to bind models to the vocabulary they were trained with.
inline uint64_t fnv1a(std::span<const char> bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Parallelism: static partition of [0, total) over `workers` threads.
// Callers own determinism: results must be reduced in index order.
// ---------------------------------------------------------------------------

template <typename Fn>
void parallel_for(std::size_t total, int workers, Fn&& fn) {
  if (workers <= 1 || total <= 1) {
    fn(std::size_t{0}, total);
    return;
  }
  const std::size_t k = std::min<std::size_t>(workers, total);
  std::vector<std::thread> pool;
  pool.reserve(k);
  const std::size_t chunk = (total + k - 1) / k;
  for (std::size_t w = 0; w < k; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(total, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace clm
