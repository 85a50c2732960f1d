#pragma once

// Shared error types, seeded randomness and hashing helpers.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sage {

enum class ErrorKind {
  kMalformedTrace,
  kIncompleteTrace,
  kLookup,
  kInvalidConfig,
  kPrecondition,
  kEmptyWindow,
  kInsufficientBaseline,
  kNumericFailure,
  kConsistency,
  kIo,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMalformedTrace: return "malformed-trace";
    case ErrorKind::kIncompleteTrace: return "incomplete-trace";
    case ErrorKind::kLookup: return "lookup";
    case ErrorKind::kInvalidConfig: return "invalid-config";
    case ErrorKind::kPrecondition: return "precondition";
    case ErrorKind::kEmptyWindow: return "empty-window";
    case ErrorKind::kInsufficientBaseline: return "insufficient-baseline";
    case ErrorKind::kNumericFailure: return "numeric-failure";
    case ErrorKind::kConsistency: return "consistency";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

/// Seeded random source. All stochastic code takes one of these by reference
/// so that a run is a pure function of its seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

  // Box-Muller without caching so the stream position depends only on the call count.
  double normal() {
    double u1 = uniform();
    while (u1 <= std::numeric_limits<double>::min()) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  std::uint64_t next() { return engine_(); }

  /// Independent child stream; used to give parallelizable probes their own seeds.
  Rng fork(std::uint64_t salt) { return Rng(engine_() ^ (salt * 0x9E3779B97F4A7C15ULL)); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a, 64 bit.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update(s.data(), s.size());
    const unsigned char sep = 0xff;
    update(&sep, 1);
  }
  void update(double v) { update(&v, sizeof v); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

}  // namespace sage
