#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace nepa {

std::uint64_t splitmix64(std::uint64_t x);

/// Portable random source: std::mt19937_64 (stream fixed by the standard) with
/// distributions implemented here, since std:: distributions are
/// implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Counter-based construction: the stream is a pure function of the keys.
  static Rng keyed(std::uint64_t seed, std::uint64_t key0, std::uint64_t key1 = 0);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Normal(0, std) resampled until within +-2 std.
  double truncated_normal(double std);
  double gamma(double shape);
  double beta(double a, double b);

  std::string state() const;
  void set_state(const std::string& text);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace nepa
