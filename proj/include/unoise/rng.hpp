#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace unoise {

// Counter-based pseudo-random stream. The draw at position i depends only on
// (seed, i), so a stream can be reconstructed, split, or replayed from its
// two fields. Integer output is platform-independent; the normal transform
// goes through libm (sqrt/log/cos) and is bit-stable per build, not across
// C libraries.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    return mix64(seed_ ^ (0x9E3779B97F4A7C15ULL * (++counter_)));
  }

  // [0, 1)
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // (0, 1]
  double next_uniform_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Uniform on [-bound, bound).
  double next_uniform_sym(double bound) {
    return (2.0 * next_uniform() - 1.0) * bound;
  }

  // [0, bound)
  int next_int(int bound) {
    return static_cast<int>(next_uniform() * bound);
  }

  // Box-Muller pair of independent standard normals; consumes two draws.
  std::pair<double, double> next_normal_pair() {
    double u1 = next_uniform_pos();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

  // Single normal draw. Always consumes a full pair so the counter advances
  // the same amount regardless of call pattern.
  double next_normal() { return next_normal_pair().first; }

  // Statistically independent substream for a worker / sample index.
  RngStream derive(std::uint64_t index) const {
    return RngStream(mix64(seed_ ^ mix64(0xA0761D6478BD642FULL + index)), 0);
  }

  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 33;
    z *= 0xFF51AFD7ED558CCDULL;
    z ^= z >> 33;
    z *= 0xC4CEB9FE1A85EC53ULL;
    z ^= z >> 33;
    return z;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace unoise
