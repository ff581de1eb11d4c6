#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace dafedit {

// Deterministic RNG wrapper. All distribution math is done here rather than
// through std:: distributions, whose output is implementation-defined; this
// keeps artifacts byte-reproducible for a given seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    const double u = double(engine_() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

  // Box-Muller; draws two uniforms per call.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Inclusive bounds.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(engine_() % span);
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = int(uniform_int(0, i));
      std::swap(p[i], p[j]);
    }
    return p;
  }

  // Sample k distinct indices from 0..n-1, order randomized.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> p = permutation(n);
    p.resize(k < n ? k : n);
    return p;
  }

  std::string state_string() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

  // Derive an independent stream, e.g. per pipeline stage.
  Rng fork(uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ULL));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dafedit
