#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace longtail {

// Deterministic RNG for every seeded contract in the pipeline. The raw
// mt19937_64 stream is standard-defined; all derived draws (uniforms, normals,
// shuffles) are implemented here instead of through std distributions, whose
// internals vary across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // [0, n); n must be positive
  size_t uniform_index(size_t n) { return static_cast<size_t>(next_u64() % n); }

  // [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(uniform_index(static_cast<size_t>(hi - lo + 1)));
  }

  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace longtail
