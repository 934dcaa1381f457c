#pragma once

#include <cstdint>
#include <cmath>
#include <vector>
#include <random>

namespace osf {

// Deterministic RNG. mt19937_64 for the stream, but all distributions are
// implemented here so that draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed), seed_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t index(uint64_t n) {
    // rejection sampling to avoid modulo bias
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do { x = eng_(); } while (x >= limit);
    return x % n;
  }

  int integer(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(index(static_cast<uint64_t>(hi - lo + 1)));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do { u1 = uniform(); } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), order not meaningful
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    shuffle(pool);
    pool.resize(k);
    return pool;
  }

  // Independent substream, e.g. one per patient-night. Mixes the stream id
  // through splitmix64 so nearby ids do not correlate.
  Rng fork(uint64_t stream_id) const {
    uint64_t z = seed_ ^ (stream_id + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::mt19937_64 eng_;
  uint64_t seed_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace osf
