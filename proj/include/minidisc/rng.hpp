#pragma once

// Deterministic random source. std::mt19937_64 is bit-specified by the
// standard; the distributions are not, so the transforms (uniform, normal,
// bounded int, shuffle) are implemented here to keep runs reproducible
// across standard libraries.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace minidisc {

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), eng_(mix(seed)) {}

  uint64_t u64() { return eng_(); }

  // in [0, 1)
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with cached spare.
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1 = 1.0 - uniform();  // avoid log(0)
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mu + sigma * r * std::cos(a);
  }

  // in [0, n)
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    uint64_t threshold = (0 - n) % n;  // rejection sampling, unbiased
    for (;;) {
      uint64_t r = u64();
      if (r >= threshold) return r % n;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // k distinct indices from [0, n), order random.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    for (size_t i = 0; i < k; ++i) {  // partial Fisher-Yates
      size_t j = i + static_cast<size_t>(below(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  // Independent child stream; deterministic in (parent seed, id).
  Rng child(uint64_t id) const {
    return Rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (id + 1)));
  }

  uint64_t seed() const { return seed_; }

 private:
  static uint64_t mix(uint64_t x) {
    uint64_t z = x + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_ = 0;
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace minidisc
