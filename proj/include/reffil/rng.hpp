#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace reffil {

/// Finalizer used to derive stream seeds from the single root seed.
uint64_t splitmix64(uint64_t x);

/// Derives the seed of a named sub-stream. Every source of randomness in a
/// run is a named stream of the root seed; no ambient entropy anywhere.
uint64_t derive_seed(uint64_t root, std::string_view stream);
uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a);
uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a, uint64_t b);
uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a, uint64_t b,
                     uint64_t c);

/// Deterministic random draws on top of mt19937_64. The draw algorithms are
/// pinned here (Box-Muller, Marsaglia-Tsang, rejection-sampled integers) so
/// sequences do not depend on the standard library's unspecified
/// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  /// Uniform double in [0, 1).
  double uniform();

  /// Uniform double in (0, 1), never exactly zero.
  double uniform_pos();

  /// Standard normal deviate.
  double normal();

  /// Gamma(shape, 1) deviate, shape > 0.
  double gamma(double shape);

  /// Uniform integer in [0, n), n >= 1. Rejection sampled, unbiased.
  uint64_t below(uint64_t n);

  /// Dirichlet draw with symmetric concentration alpha over k components.
  std::vector<double> dirichlet(double alpha, std::size_t k);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  /// Sample `count` distinct elements of `pool`, order of draw.
  template <typename T>
  std::vector<T> sample_without_replacement(std::vector<T> pool, std::size_t count) {
    std::vector<T> picked;
    picked.reserve(count);
    for (std::size_t i = 0; i < count && !pool.empty(); ++i) {
      std::size_t j = static_cast<std::size_t>(below(pool.size()));
      picked.push_back(pool[j]);
      pool[j] = pool.back();
      pool.pop_back();
    }
    return picked;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace reffil
