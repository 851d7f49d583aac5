#include "reffil/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace reffil {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

namespace {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

uint64_t derive_seed(uint64_t root, std::string_view stream) {
  return splitmix64(splitmix64(root) ^ fnv1a64(stream));
}

uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a) {
  return splitmix64(derive_seed(root, stream) ^ splitmix64(a + 0x517CC1B727220A95ull));
}

uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a, uint64_t b) {
  return splitmix64(derive_seed(root, stream, a) ^ splitmix64(b + 0x2545F4914F6CDD1Dull));
}

uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a, uint64_t b,
                     uint64_t c) {
  return splitmix64(derive_seed(root, stream, a, b) ^ splitmix64(c + 0x9E3779B97F4A7C15ull));
}

double Rng::uniform() {
  // 53-bit mantissa draw.
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::uniform_pos() {
  double u;
  do {
    u = uniform();
  } while (u <= 0.0);
  return u;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform_pos();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be positive");
  if (shape < 1.0) {
    // Boost to shape+1 and scale back.
    double g = gamma(shape + 1.0);
    double u = uniform_pos();
    return g * std::pow(u, 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze method.
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    double u = uniform_pos();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("below(0) is undefined");
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = eng_();
  } while (x >= limit);
  return x % n;
}

std::vector<double> Rng::dirichlet(double alpha, std::size_t k) {
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet alpha must be positive");
  std::vector<double> w(k);
  double total = 0.0;
  for (auto& wi : w) {
    wi = gamma(alpha);
    total += wi;
  }
  if (total <= 0.0) {
    // All gammas underflowed; fall back to uniform weights.
    for (auto& wi : w) wi = 1.0 / static_cast<double>(k);
    return w;
  }
  for (auto& wi : w) wi /= total;
  return w;
}

}  // namespace reffil
