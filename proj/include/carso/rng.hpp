#pragma once

#include <cmath>
#include <cstdint>

namespace carso {

// Splittable counter-based generator. Output depends only on (seed, stream,
// counter), so streams can be derived per worker / per sample and replayed
// exactly regardless of evaluation order or thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  Rng derive(std::uint64_t substream) const {
    return Rng(mix_(seed_ ^ 0x9e3779b97f4a7c15ULL, substream ^ stream_), 0);
  }

  std::uint64_t next_u64() {
    return mix_(seed_ ^ mix_(stream_, 0x2545f4914f6cdd1dULL), counter_++);
  }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller; one draw per call, cache the pair
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) {
    counter_ = c;
    have_spare_ = false;
  }

 private:
  // splitmix64-style bijective mix of (key, counter)
  static std::uint64_t mix_(std::uint64_t key, std::uint64_t ctr) {
    std::uint64_t z = key + 0x9e3779b97f4a7c15ULL * (ctr + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace carso
