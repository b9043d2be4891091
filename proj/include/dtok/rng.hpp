#ifndef DTOK_RNG_HPP
#define DTOK_RNG_HPP

#include <cstdint>

namespace dtok {

// splitmix64. One PRNG for the whole repo so every platform replays the same
// stream bit for bit.
//
// Derivations from the raw u64 stream:
//  - u01(): top 53 bits scaled by 2^-53, uniform in [0,1)
//  - below(n): next() % n (modulo; bias is irrelevant at the tiny n used here)
//  - uniform(lo,hi): lo + u01()*(hi-lo)
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double u01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  uint64_t below(uint64_t n) { return next() % n; }

  double uniform(double lo, double hi) { return lo + u01() * (hi - lo); }

  // Deterministic derived seed, used when a generator has to reseed itself.
  static uint64_t mix(uint64_t seed) {
    Rng r(seed ^ 0xD1B54A32D192ED03ULL);
    return r.next();
  }

 private:
  uint64_t state_;
};

}  // namespace dtok

#endif  // DTOK_RNG_HPP
