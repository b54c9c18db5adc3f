#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace dt {

// Deterministic splitmix64 stream. One 64-bit word of state makes
// checkpointing trivial and the sequence identical across platforms,
// which the standard-library distributions do not guarantee.
class Rng {
 public:
  Rng() : state_(0x9e3779b97f4a7c15ULL) {}
  explicit Rng(uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ULL) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // size_t in [0, n)
  uint64_t uniform_index(uint64_t n) { return n ? next_u64() % n : 0; }

  // Box-Muller; draws two uniforms per call and keeps the cosine branch
  // so the stream stays a pure function of the call count.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Derive an independent stream for a named purpose; stable w.r.t. the
  // label so adding streams never perturbs existing ones.
  Rng fork(const std::string& label) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) h = (h ^ c) * 0x100000001b3ULL;
    Rng r;
    r.state_ = state_ ^ h;
    return r;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

 private:
  uint64_t state_;
};

}  // namespace dt
