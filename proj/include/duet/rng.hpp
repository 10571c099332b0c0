#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace duet {

// All randomness in the project flows from a single 64-bit seed through
// named sub-streams, so that e.g. environment generation and training
// rollouts stay reproducible independently of each other.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), seed_hash_(seed) {}

  // Derives a child stream keyed by (this stream's seed, name, index).
  Rng fork(std::string_view name, uint64_t index = 0) const {
    uint64_t h = seed_hash_;
    h = mix(h, 0x9e3779b97f4a7c15ull);
    for (char c : name) h = mix(h, static_cast<uint64_t>(static_cast<unsigned char>(c)));
    h = mix(h, index);
    return Rng(h, true);
  }

  std::mt19937_64& engine() { return engine_; }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return static_cast<int>(engine_() % static_cast<uint64_t>(n));
  }

  double normal() {
    std::normal_distribution<double> d(0.0, 1.0);
    return d(engine_);
  }

  static uint64_t mix(uint64_t h, uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
  }

  // Stable hash of a string key plus indices; used for content signatures
  // that must not depend on any run seed.
  static uint64_t key_hash(std::string_view key, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : key) {
      h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ull;
    }
    h = mix(h, a);
    h = mix(h, b);
    return h;
  }

 private:
  Rng(uint64_t hashed, bool) : engine_(hashed), seed_hash_(hashed) {}

  std::mt19937_64 engine_;
  uint64_t seed_hash_ = 0;

  friend class RngInit;
};

}  // namespace duet
