#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace gsqa {

// Name recorded in manifests and checkpoints so outputs can be reproduced by
// other implementations.
inline constexpr const char* kRngAlgorithm =
    "mt19937_64 seeded by splitmix64(seed, stream); uniform = top 53 bits; "
    "normal = Box-Muller (cosine branch); bounded int = rejection";

std::uint64_t splitmix64(std::uint64_t x);

// Derives an independent stream seed from a user seed and a stream id.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Seeded generator whose outputs are fully specified (std distributions are
// implementation-defined, so none are used here).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : engine_(derive_seed(seed, stream)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  // Standard normal via Box-Muller; one value per pair of uniforms.
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

}  // namespace gsqa
