#pragma once

#include <cstdint>
#include <random>

namespace groklab {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; mixes a base seed with a stream id and a counter so
/// independent streams (data order, noise, probes) never share state.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t counter = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1) + 0xBF58476D1CE4E5B9ull * counter;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Stream ids used with derive_seed.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kBatchOrder = 3;
inline constexpr std::uint64_t kTrainNoise = 4;
inline constexpr std::uint64_t kMetricNoise = 5;
inline constexpr std::uint64_t kProbe = 6;
inline constexpr std::uint64_t kVerify = 7;
}  // namespace streams

}  // namespace groklab
