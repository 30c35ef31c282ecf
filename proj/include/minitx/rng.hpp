#pragma once

#include <cstdint>
#include <random>

namespace minitx {

using Rng = std::mt19937_64;

/// Purposes a master seed is split into. Each gets an independent stream.
enum class Stream : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kGenerate = 3,
  kPermute = 4,
  kTrainData = 5,
  kTestData = 6,
  kFolds = 7,
  kVisits = 8,
  kRepetition = 9,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministically derives a child seed from a master seed, a purpose and an
/// index (repetition, fold, permutation replicate, ...).
inline std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  return splitmix64(h ^ (index * 0xd6e8feb86659fd93ULL));
}

inline Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
  return Rng(derive_seed(master, stream, index));
}

}  // namespace minitx
