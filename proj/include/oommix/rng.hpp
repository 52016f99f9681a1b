#pragma once

#include <cstdint>
#include <random>

namespace oommix {

using Rng = std::mt19937_64;

/// Independent named streams derived from the single run seed.
enum class Stream : std::uint32_t {
  Init = 1,
  Data = 2,
  Pairing = 3,
  Dropout = 4,
  Mixing = 5,
  Augment = 6,
  Analysis = 7,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t extra = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(extra),
                    static_cast<std::uint32_t>(extra >> 32)};
  return Rng(seq);
}

/// Uniform draw on [0, 1), portable across standard libraries.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace oommix
