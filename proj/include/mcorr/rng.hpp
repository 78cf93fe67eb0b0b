#pragma once

#include <cstdint>
#include <random>

namespace mcorr {

using Engine = std::mt19937_64;

// Name written into metadata so outputs can be traced to the generator.
inline constexpr const char* kRngAlgorithm = "mt19937_64 + std::normal_distribution (libstdc++)";

// Independent stream seed for (master, stream) pairs, e.g. one per walker,
// trajectory or rolling window.
inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x6d636f72u};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline Engine make_engine(std::uint64_t master, std::uint64_t stream) {
  return Engine(stream_seed(master, stream));
}

}  // namespace mcorr
