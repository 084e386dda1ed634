#pragma once

#include <cstdint>
#include <random>

namespace fertcast {

// splitmix64; used to derive independent engine seeds from a base seed and a
// stream index so that chains / draws get reproducible streams regardless of
// scheduling.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(splitmix64(base) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1));
}

inline std::mt19937_64 make_engine(std::uint64_t base, std::uint64_t stream) {
  return std::mt19937_64(derive_seed(base, stream));
}

}  // namespace fertcast
