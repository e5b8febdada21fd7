#pragma once

#include <cstdint>
#include <random>

namespace mantis {

// splitmix64; used to derive independent seed streams from one master seed
// so that per-sample draws do not depend on iteration or thread order.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix64(mix64(mix64(master ^ mix64(a)) ^ mix64(b)) ^ mix64(c));
}

inline std::mt19937 make_rng(std::uint64_t seed) {
  return std::mt19937(static_cast<std::uint32_t>(mix64(seed) >> 16));
}

}  // namespace mantis
