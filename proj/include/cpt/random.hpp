#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace cpt {

/// Named sub-stream of a run seed, so each source of randomness (data, init,
/// augmentation, dropout, shuffling) can vary independently of the others.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(seed);
  for (unsigned char c : stream) h = mix(h ^ c);
  for (auto i : indices) h = mix(h ^ i);
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream,
                                std::initializer_list<std::uint64_t> indices = {}) {
  return std::mt19937_64(derive_seed(seed, stream, indices));
}

}  // namespace cpt
