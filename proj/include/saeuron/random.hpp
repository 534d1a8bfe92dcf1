#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace saeuron {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed for (seed, stream) pairs such as
// (dataset seed, epoch).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x5EEDull));
}

// Fisher-Yates with an explicit modulo draw so the permutation does not
// depend on the standard library's distribution implementation.
template <class T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    std::swap(items[i - 1], items[static_cast<std::size_t>(r % bound)]);
  }
}

}  // namespace saeuron
