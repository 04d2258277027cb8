#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedmarl {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Mixes a base seed with a sequence of integer tags (round, client id, ...)
// into an independent stream seed.
constexpr std::uint64_t derive_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = detail::splitmix64(base);
  for (std::uint64_t t : tags) h = detail::splitmix64(h ^ detail::splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

// Named sub-stream of the master seed ("data", "traces", "marl", "eval").
constexpr std::uint64_t stream_seed(std::uint64_t master, std::string_view name) {
  return derive_seed(master, {detail::fnv1a(name)});
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Uniform double in [0, 1) using the top 53 bits of one engine draw.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace fedmarl
