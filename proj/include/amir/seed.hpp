#pragma once

#include <cstdint>
#include <string_view>

namespace amir {

/// FNV-1a over the bytes of `s`; stable across platforms and runs.
constexpr std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t combine_seed(std::uint64_t seed, std::uint64_t value) noexcept {
  return mix64(seed ^ mix64(value));
}

/// Seed for one (source, epoch) pair so prefetch order never changes the data.
constexpr std::uint64_t sample_seed(std::uint64_t global, std::string_view source_id, std::uint64_t epoch) noexcept {
  return combine_seed(combine_seed(global, hash_string(source_id)), epoch);
}

/// Uniform double in [0, 1) from the top 53 bits of a hash.
constexpr double unit_interval(std::uint64_t h) noexcept {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace amir
