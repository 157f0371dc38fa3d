#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "attnfool/tensor.hpp"

namespace afool {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of the named sub-stream `name[index]` under a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view name, std::uint64_t index = 0) {
  return splitmix64(splitmix64(base ^ fnv1a64(name)) + index);
}

inline Rng make_rng(std::uint64_t base, std::string_view name, std::uint64_t index = 0) {
  return Rng(derive_seed(base, name, index));
}

inline Tensor random_normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  std::normal_distribution<double> dist(mean, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor random_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace afool
