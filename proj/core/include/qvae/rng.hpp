#pragma once

#include <cstdint>
#include <random>

#include "qvae/tensor.hpp"

namespace qvae {

// Derives an independent generator from (seed, stream). Streams let one
// logical seed own several non-overlapping sources (per trial, per
// trajectory, per evaluation pass).
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{
      static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline Matrix randn(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) out(i, j) = dist(rng);
  return out;
}

inline Matrix rand_uniform(Index rows, Index cols, double lo, double hi,
                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) out(i, j) = dist(rng);
  return out;
}

}  // namespace qvae
