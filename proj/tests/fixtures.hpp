#pragma once

// Random parameters and data for tests and the acceptance runner.

#include <random>

#include "saens/saens.hpp"

namespace saens::testing {

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline Matrix random_unit_columns(Index rows, Index cols, std::uint64_t seed) {
  Matrix m = random_matrix(rows, cols, seed);
  normalize_columns(m);
  return m;
}

// Random SAE with every parameter perturbed away from init.
inline SaeParams random_sae(Index d, Index k, Activation act, std::uint64_t seed, double lambda = 0.0) {
  SaeParams p = init_sae(d, k, std::move(act), seed, lambda);
  p.w_enc += random_matrix(k, d, seed + 1, 0.3);
  p.b_enc = random_matrix(k, 1, seed + 2, 0.3).col(0);
  p.b_dec = random_matrix(d, 1, seed + 3, 0.3).col(0);
  return p;
}

inline ActivationDataset dataset_from(const Matrix& m) { return ActivationDataset::from_rows(RowMatrix(m)); }

}  // namespace saens::testing
