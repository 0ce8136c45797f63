#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace saens {

inline constexpr std::string_view kVersion = "0.3.0";

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy. The CLI maps each class onto a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

inline void require_dims(Index got, Index want, std::string_view what) {
  if (got != want) {
    throw ValidationError(std::string(what) + ": dimension mismatch (got " + std::to_string(got) +
                          ", expected " + std::to_string(want) + ")");
  }
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

using Rng = std::mt19937_64;

// SplitMix64 finalizer, used to derive independent stream seeds from one base seed.
constexpr std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// 64-bit FNV-1a over a byte string; used for config provenance hashes.
constexpr std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return out;
}

// Unit-normalizes every column in place. Zero columns are left untouched.
template <typename Derived>
void normalize_columns(Eigen::MatrixBase<Derived>& m) {
  for (Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n > 0.0) m.col(j) /= n;
  }
}

inline double max_column_norm_deviation(const Matrix& m) {
  double worst = 0.0;
  for (Index j = 0; j < m.cols(); ++j) worst = std::max(worst, std::abs(m.col(j).norm() - 1.0));
  return worst;
}

}  // namespace saens
