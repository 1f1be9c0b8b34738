#pragma once

// Orthonormal-subspace algebra: coordinates along a basis, the
// reflection/ablation rewrite h - alpha * sum_j <h, b_j> b_j, and
// the NSUB binary format shared with external encoders.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "numsub/binary_io.hpp"

namespace numsub {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kUnitNormTolerance = 1e-4;

/// Ordered orthonormal basis b(1)..b(k) of a subspace of R^d.
/// Basis vectors are stored as rows.
class NumberSubspace {
 public:
  NumberSubspace() = default;

  /// Rejects rows whose norm is off by more than 1e-4 or whose pairwise dot
  /// products exceed 1e-4; nothing is renormalized.
  NumberSubspace(Matrix basis_rows, int dim) : basis_(std::move(basis_rows)), dim_(dim) {
    if (dim_ < 1) throw Error("subspace dimension must be positive");
    if (basis_.rows() > 0 && basis_.cols() != dim_) {
      throw Error("basis width does not match subspace dimension");
    }
    if (basis_.rows() > dim_) throw Error("more basis vectors than dimensions");
    if (!basis_.allFinite()) throw Error("basis contains non-finite values");
    for (Eigen::Index i = 0; i < basis_.rows(); ++i) {
      const double defect = std::abs(basis_.row(i).norm() - 1.0);
      if (defect > kUnitNormTolerance) {
        throw Error("basis vector " + std::to_string(i) + " is not unit length (defect " +
                    std::to_string(defect) + ")");
      }
    }
    if (basis_.rows() > 1) {
      Matrix gram = basis_ * basis_.transpose();
      gram.diagonal().setZero();
      if (gram.cwiseAbs().maxCoeff() > kUnitNormTolerance) {
        throw Error("basis vectors are not mutually orthogonal");
      }
    }
  }

  explicit NumberSubspace(Matrix basis_rows)
      : NumberSubspace(basis_rows, static_cast<int>(basis_rows.cols())) {}

  static NumberSubspace from_vectors(std::span<const Vector> vectors, int dim) {
    Matrix rows(static_cast<Eigen::Index>(vectors.size()), dim);
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      if (vectors[i].size() != dim) throw Error("dimension mismatch in basis vectors");
      rows.row(static_cast<Eigen::Index>(i)) = vectors[i].transpose();
    }
    return NumberSubspace(std::move(rows), dim);
  }

  int dim() const { return dim_; }
  int rank() const { return static_cast<int>(basis_.rows()); }
  bool empty() const { return basis_.rows() == 0; }
  const Matrix& basis() const { return basis_; }
  Vector basis_vector(int j) const { return basis_.row(j).transpose(); }

  /// First `k` basis vectors.
  NumberSubspace prefix(int k) const {
    if (k < 0 || k > rank()) throw Error("prefix length out of range");
    return NumberSubspace(basis_.topRows(k), dim_);
  }

  friend bool operator==(const NumberSubspace& a, const NumberSubspace& b) {
    return a.dim_ == b.dim_ && a.basis_.rows() == b.basis_.rows() &&
           (a.basis_.rows() == 0 || a.basis_ == b.basis_);
  }

 private:
  Matrix basis_;
  int dim_ = 0;
};

/// lambda = h^T b for a unit vector b.
inline double scalar_projection(const Vector& h, const Vector& b) {
  if (h.size() != b.size()) throw Error("scalar_projection: dimension mismatch");
  if (std::abs(b.norm() - 1.0) > kUnitNormTolerance) {
    throw Error("scalar_projection: direction is not a unit vector");
  }
  return h.dot(b);
}

namespace detail {
inline int resolve_k(const NumberSubspace& s, int k_used) {
  const int k = k_used < 0 ? s.rank() : k_used;
  if (k < 1 || k > s.rank()) {
    throw Error("k_used must lie in [1, " + std::to_string(s.rank()) + "], got " +
                std::to_string(k));
  }
  return k;
}
inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw Error("alpha must be a finite value >= 0");
}
}  // namespace detail

/// h~ = h - alpha * sum_{j<k} (h^T b_j) b_j. alpha = 1 zeroes the used
/// coordinates, alpha = 2 negates them. k_used = -1 means all of s.
inline Vector intervene(const Vector& h, const NumberSubspace& s, double alpha, int k_used = -1) {
  if (h.size() != s.dim()) throw Error("intervene: dimension mismatch");
  detail::check_alpha(alpha);
  const int k = detail::resolve_k(s, k_used);
  const auto used = s.basis().topRows(k);
  const Vector coords = used * h;
  return h - alpha * (used.transpose() * coords);
}

/// Row-wise intervene on a block of hidden states (any scalar type). The
/// arithmetic is carried out in double and written back.
template <typename Derived>
void intervene_rows(Eigen::MatrixBase<Derived>& rows, const NumberSubspace& s, double alpha,
                    int k_used = -1) {
  if (rows.cols() != s.dim()) throw Error("intervene_rows: dimension mismatch");
  detail::check_alpha(alpha);
  const int k = detail::resolve_k(s, k_used);
  const auto used = s.basis().topRows(k);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const Vector h = rows.row(r).transpose().template cast<double>();
    const Vector coords = used * h;
    const Vector out = h - alpha * (used.transpose() * coords);
    rows.row(r) = out.transpose().template cast<typename Derived::Scalar>();
  }
}

/// Applies intervene with alpha = 1 to every row (erases the subspace).
inline Matrix ablate_rows(const Matrix& rows, const NumberSubspace& s, int k_used = -1) {
  if (s.empty()) return rows;
  Matrix out = rows;
  intervene_rows(out, s, 1.0, k_used);
  return out;
}

/// max |(B B^T - I)_ij| for candidate basis rows (not necessarily valid).
inline double orthonormality_defect(const Matrix& rows) {
  if (rows.rows() == 0) return 0.0;
  const Matrix gram = rows * rows.transpose();
  return (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
}

inline double orthonormality_defect(const NumberSubspace& s) { return orthonormality_defect(s.basis()); }

/// Modified Gram-Schmidt with one re-orthogonalization pass. Returns the
/// orthonormalized rows; throws if the input rows are (numerically) dependent.
inline Matrix orthonormalize_rows(Matrix rows) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index j = 0; j < i; ++j) {
        rows.row(i) -= rows.row(i).dot(rows.row(j)) * rows.row(j);
      }
    }
    const double n = rows.row(i).norm();
    if (n < 1e-10) throw Error("orthonormalize_rows: linearly dependent input");
    rows.row(i) /= n;
  }
  return rows;
}

/// Orthonormalized k i.i.d. standard-normal vectors in R^d.
inline NumberSubspace random_subspace(int d, int k, std::uint64_t seed) {
  if (d < 1 || k < 1) throw Error("random_subspace: need 1 <= k <= d");
  if (k > d) throw Error("random_subspace: k exceeds d");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix rows(k, d);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) rows(i, j) = normal(rng);
  }
  return NumberSubspace(orthonormalize_rows(std::move(rows)), d);
}

// NSUB: "NSUB", u16 version, u32 d, u32 k, k*d f64 little-endian, rows in basis order.
inline constexpr std::uint16_t kSubspaceFormatVersion = 1;

inline void write_subspace(std::ostream& out, const NumberSubspace& s) {
  io::write_magic(out, "NSUB");
  io::write_le<std::uint16_t>(out, kSubspaceFormatVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.dim()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.rank()));
  for (int i = 0; i < s.rank(); ++i) {
    for (int j = 0; j < s.dim(); ++j) io::write_f64(out, s.basis()(i, j));
  }
}

inline NumberSubspace read_subspace(std::istream& in) {
  io::expect_magic(in, "NSUB");
  const auto version = io::read_le<std::uint16_t>(in);
  if (version != kSubspaceFormatVersion) {
    throw Error("unsupported NSUB version " + std::to_string(version));
  }
  const auto d = io::read_le<std::uint32_t>(in);
  const auto k = io::read_le<std::uint32_t>(in);
  if (d == 0 || k > d) throw Error("corrupt NSUB header");
  Matrix rows(k, d);
  for (std::uint32_t i = 0; i < k; ++i) {
    for (std::uint32_t j = 0; j < d; ++j) rows(i, j) = io::read_f64(in);
  }
  return NumberSubspace(std::move(rows), static_cast<int>(d));
}

inline void save_subspace(const std::filesystem::path& path, const NumberSubspace& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_subspace(out, s);
}

inline NumberSubspace load_subspace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_subspace(in);
}

}  // namespace numsub
