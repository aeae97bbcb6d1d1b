#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace ntkcl {

/// Dense row-major matrix of doubles. Gram matrices, Jacobians and prototype
/// tables all live in this type.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  std::vector<double> col(std::size_t c) const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix add_diagonal(const Matrix& a, double lambda);

double max_abs(const Matrix& a);
double frobenius_sq(const Matrix& a);
double frobenius(const Matrix& a);
double trace(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm_sq(std::span<const double> a);
bool all_finite(std::span<const double> a);
/// Largest |a(i,j) - a(j,i)|.
double asymmetry(const Matrix& a);

struct SymEig {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // column k pairs with eigenvalues[k]
};

struct SvdBasis {
  Matrix basis;                        // orthonormal columns
  std::vector<double> singular_values; // descending, all of them
  double retained_energy = 0.0;
  std::size_t rank() const noexcept { return basis.cols(); }
};

inline constexpr double kSymmetryTolerance = 1e-10;

/// X = (G + lambda·I)⁻¹·B via Cholesky. Throws kNonPositiveDefinite on a
/// non-positive pivot instead of regularizing; lambda belongs to the caller.
Matrix ridge_solve(const Matrix& gram, double lambda, const Matrix& rhs);

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
Matrix cholesky(const Matrix& spd);
Matrix cholesky_solve(const Matrix& lower, const Matrix& rhs);

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending. Each
/// eigenvector is signed so its largest-magnitude entry is positive.
SymEig sym_eig(const Matrix& gram);

/// Smallest left-singular basis whose retained energy reaches `energy`.
/// Computed from the eigendecomposition of the smaller of MᵀM / MMᵀ.
SvdBasis truncated_svd(const Matrix& m, double energy);

/// Row-wise softmax with row-max subtraction.
Matrix softmax_rows(const Matrix& m);

}  // namespace ntkcl
