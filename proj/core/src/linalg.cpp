#include "ntkcl/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ntkcl/error.hpp"

namespace ntkcl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonPositiveDefinite: return "NonPositiveDefinite";
    case ErrorCode::kNotSymmetric: return "NotSymmetric";
    case ErrorCode::kZeroMatrix: return "ZeroMatrix";
    case ErrorCode::kUnknownSegment: return "UnknownSegment";
    case ErrorCode::kDivergence: return "Divergence";
    case ErrorCode::kTaskOutOfRange: return "TaskOutOfRange";
    case ErrorCode::kNoConvergence: return "NoConvergence";
    case ErrorCode::kSingularDenominator: return "SingularDenominator";
    case ErrorCode::kIllConditioned: return "IllConditioned";
    case ErrorCode::kNotAPermutation: return "NotAPermutation";
    case ErrorCode::kInvalidCounts: return "InvalidCounts";
    case ErrorCode::kClassCollision: return "ClassCollision";
    case ErrorCode::kEmptyClassifier: return "EmptyClassifier";
    case ErrorCode::kUnknownLabel: return "UnknownLabel";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows_ * cols_, ErrorCode::kShapeMismatch,
          "matrix data length does not match rows*cols");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, ErrorCode::kShapeMismatch, "ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

std::vector<double> Matrix::col(std::size_t c) const {
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorCode::kShapeMismatch, "matmul inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto br = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), ErrorCode::kShapeMismatch, "matmul_tn row counts differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto ar = a.row(k);
    auto br = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = ar[i];
      if (aki == 0.0) continue;
      auto o = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), ErrorCode::kShapeMismatch, "matmul_nt column counts differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kShapeMismatch, "matrix sum shapes differ");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kShapeMismatch,
          "matrix difference shapes differ");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

Matrix add_diagonal(const Matrix& a, double lambda) {
  require(a.rows() == a.cols(), ErrorCode::kShapeMismatch, "add_diagonal needs a square matrix");
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) out(i, i) += lambda;
  return out;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double frobenius_sq(const Matrix& a) { return norm_sq(a.data()); }
double frobenius(const Matrix& a) { return std::sqrt(frobenius_sq(a)); }

double trace(const Matrix& a) {
  double t = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "dot lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm_sq(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

double asymmetry(const Matrix& a) {
  require(a.rows() == a.cols(), ErrorCode::kShapeMismatch, "asymmetry needs a square matrix");
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - a(j, i)));
  return m;
}

Matrix cholesky(const Matrix& spd) {
  const std::size_t n = spd.rows();
  require(spd.cols() == n, ErrorCode::kShapeMismatch, "cholesky needs a square matrix");
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = spd(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) {
      throw Error(ErrorCode::kNonPositiveDefinite,
                  "cholesky pivot " + std::to_string(j) + " is " + std::to_string(diag));
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = spd(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Matrix cholesky_solve(const Matrix& lower, const Matrix& rhs) {
  const std::size_t n = lower.rows();
  require(rhs.rows() == n, ErrorCode::kShapeMismatch, "cholesky_solve rhs rows differ");
  Matrix x = rhs;
  const std::size_t m = rhs.cols();
  // L·y = b
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double lik = lower(i, k);
      for (std::size_t c = 0; c < m; ++c) x(i, c) -= lik * x(k, c);
    }
    for (std::size_t c = 0; c < m; ++c) x(i, c) /= lower(i, i);
  }
  // Lᵀ·x = y
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double lki = lower(k, ii);
      for (std::size_t c = 0; c < m; ++c) x(ii, c) -= lki * x(k, c);
    }
    for (std::size_t c = 0; c < m; ++c) x(ii, c) /= lower(ii, ii);
  }
  return x;
}

Matrix ridge_solve(const Matrix& gram, double lambda, const Matrix& rhs) {
  require(gram.rows() == gram.cols(), ErrorCode::kShapeMismatch, "ridge_solve needs a square Gram");
  require(rhs.rows() == gram.rows(), ErrorCode::kShapeMismatch, "ridge_solve rhs rows differ from Gram");
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kInvalidArgument, "ridge lambda must be >= 0");
  require(asymmetry(gram) <= kSymmetryTolerance * std::max(1.0, max_abs(gram)), ErrorCode::kNotSymmetric,
          "ridge_solve Gram is not symmetric");
  if (gram.rows() == 0) return rhs;
  const Matrix l = cholesky(add_diagonal(gram, lambda));
  Matrix x = cholesky_solve(l, rhs);
  // One step of iterative refinement tightens the residual on ill-conditioned Grams.
  const Matrix residual = rhs - matmul(add_diagonal(gram, lambda), x);
  const Matrix correction = cholesky_solve(l, residual);
  return x + correction;
}

SymEig sym_eig(const Matrix& gram) {
  const std::size_t n = gram.rows();
  require(gram.cols() == n, ErrorCode::kShapeMismatch, "sym_eig needs a square matrix");
  require(asymmetry(gram) <= kSymmetryTolerance * std::max(1.0, max_abs(gram)), ErrorCode::kNotSymmetric,
          "sym_eig input is not symmetric");
  SymEig out;
  if (n == 0) return out;

  Eigen::MatrixXd g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g(i, j) = 0.5 * (gram(i, j) + gram(j, i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(g);
  require(solver.info() == Eigen::Success, ErrorCode::kNoConvergence, "symmetric eigensolver failed");

  // Eigen returns ascending order.
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const Eigen::Index src = static_cast<Eigen::Index>(n - 1 - k);
    out.eigenvalues[k] = solver.eigenvalues()(src);
    Eigen::Index arg = 0;
    solver.eigenvectors().col(src).cwiseAbs().maxCoeff(&arg);
    const double sign = solver.eigenvectors()(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i)
      out.eigenvectors(i, k) = sign * solver.eigenvectors()(static_cast<Eigen::Index>(i), src);
  }
  return out;
}

namespace {

void orthonormalize_columns(Matrix& u) {
  // Two passes of modified Gram-Schmidt.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t k = 0; k < u.cols(); ++k) {
      for (std::size_t j = 0; j < k; ++j) {
        double proj = 0.0;
        for (std::size_t i = 0; i < u.rows(); ++i) proj += u(i, j) * u(i, k);
        for (std::size_t i = 0; i < u.rows(); ++i) u(i, k) -= proj * u(i, j);
      }
      double nrm = 0.0;
      for (std::size_t i = 0; i < u.rows(); ++i) nrm += u(i, k) * u(i, k);
      nrm = std::sqrt(nrm);
      for (std::size_t i = 0; i < u.rows(); ++i) u(i, k) /= nrm;
    }
  }
}

}  // namespace

SvdBasis truncated_svd(const Matrix& m, double energy) {
  require(energy > 0.0 && energy <= 1.0, ErrorCode::kInvalidArgument, "svd energy must lie in (0, 1]");
  const double total = frobenius_sq(m);
  require(total > 0.0, ErrorCode::kZeroMatrix, "truncated_svd of a zero matrix");

  const bool wide = m.rows() <= m.cols();
  const SymEig eig = wide ? sym_eig(matmul_nt(m, m)) : sym_eig(matmul_tn(m, m));

  SvdBasis out;
  const std::size_t k_all = eig.eigenvalues.size();
  out.singular_values.resize(k_all);
  for (std::size_t k = 0; k < k_all; ++k) out.singular_values[k] = std::sqrt(std::max(eig.eigenvalues[k], 0.0));

  const double sigma_floor = 1e-12 * out.singular_values.front();
  const double spectrum = std::accumulate(out.singular_values.begin(), out.singular_values.end(), 0.0,
                                          [](double acc, double s) { return acc + s * s; });
  std::size_t keep = 0;
  double kept = 0.0;
  while (keep < k_all && out.singular_values[keep] > sigma_floor) {
    kept += out.singular_values[keep] * out.singular_values[keep];
    ++keep;
    if (kept >= energy * spectrum * (1.0 - 1e-12)) break;
  }
  out.retained_energy = std::min(1.0, kept / spectrum);

  out.basis = Matrix(m.rows(), keep);
  for (std::size_t k = 0; k < keep; ++k) {
    if (wide) {
      for (std::size_t i = 0; i < m.rows(); ++i) out.basis(i, k) = eig.eigenvectors(i, k);
    } else {
      // u_k = M·v_k / σ_k
      for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += m(i, j) * eig.eigenvectors(j, k);
        out.basis(i, k) = s / out.singular_values[k];
      }
    }
  }
  orthonormalize_columns(out.basis);
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = out.row(r);
    if (row.empty()) continue;
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return out;
}

}  // namespace ntkcl
