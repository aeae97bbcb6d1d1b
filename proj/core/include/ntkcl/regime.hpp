#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ntkcl/linalg.hpp"
#include "ntkcl/ntk.hpp"
#include "ntkcl/param_vector.hpp"

namespace ntkcl {

enum class KernelKind { kLinear, kRbf, kEmpiricalNtk };

/// Scalar kernel shared by every output (block-diagonal over outputs). The
/// empirical-NTK kind uses k(a, b) = tr(J(a)·J(b)ᵀ) / O of a model snapshot.
struct Kernel {
  KernelKind kind = KernelKind::kLinear;
  double gamma = 1.0;  // RBF only: exp(-gamma·‖a-b‖²)
  std::shared_ptr<const DifferentiableModel> model;
  std::vector<std::string> subset;

  static Kernel linear();
  static Kernel rbf(double gamma);
  static Kernel empirical_ntk(std::shared_ptr<const DifferentiableModel> model, std::vector<std::string> subset = {});

  std::string describe() const;
};

/// γ = 1 / (2·median pairwise squared distance) over the rows of X.
double median_heuristic_gamma(const Matrix& inputs);

/// Gram block Φ(A, B), rows(A)×rows(B).
Matrix kernel_matrix(const Kernel& kernel, const Matrix& a, const Matrix& b);

inline constexpr double kDefaultRidge = 1e-3;

struct TaskKernelRecord {
  std::size_t tau = 0;  // 1-based
  Matrix inputs;        // X_τ, n×d
  Matrix targets;       // Y_τ, n×O
  Matrix residual_targets;  // Ỹ_τ = Y_τ - f_{τ-1}(X_τ)
  Matrix alpha;             // (Φ_τ + λI)⁻¹Ỹ_τ
  double lambda = kDefaultRidge;
  Kernel kernel;
};

/// f₀ evaluated on the rows of X, returning n×O.
using BaseFunction = std::function<Matrix(const Matrix&)>;

class RegimeState {
 public:
  explicit RegimeState(std::size_t outputs, BaseFunction base = {});

  std::size_t outputs() const noexcept { return outputs_; }
  const std::vector<TaskKernelRecord>& records() const noexcept { return records_; }
  std::size_t tasks() const noexcept { return records_.size(); }
  const TaskKernelRecord& record(std::size_t tau) const;

  Matrix base(const Matrix& inputs) const;
  /// f₀(X) + Σ_{i ≤ upto} Φ_i(X, X_i)·α_i; upto = tasks() when omitted.
  Matrix predict(const Matrix& inputs) const { return predict_upto(inputs, records_.size()); }
  Matrix predict_upto(const Matrix& inputs, std::size_t upto) const;

  /// Contribution of one record alone: Φ_k(X, X_k)·α_k.
  Matrix contribution(std::size_t tau, const Matrix& inputs) const;

  /// Returns a new state; the receiver is not modified.
  RegimeState with_record(TaskKernelRecord record) const;

 private:
  std::size_t outputs_;
  BaseFunction base_;
  std::vector<TaskKernelRecord> records_;
};

/// Appends task τ = tasks()+1 with Ỹ = Y − predict(state, X) and
/// α = (Φ(X,X) + λI)⁻¹Ỹ.
RegimeState fit_task(const RegimeState& state, const Matrix& inputs, const Matrix& targets, const Kernel& kernel,
                     double lambda = kDefaultRidge);

/// Δp = J(X)ᵀ(J(X)J(X)ᵀ + λI)⁻¹ vec(Ỹ) over `subset` (empty → model default).
/// The result carries one segment per subset entry.
ParamVector closed_form_delta(const DifferentiableModel& model, const Matrix& inputs, const Matrix& residual_targets,
                              double lambda, std::vector<std::string> subset = {});

struct ResidualIdentity {
  double direct = 0.0;       // ‖f_τ(X_τ) − Y_τ‖²
  double closed_form = 0.0;  // λ²‖(Φ_τ + λI)⁻¹Ỹ_τ‖²
};
ResidualIdentity residual_identity(const RegimeState& state, std::size_t tau);

/// ‖f_τ(X_τ) − Y_τ‖²; throws kIllConditioned when it differs from the closed
/// form by more than 1e-8 relative.
double training_residual(const RegimeState& state, std::size_t tau);

enum class KernelAt { kTaskStart, kInit };

/// Tracks the model the empirical NTK is linearized around. In task-start
/// mode the parameters advance by closed_form_delta after each task.
class NtkLinearization {
 public:
  NtkLinearization(std::shared_ptr<const DifferentiableModel> initial, KernelAt mode,
                   std::vector<std::string> subset = {});

  Kernel kernel() const;
  const DifferentiableModel& current() const { return *current_; }
  const DifferentiableModel& initial() const { return *initial_; }
  KernelAt mode() const noexcept { return mode_; }
  /// f₀ as a base function: the initial model's outputs.
  BaseFunction base_function() const;

  RegimeState fit(const RegimeState& state, const Matrix& inputs, const Matrix& targets,
                  double lambda = kDefaultRidge);

 private:
  std::shared_ptr<const DifferentiableModel> initial_;
  std::shared_ptr<const DifferentiableModel> current_;
  KernelAt mode_;
  std::vector<std::string> subset_;
};

}  // namespace ntkcl
