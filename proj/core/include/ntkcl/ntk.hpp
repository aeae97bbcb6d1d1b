#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ntkcl/adapters.hpp"
#include "ntkcl/linalg.hpp"
#include "ntkcl/param_vector.hpp"
#include "ntkcl/toynet.hpp"

namespace ntkcl {

/// A function f(x; p) with O outputs and exact reverse-mode products. Inputs
/// are flat vectors; models that consume token sequences reshape them.
class DifferentiableModel {
 public:
  virtual ~DifferentiableModel() = default;

  virtual std::size_t output_dim() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual const ParamVector& parameters() const = 0;
  /// Segments the Jacobian is taken over when the caller passes none.
  virtual std::vector<std::string> default_subset() const = 0;

  virtual std::vector<double> forward(std::span<const double> x) const = 0;
  /// Row r of the result is cotangents.row(r)ᵀ·∂f/∂p restricted to `subset`
  /// (concatenated in subset order). One forward evaluation is shared.
  virtual Matrix vjp_rows(std::span<const double> x, const Matrix& cotangents,
                          const std::vector<std::string>& subset) const = 0;
  virtual std::unique_ptr<DifferentiableModel> with_parameters(const ParamVector& params) const = 0;
};

/// f(x) = W·x + b, W stored row-major O×I under segment "W", b under "b".
class LinearModel final : public DifferentiableModel {
 public:
  LinearModel(std::size_t inputs, std::size_t outputs);
  static LinearModel from_weights(const Matrix& w, std::span<const double> b = {});

  std::size_t output_dim() const override { return outputs_; }
  std::size_t input_dim() const override { return inputs_; }
  const ParamVector& parameters() const override { return params_; }
  std::vector<std::string> default_subset() const override { return {"W"}; }
  std::vector<double> forward(std::span<const double> x) const override;
  Matrix vjp_rows(std::span<const double> x, const Matrix& cotangents,
                  const std::vector<std::string>& subset) const override;
  std::unique_ptr<DifferentiableModel> with_parameters(const ParamVector& params) const override;

 private:
  std::size_t inputs_ = 0;
  std::size_t outputs_ = 0;
  ParamVector params_;
};

enum class NtkReadout {
  kHybrid,       // E_HAE, width 2D
  kBackboneCls,  // pretrained class feature, width D
};

/// Backbone plus adapter bank as one differentiable function. Combined
/// segment names: "backbone.<seg>", "<module>.pre.<seg>", "<module>.curr.<seg>"
/// with module in {s1, s2, hae}. Default subset: every curr segment.
class AdapterNtkModel final : public DifferentiableModel {
 public:
  AdapterNtkModel(ToyBackbone net, AdapterBank bank, NtkReadout readout = NtkReadout::kHybrid);

  std::size_t output_dim() const override;
  std::size_t input_dim() const override;
  const ParamVector& parameters() const override { return combined_; }
  std::vector<std::string> default_subset() const override;
  std::vector<double> forward(std::span<const double> x) const override;
  Matrix vjp_rows(std::span<const double> x, const Matrix& cotangents,
                  const std::vector<std::string>& subset) const override;
  std::unique_ptr<DifferentiableModel> with_parameters(const ParamVector& params) const override;

  const ToyBackbone& backbone() const noexcept { return net_; }
  const AdapterBank& bank() const noexcept { return bank_; }

 private:
  TokenSequence reshape(std::span<const double> x) const;

  ToyBackbone net_;
  AdapterBank bank_;
  NtkReadout readout_;
  ParamVector combined_;
};

/// Subset length (sum of segment lengths). Throws kUnknownSegment.
std::size_t subset_size(const ParamVector& params, const std::vector<std::string>& subset);

/// O×P Jacobian over `subset` (empty → model default), columns in subset order.
Matrix jacobian(const DifferentiableModel& model, std::span<const double> x, std::vector<std::string> subset = {});

/// Φ(x1, x2) = J(x1)·J(x2)ᵀ, O×O.
Matrix empirical_ntk(const DifferentiableModel& model, std::span<const double> x1, std::span<const double> x2,
                     std::vector<std::string> subset = {});

/// Stacked Jacobian (n·O)×P of the rows of X; row i·O + r is output r of sample i.
Matrix stacked_jacobian(const DifferentiableModel& model, const Matrix& inputs, std::vector<std::string> subset = {});

/// Full (n·O)×(n·O) empirical NTK Gram of the rows of X.
Matrix ntk_gram(const DifferentiableModel& model, const Matrix& inputs, std::vector<std::string> subset = {});

/// Central finite-difference Jacobian over `subset`; a test oracle.
Matrix finite_difference_jacobian(const DifferentiableModel& model, std::span<const double> x,
                                  std::vector<std::string> subset = {}, double step = 1e-5);

}  // namespace ntkcl
