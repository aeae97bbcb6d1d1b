#include "ntkcl/regime.hpp"

#include <algorithm>
#include <cmath>

#include "ntkcl/error.hpp"

namespace ntkcl {

Kernel Kernel::linear() { return Kernel{}; }

Kernel Kernel::rbf(double gamma) {
  require(gamma > 0.0 && std::isfinite(gamma), ErrorCode::kInvalidArgument, "RBF gamma must be positive");
  Kernel k;
  k.kind = KernelKind::kRbf;
  k.gamma = gamma;
  return k;
}

Kernel Kernel::empirical_ntk(std::shared_ptr<const DifferentiableModel> model, std::vector<std::string> subset) {
  require(model != nullptr, ErrorCode::kInvalidArgument, "empirical NTK kernel needs a model");
  Kernel k;
  k.kind = KernelKind::kEmpiricalNtk;
  if (subset.empty()) subset = model->default_subset();
  k.model = std::move(model);
  k.subset = std::move(subset);
  return k;
}

std::string Kernel::describe() const {
  switch (kind) {
    case KernelKind::kLinear:
      return "linear";
    case KernelKind::kRbf:
      return "rbf(" + std::to_string(gamma) + ")";
    case KernelKind::kEmpiricalNtk:
      return "empirical-ntk";
  }
  return "unknown";
}

double median_heuristic_gamma(const Matrix& x) {
  std::vector<double> d2;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = i + 1; j < x.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) s += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
      d2.push_back(s);
    }
  require(!d2.empty(), ErrorCode::kInvalidArgument, "median heuristic needs at least two inputs");
  const std::size_t mid = d2.size() / 2;
  std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
  double median = d2[mid];
  if (d2.size() % 2 == 0) {
    const double lower = *std::max_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  require(median > 0.0, ErrorCode::kInvalidArgument, "all inputs coincide; median distance is zero");
  return 1.0 / (2.0 * median);
}

Matrix kernel_matrix(const Kernel& k, const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), ErrorCode::kShapeMismatch, "kernel inputs have different widths");
  switch (k.kind) {
    case KernelKind::kLinear:
      return matmul_nt(a, b);
    case KernelKind::kRbf: {
      Matrix out(a.rows(), b.rows());
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) s += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
          out(i, j) = std::exp(-k.gamma * s);
        }
      return out;
    }
    case KernelKind::kEmpiricalNtk: {
      const double o = static_cast<double>(k.model->output_dim());
      const Matrix ja = stacked_jacobian(*k.model, a, k.subset);
      const Matrix jb = (&a == &b) ? ja : stacked_jacobian(*k.model, b, k.subset);
      const std::size_t od = k.model->output_dim();
      const std::size_t p = ja.cols();
      // Flatten each sample's O×P Jacobian into one row; tr(J_a J_bᵀ) is then a dot product.
      const Matrix fa(a.rows(), od * p, std::vector<double>(ja.data().begin(), ja.data().end()));
      const Matrix fb(b.rows(), od * p, std::vector<double>(jb.data().begin(), jb.data().end()));
      return (1.0 / o) * matmul_nt(fa, fb);
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown kernel kind");
}

RegimeState::RegimeState(std::size_t outputs, BaseFunction base) : outputs_(outputs), base_(std::move(base)) {
  require(outputs >= 1, ErrorCode::kInvalidArgument, "regime needs at least one output");
}

const TaskKernelRecord& RegimeState::record(std::size_t tau) const {
  require(tau >= 1 && tau <= records_.size(), ErrorCode::kTaskOutOfRange,
          "task " + std::to_string(tau) + " not in 1.." + std::to_string(records_.size()));
  return records_[tau - 1];
}

Matrix RegimeState::base(const Matrix& inputs) const {
  if (!base_) return Matrix(inputs.rows(), outputs_);
  Matrix out = base_(inputs);
  require(out.rows() == inputs.rows() && out.cols() == outputs_, ErrorCode::kShapeMismatch,
          "base function returned the wrong shape");
  return out;
}

Matrix RegimeState::contribution(std::size_t tau, const Matrix& inputs) const {
  const TaskKernelRecord& r = record(tau);
  return matmul(kernel_matrix(r.kernel, inputs, r.inputs), r.alpha);
}

Matrix RegimeState::predict_upto(const Matrix& inputs, std::size_t upto) const {
  require(upto <= records_.size(), ErrorCode::kTaskOutOfRange, "prediction horizon beyond fitted tasks");
  Matrix out = base(inputs);
  for (std::size_t t = 1; t <= upto; ++t) out = out + contribution(t, inputs);
  return out;
}

RegimeState RegimeState::with_record(TaskKernelRecord record) const {
  RegimeState next = *this;
  next.records_.push_back(std::move(record));
  return next;
}

RegimeState fit_task(const RegimeState& state, const Matrix& inputs, const Matrix& targets, const Kernel& kernel,
                     double lambda) {
  require(targets.rows() == inputs.rows(), ErrorCode::kShapeMismatch, "targets and inputs differ in row count");
  require(targets.cols() == state.outputs(), ErrorCode::kShapeMismatch, "target width differs from regime outputs");
  require(lambda >= 0.0, ErrorCode::kInvalidArgument, "ridge must be nonnegative");
  TaskKernelRecord r;
  r.tau = state.tasks() + 1;
  r.inputs = inputs;
  r.targets = targets;
  r.residual_targets = targets - state.predict(inputs);
  r.lambda = lambda;
  r.kernel = kernel;
  Matrix gram = kernel_matrix(kernel, inputs, inputs);
  // Symmetrize round-off from the NTK product so the solver's symmetry check sees exact symmetry.
  for (std::size_t i = 0; i < gram.rows(); ++i)
    for (std::size_t j = i + 1; j < gram.cols(); ++j) gram(i, j) = gram(j, i) = 0.5 * (gram(i, j) + gram(j, i));
  r.alpha = ridge_solve(gram, lambda, r.residual_targets);
  return state.with_record(std::move(r));
}

ParamVector closed_form_delta(const DifferentiableModel& model, const Matrix& inputs, const Matrix& ytilde,
                              double lambda, std::vector<std::string> subset) {
  if (subset.empty()) subset = model.default_subset();
  const std::size_t o = model.output_dim();
  require(ytilde.rows() == inputs.rows() && ytilde.cols() == o, ErrorCode::kShapeMismatch,
          "residual targets must be n x O");
  const Matrix j = stacked_jacobian(model, inputs, subset);
  Matrix gram = matmul_nt(j, j);
  for (std::size_t a = 0; a < gram.rows(); ++a)
    for (std::size_t b = a + 1; b < gram.cols(); ++b) gram(a, b) = gram(b, a) = 0.5 * (gram(a, b) + gram(b, a));
  const Matrix rhs(ytilde.size(), 1, std::vector<double>(ytilde.data().begin(), ytilde.data().end()));
  const Matrix beta = ridge_solve(gram, lambda, rhs);
  const Matrix delta = matmul_tn(j, beta);

  ParamVector out;
  std::size_t c = 0;
  for (const auto& name : subset) {
    const std::size_t len = model.parameters().segment(name).length;
    out.add(name, len);
    auto v = out.view(name);
    for (std::size_t i = 0; i < len; ++i) v[i] = delta(c + i, 0);
    c += len;
  }
  return out;
}

ResidualIdentity residual_identity(const RegimeState& state, std::size_t tau) {
  const TaskKernelRecord& r = state.record(tau);
  ResidualIdentity out;
  out.direct = frobenius_sq(state.predict_upto(r.inputs, tau) - r.targets);
  // (Φ+λI)⁻¹Ỹ = α, so the closed form is λ²‖α‖².
  out.closed_form = r.lambda * r.lambda * frobenius_sq(r.alpha);
  return out;
}

double training_residual(const RegimeState& state, std::size_t tau) {
  const ResidualIdentity id = residual_identity(state, tau);
  const double scale = std::max({std::abs(id.direct), std::abs(id.closed_form), 1e-300});
  require(std::abs(id.direct - id.closed_form) <= 1e-8 * scale + 1e-20, ErrorCode::kIllConditioned,
          "training residual " + std::to_string(id.direct) + " disagrees with closed form " +
              std::to_string(id.closed_form));
  return id.direct;
}

NtkLinearization::NtkLinearization(std::shared_ptr<const DifferentiableModel> initial, KernelAt mode,
                                   std::vector<std::string> subset)
    : initial_(std::move(initial)), current_(initial_), mode_(mode), subset_(std::move(subset)) {
  require(initial_ != nullptr, ErrorCode::kInvalidArgument, "linearization needs a model");
  if (subset_.empty()) subset_ = initial_->default_subset();
}

Kernel NtkLinearization::kernel() const {
  return Kernel::empirical_ntk(mode_ == KernelAt::kInit ? initial_ : current_, subset_);
}

BaseFunction NtkLinearization::base_function() const {
  std::shared_ptr<const DifferentiableModel> m = initial_;
  return [m](const Matrix& x) {
    Matrix out(x.rows(), m->output_dim());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto y = m->forward(x.row(i));
      std::copy(y.begin(), y.end(), out.row(i).begin());
    }
    return out;
  };
}

RegimeState NtkLinearization::fit(const RegimeState& state, const Matrix& inputs, const Matrix& targets,
                                  double lambda) {
  RegimeState next = fit_task(state, inputs, targets, kernel(), lambda);
  if (mode_ == KernelAt::kTaskStart) {
    const ParamVector delta =
        closed_form_delta(*current_, inputs, next.records().back().residual_targets, lambda, subset_);
    ParamVector p = current_->parameters();
    for (const auto& seg : delta.segments()) {
      auto dst = p.view(seg.name);
      const auto src = delta.view(seg.name);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    current_ = current_->with_parameters(p);
  }
  return next;
}

}  // namespace ntkcl
