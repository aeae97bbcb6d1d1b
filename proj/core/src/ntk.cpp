#include "ntkcl/ntk.hpp"

#include <algorithm>

#include "ntkcl/error.hpp"

namespace ntkcl {

namespace {

std::vector<std::string> resolve(const DifferentiableModel& model, std::vector<std::string> subset) {
  if (subset.empty()) subset = model.default_subset();
  for (const auto& name : subset) (void)model.parameters().segment(name);
  return subset;
}

void copy_subset_row(const ParamVector& grad, const std::vector<std::string>& subset, std::span<double> row) {
  std::size_t c = 0;
  for (const auto& name : subset) {
    const auto seg = grad.view(name);
    std::copy(seg.begin(), seg.end(), row.begin() + static_cast<std::ptrdiff_t>(c));
    c += seg.size();
  }
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

std::size_t subset_size(const ParamVector& params, const std::vector<std::string>& subset) {
  std::size_t n = 0;
  for (const auto& name : subset) n += params.segment(name).length;
  return n;
}

LinearModel::LinearModel(std::size_t inputs, std::size_t outputs) : inputs_(inputs), outputs_(outputs) {
  require(inputs > 0 && outputs > 0, ErrorCode::kInvalidArgument, "linear model needs positive dimensions");
  params_.add("W", outputs * inputs);
  params_.add("b", outputs);
}

LinearModel LinearModel::from_weights(const Matrix& w, std::span<const double> b) {
  LinearModel m(w.cols(), w.rows());
  std::copy(w.data().begin(), w.data().end(), m.params_.view("W").begin());
  if (!b.empty()) {
    require(b.size() == w.rows(), ErrorCode::kShapeMismatch, "bias length must equal output count");
    std::copy(b.begin(), b.end(), m.params_.view("b").begin());
  }
  return m;
}

std::vector<double> LinearModel::forward(std::span<const double> x) const {
  require(x.size() == inputs_, ErrorCode::kShapeMismatch, "input width mismatch");
  const auto w = params_.view("W");
  const auto b = params_.view("b");
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t r = 0; r < outputs_; ++r)
    for (std::size_t c = 0; c < inputs_; ++c) y[r] += w[r * inputs_ + c] * x[c];
  return y;
}

Matrix LinearModel::vjp_rows(std::span<const double> x, const Matrix& cot,
                             const std::vector<std::string>& subset) const {
  require(x.size() == inputs_, ErrorCode::kShapeMismatch, "input width mismatch");
  require(cot.cols() == outputs_, ErrorCode::kShapeMismatch, "cotangent width mismatch");
  Matrix out(cot.rows(), subset_size(params_, subset));
  for (std::size_t k = 0; k < cot.rows(); ++k) {
    ParamVector g = params_.zeros_like();
    auto gw = g.view("W");
    auto gb = g.view("b");
    for (std::size_t r = 0; r < outputs_; ++r) {
      gb[r] = cot(k, r);
      for (std::size_t c = 0; c < inputs_; ++c) gw[r * inputs_ + c] = cot(k, r) * x[c];
    }
    copy_subset_row(g, subset, out.row(k));
  }
  return out;
}

std::unique_ptr<DifferentiableModel> LinearModel::with_parameters(const ParamVector& params) const {
  require(params.same_layout(params_), ErrorCode::kShapeMismatch, "parameter layout mismatch");
  auto m = std::make_unique<LinearModel>(*this);
  m->params_ = params;
  return m;
}

namespace {

constexpr std::size_t kBackboneSlot = 0;
std::size_t pre_slot(AdapterModule m) { return 1 + 2 * static_cast<std::size_t>(m); }
std::size_t curr_slot(AdapterModule m) { return 2 + 2 * static_cast<std::size_t>(m); }

std::string slot_prefix(std::size_t slot) {
  if (slot == kBackboneSlot) return "backbone.";
  const auto m = static_cast<AdapterModule>((slot - 1) / 2);
  return module_name(m) + ((slot % 2 == 1) ? ".pre." : ".curr.");
}

struct Located {
  std::size_t slot;
  std::string inner;
};

Located locate(const std::string& name) {
  for (std::size_t slot = 0; slot < 7; ++slot) {
    const std::string p = slot_prefix(slot);
    if (starts_with(name, p)) return {slot, name.substr(p.size())};
  }
  throw Error(ErrorCode::kUnknownSegment, "no parameter segment named '" + name + "'");
}

}  // namespace

AdapterNtkModel::AdapterNtkModel(ToyBackbone net, AdapterBank bank, NtkReadout readout)
    : net_(std::move(net)), bank_(std::move(bank)), readout_(readout) {
  require(bank_.width() == net_.config().width && bank_.blocks() == net_.config().blocks,
          ErrorCode::kShapeMismatch, "adapter bank does not match backbone");
  auto append = [&](std::size_t slot, const ParamVector& src) {
    for (const auto& seg : src.segments()) {
      combined_.add(slot_prefix(slot) + seg.name, seg.length);
      const auto from = src.view(seg.name);
      std::copy(from.begin(), from.end(), combined_.view(slot_prefix(slot) + seg.name).begin());
    }
  };
  append(kBackboneSlot, net_.params());
  for (AdapterModule m : kAdapterModules) {
    append(pre_slot(m), bank_.module(m).pre);
    append(curr_slot(m), bank_.module(m).curr);
  }
}

std::size_t AdapterNtkModel::output_dim() const {
  return readout_ == NtkReadout::kHybrid ? 2 * net_.config().width : net_.config().width;
}

std::size_t AdapterNtkModel::input_dim() const { return net_.config().tokens() * net_.config().width; }

std::vector<std::string> AdapterNtkModel::default_subset() const {
  std::vector<std::string> out;
  for (const auto& seg : combined_.segments())
    if (seg.name.find(".curr.") != std::string::npos) out.push_back(seg.name);
  return out;
}

TokenSequence AdapterNtkModel::reshape(std::span<const double> x) const {
  const std::size_t t = net_.config().tokens();
  const std::size_t d = net_.config().width;
  require(x.size() == t * d, ErrorCode::kShapeMismatch, "flattened token sequence has wrong length");
  return Matrix(t, d, std::vector<double>(x.begin(), x.end()));
}

std::vector<double> AdapterNtkModel::forward(std::span<const double> x) const {
  const TokenSequence tokens = reshape(x);
  if (readout_ == NtkReadout::kBackboneCls) return cls_feature(net_, tokens);
  return triple_features(net_, bank_, tokens).hybrid;
}

Matrix AdapterNtkModel::vjp_rows(std::span<const double> x, const Matrix& cot,
                                 const std::vector<std::string>& subset) const {
  require(cot.cols() == output_dim(), ErrorCode::kShapeMismatch, "cotangent width mismatch");
  std::vector<Located> where;
  bool need_backbone = false, need_pre = false, need_curr = false;
  for (const auto& name : subset) {
    (void)combined_.segment(name);
    where.push_back(locate(name));
    const std::size_t s = where.back().slot;
    if (s == kBackboneSlot)
      need_backbone = true;
    else if (s % 2 == 1)
      need_pre = true;
    else
      need_curr = true;
  }
  const TokenSequence tokens = reshape(x);
  Matrix out(cot.rows(), subset_size(combined_, subset));

  if (readout_ == NtkReadout::kBackboneCls) {
    const ForwardTrace tr = forward_trace(net_, tokens);
    for (std::size_t k = 0; k < cot.rows(); ++k) {
      ParamVector gb = net_.params().zeros_like();
      if (need_backbone) backward_cls(net_, tr, {}, cot.row(k), PathGrads{&gb, nullptr, nullptr});
      auto row = out.row(k);
      std::size_t c = 0;
      for (const auto& loc : where) {
        const std::size_t len =
            loc.slot == kBackboneSlot ? gb.segment(loc.inner).length : combined_.segment(slot_prefix(loc.slot) + loc.inner).length;
        if (loc.slot == kBackboneSlot) {
          const auto seg = gb.view(loc.inner);
          std::copy(seg.begin(), seg.end(), row.begin() + static_cast<std::ptrdiff_t>(c));
        }
        c += len;
      }
    }
    return out;
  }

  const TripleTrace tr = triple_trace(net_, bank_, tokens);
  for (std::size_t k = 0; k < cot.rows(); ++k) {
    ParamVector gb;
    BankGradient pre, curr;
    TripleGrads sinks;
    if (need_backbone) {
      gb = net_.params().zeros_like();
      sinks.backbone = &gb;
    }
    if (need_pre) {
      for (AdapterModule m : kAdapterModules) pre.of(m) = bank_.module(m).pre.zeros_like();
      sinks.pre = &pre;
    }
    if (need_curr) {
      curr = BankGradient::zeros_like(bank_);
      sinks.curr = &curr;
    }
    triple_backward(net_, bank_, tr, {}, {}, cot.row(k), sinks);
    auto row = out.row(k);
    std::size_t c = 0;
    for (const auto& loc : where) {
      const ParamVector* src = nullptr;
      if (loc.slot == kBackboneSlot)
        src = &gb;
      else {
        const auto m = static_cast<AdapterModule>((loc.slot - 1) / 2);
        src = (loc.slot % 2 == 1) ? &pre.of(m) : &curr.of(m);
      }
      const auto seg = src->view(loc.inner);
      std::copy(seg.begin(), seg.end(), row.begin() + static_cast<std::ptrdiff_t>(c));
      c += seg.size();
    }
  }
  return out;
}

std::unique_ptr<DifferentiableModel> AdapterNtkModel::with_parameters(const ParamVector& params) const {
  require(params.same_layout(combined_), ErrorCode::kShapeMismatch, "parameter layout mismatch");
  auto extract = [&](std::size_t slot, const ParamVector& like) {
    ParamVector out = like;
    for (const auto& seg : like.segments()) {
      const auto from = params.view(slot_prefix(slot) + seg.name);
      std::copy(from.begin(), from.end(), out.view(seg.name).begin());
    }
    return out;
  };
  ToyBackbone net = ToyBackbone::from_params(net_.config(), extract(kBackboneSlot, net_.params()));
  if (net_.frozen()) net.freeze();
  AdapterBank bank = bank_;
  for (AdapterModule m : kAdapterModules) {
    bank.module(m).pre = extract(pre_slot(m), bank_.module(m).pre);
    bank.module(m).curr = extract(curr_slot(m), bank_.module(m).curr);
  }
  return std::make_unique<AdapterNtkModel>(std::move(net), std::move(bank), readout_);
}

Matrix jacobian(const DifferentiableModel& model, std::span<const double> x, std::vector<std::string> subset) {
  subset = resolve(model, std::move(subset));
  return model.vjp_rows(x, Matrix::identity(model.output_dim()), subset);
}

Matrix empirical_ntk(const DifferentiableModel& model, std::span<const double> x1, std::span<const double> x2,
                     std::vector<std::string> subset) {
  subset = resolve(model, std::move(subset));
  return matmul_nt(jacobian(model, x1, subset), jacobian(model, x2, subset));
}

Matrix stacked_jacobian(const DifferentiableModel& model, const Matrix& inputs, std::vector<std::string> subset) {
  subset = resolve(model, std::move(subset));
  const std::size_t o = model.output_dim();
  Matrix out(inputs.rows() * o, subset_size(model.parameters(), subset));
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    const Matrix j = jacobian(model, inputs.row(i), subset);
    std::copy(j.data().begin(), j.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * o * j.cols()));
  }
  return out;
}

Matrix ntk_gram(const DifferentiableModel& model, const Matrix& inputs, std::vector<std::string> subset) {
  const Matrix j = stacked_jacobian(model, inputs, std::move(subset));
  return matmul_nt(j, j);
}

Matrix finite_difference_jacobian(const DifferentiableModel& model, std::span<const double> x,
                                  std::vector<std::string> subset, double step) {
  subset = resolve(model, std::move(subset));
  const std::size_t o = model.output_dim();
  Matrix out(o, subset_size(model.parameters(), subset));
  ParamVector p = model.parameters();
  std::size_t col = 0;
  for (const auto& name : subset) {
    const Segment seg = p.segment(name);
    for (std::size_t i = 0; i < seg.length; ++i, ++col) {
      double& v = p.values()[seg.offset + i];
      const double saved = v;
      v = saved + step;
      const auto plus = model.with_parameters(p)->forward(x);
      v = saved - step;
      const auto minus = model.with_parameters(p)->forward(x);
      v = saved;
      for (std::size_t r = 0; r < o; ++r) out(r, col) = (plus[r] - minus[r]) / (2.0 * step);
    }
  }
  return out;
}

}  // namespace ntkcl
