#include "ntkcl/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ntkcl/error.hpp"

namespace ntkcl {

void LossWeights::validate() const {
  for (double w : {eta, upsilon, lambda})
    require(std::isfinite(w) && w >= 0.0, ErrorCode::kInvalidArgument, "loss weights must be finite and nonnegative");
}

LinearHead LinearHead::zeros(std::size_t classes, std::size_t features) {
  return LinearHead{Matrix(classes, features), std::vector<double>(classes, 0.0)};
}

std::vector<double> LinearHead::logits(std::span<const double> e) const {
  require(e.size() == features(), ErrorCode::kShapeMismatch, "head input width mismatch");
  std::vector<double> out(bias);
  for (std::size_t c = 0; c < classes(); ++c) out[c] += dot(weight.row(c), e);
  return out;
}

double masked_cross_entropy(std::span<const double> logits, std::size_t label, const std::vector<bool>& mask,
                            std::span<double> d_logits) {
  require(mask.size() == logits.size(), ErrorCode::kShapeMismatch, "mask and logits differ in length");
  require(label < logits.size() && mask[label], ErrorCode::kUnknownLabel,
          "label " + std::to_string(label) + " is not an active class");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (mask[c]) mx = std::max(mx, logits[c]);
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (mask[c]) z += std::exp(logits[c] - mx);
  const double lse = mx + std::log(z);
  if (!d_logits.empty()) {
    require(d_logits.size() == logits.size(), ErrorCode::kShapeMismatch, "gradient buffer length mismatch");
    for (std::size_t c = 0; c < logits.size(); ++c) d_logits[c] = mask[c] ? std::exp(logits[c] - lse) : 0.0;
    d_logits[label] -= 1.0;
  }
  return lse - logits[label];
}

double cls_loss(const FeatureTriple& triple, const BranchHeads& heads, std::size_t label, const std::vector<bool>& mask,
                ClsGradients* grads) {
  const std::array<const std::vector<double>*, 3> feats{&triple.s1, &triple.s2, &triple.hybrid};
  std::array<std::vector<double>*, 3> dfeats{};
  if (grads) {
    dfeats = {&grads->features.s1, &grads->features.s2, &grads->features.hybrid};
    for (std::size_t b = 0; b < 3; ++b) {
      if (grads->heads[b].weight.rows() != heads[b].classes() || grads->heads[b].weight.cols() != heads[b].features())
        grads->heads[b] = LinearHead::zeros(heads[b].classes(), heads[b].features());
      if (dfeats[b]->size() != feats[b]->size()) dfeats[b]->assign(feats[b]->size(), 0.0);
    }
  }
  double total = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto logits = heads[b].logits(*feats[b]);
    std::vector<double> dl(grads ? logits.size() : 0);
    total += masked_cross_entropy(logits, label, mask, dl);
    if (!grads) continue;
    LinearHead& gh = grads->heads[b];
    auto& df = *dfeats[b];
    for (std::size_t c = 0; c < logits.size(); ++c) {
      if (dl[c] == 0.0) continue;
      gh.bias[c] += dl[c];
      auto wr = heads[b].weight.row(c);
      auto gr = gh.weight.row(c);
      for (std::size_t f = 0; f < wr.size(); ++f) {
        gr[f] += dl[c] * (*feats[b])[f];
        df[f] += dl[c] * wr[f];
      }
    }
  }
  return total;
}

namespace {

constexpr double kNormFloor = 1e-12;

/// s = a·b/(‖a‖‖b‖) and, optionally, ∂s/∂a and ∂s/∂b accumulated with weight g.
double cosine_with_grad(std::span<const double> a, std::span<const double> b, double g, std::span<double> da,
                        std::span<double> db) {
  const double na = std::sqrt(norm_sq(a));
  const double nb = std::sqrt(norm_sq(b));
  if (na < kNormFloor || nb < kNormFloor) return 0.0;
  const double s = dot(a, b) / (na * nb);
  if (!da.empty())
    for (std::size_t k = 0; k < a.size(); ++k) da[k] += g * (b[k] / (na * nb) - s * a[k] / (na * na));
  if (!db.empty())
    for (std::size_t k = 0; k < b.size(); ++k) db[k] += g * (a[k] / (na * nb) - s * b[k] / (nb * nb));
  return s;
}

}  // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "cosine inputs differ in length");
  return cosine_with_grad(a, b, 0.0, {}, {});
}

std::vector<std::size_t> choose_partners(std::span<const std::size_t> labels, CounterRng& rng) {
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::size_t> same;
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (j != i && labels[j] == labels[i]) same.push_back(j);
    out[i] = same.empty() ? i : same[static_cast<std::size_t>(rng.below(same.size()))];
  }
  return out;
}

std::vector<std::size_t> sample_negative_rows(std::size_t available, std::size_t limit, CounterRng& rng) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (available <= limit) return idx;
  rng.shuffle(idx);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double dis_loss(const Matrix& z, std::span<const std::size_t> partners, const Matrix& negatives, double temperature,
                Matrix* dz) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::kInvalidArgument, "temperature must be positive");
  require(partners.size() == z.rows(), ErrorCode::kShapeMismatch, "one partner per batch row required");
  if (dz) *dz = Matrix(z.rows(), z.cols());
  if (negatives.rows() == 0 || z.rows() == 0) return 0.0;
  require(negatives.cols() == z.cols(), ErrorCode::kShapeMismatch, "negatives and features differ in width");
  const double inv_t = 1.0 / temperature;
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const std::size_t c = partners[i];
    require(c < z.rows(), ErrorCode::kShapeMismatch, "partner index out of range");
    const std::size_t k = negatives.rows();
    std::vector<double> logits(k + 1);
    logits[0] = cosine_similarity(z.row(i), z.row(c)) * inv_t;
    for (std::size_t j = 0; j < k; ++j) logits[j + 1] = cosine_similarity(z.row(i), negatives.row(j)) * inv_t;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - mx);
    const double lse = mx + std::log(sum);
    total += lse - logits[0];
    if (!dz) continue;
    // ∂/∂logit_j = softmax_j − [j = 0], chained through s/T.
    const double g0 = (std::exp(logits[0] - lse) - 1.0) * inv_t * inv_b;
    if (c == i) {
      // Self-pair: cos(z, z) = 1 is constant in z.
    } else {
      cosine_with_grad(z.row(i), z.row(c), g0, dz->row(i), dz->row(c));
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double gj = std::exp(logits[j + 1] - lse) * inv_t * inv_b;
      cosine_with_grad(z.row(i), negatives.row(j), gj, dz->row(i), {});
    }
  }
  return total * inv_b;
}

double orth_loss(const Matrix& z, const Matrix& basis, Matrix* dz) {
  if (dz) *dz = Matrix(z.rows(), z.cols());
  if (basis.cols() == 0) return 0.0;
  require(basis.rows() == z.cols(), ErrorCode::kShapeMismatch, "basis and features differ in width");
  const Matrix coeff = matmul(z, basis);  // B×r, row i = Uᵀz_i
  if (dz) *dz = 2.0 * matmul_nt(coeff, basis);
  return frobenius_sq(coeff);
}

double reg_loss(const AdapterBank& bank, BankGradient* grad) {
  double total = 0.0;
  for (auto m : kAdapterModules) {
    const AdapterHalves& h = bank.module(m);
    require(h.curr.same_layout(h.pre), ErrorCode::kShapeMismatch, "curr and pre layouts differ");
    const auto c = h.curr.values();
    const auto p = h.pre.values();
    std::span<double> g;
    if (grad) {
      if (!grad->of(m).same_layout(h.curr)) grad->of(m) = h.curr.zeros_like();
      g = grad->of(m).values();
    }
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double d = c[k] - p[k];
      total += d * d;
      if (grad) g[k] += 2.0 * d;
    }
  }
  return total;
}

LossBreakdown total_loss(double cls, double dis, double orth, double reg, const LossWeights& w) {
  w.validate();
  for (double v : {cls, dis, orth, reg})
    require(std::isfinite(v), ErrorCode::kDivergence, "loss term is not finite");
  LossBreakdown out{cls, dis, orth, reg, 0.0};
  out.total = cls + w.eta * dis + w.upsilon * orth + w.lambda * reg;
  return out;
}

}  // namespace ntkcl
