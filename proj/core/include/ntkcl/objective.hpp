#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "ntkcl/adapters.hpp"
#include "ntkcl/linalg.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

struct LossWeights {
  double eta = 0.03;       // dissimilarity
  double upsilon = 0.0001; // orthogonality
  double lambda = 0.001;   // regularization
  void validate() const;
};

struct LossBreakdown {
  double cls = 0.0;
  double dis = 0.0;
  double orth = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr std::size_t kMaxNegatives = 64;

/// logits = W·e + b over all classes; W is C×F.
struct LinearHead {
  Matrix weight;
  std::vector<double> bias;

  static LinearHead zeros(std::size_t classes, std::size_t features);
  std::size_t classes() const noexcept { return weight.rows(); }
  std::size_t features() const noexcept { return weight.cols(); }
  std::vector<double> logits(std::span<const double> features) const;
};

/// Heads for the S1, S2 and hybrid branches, in that order.
using BranchHeads = std::array<LinearHead, 3>;

/// Cross-entropy over the classes where mask is true. Writes ∂/∂logits
/// (zero outside the mask) when d_logits is non-empty.
double masked_cross_entropy(std::span<const double> logits, std::size_t label, const std::vector<bool>& mask,
                            std::span<double> d_logits = {});

struct ClsGradients {
  FeatureTriple features;  // ∂L/∂E per branch, accumulated
  std::array<LinearHead, 3> heads;
};

/// CE(E_S1) + CE(E_S2) + CE(E_HAE), each over masked logits.
double cls_loss(const FeatureTriple& triple, const BranchHeads& heads, std::size_t label, const std::vector<bool>& mask,
                ClsGradients* grads = nullptr);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// A same-label batch partner per row, uniform over the other members, itself
/// when the label is unique in the batch.
std::vector<std::size_t> choose_partners(std::span<const std::size_t> labels, CounterRng& rng);

/// Up to `limit` distinct row indices out of `available`, uniformly without replacement.
std::vector<std::size_t> sample_negative_rows(std::size_t available, std::size_t limit, CounterRng& rng);

/// −(1/B) Σ_i log[e^{s(z_i,z_{c_i})/T} / (e^{s(z_i,z_{c_i})/T} + Σ_j e^{s(z_i,ζ_j)/T})]
/// with cosine s. Zero when `negatives` has no rows. dz receives ∂L/∂Z.
double dis_loss(const Matrix& z, std::span<const std::size_t> partners, const Matrix& negatives, double temperature,
                Matrix* dz = nullptr);

/// Σ_i ‖Uᵀz_i‖² for the orthonormal columns of U; zero when U has no columns.
double orth_loss(const Matrix& z, const Matrix& basis, Matrix* dz = nullptr);

/// Σ over modules of ‖curr − pre‖²; adds 2(curr − pre) into grad->of(m).
double reg_loss(const AdapterBank& bank, BankGradient* grad = nullptr);

LossBreakdown total_loss(double cls, double dis, double orth, double reg, const LossWeights& weights);

}  // namespace ntkcl
