#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ntkcl/linalg.hpp"
#include "ntkcl/param_vector.hpp"
#include "ntkcl/toynet.hpp"

namespace ntkcl {

struct AdapterConfig {
  std::size_t prompts = 4;       // Q
  std::size_t rank = 4;          // r, must stay below D
  std::size_t fusion_heads = 4;  // must divide D
  std::uint64_t seed = 0;
};

enum class AdapterModule : std::size_t { kS1 = 0, kS2 = 1, kHybrid = 2 };
inline constexpr std::array<AdapterModule, 3> kAdapterModules = {AdapterModule::kS1, AdapterModule::kS2,
                                                                 AdapterModule::kHybrid};
std::string module_name(AdapterModule m);

struct AdapterHalves {
  ParamVector pre;   // frozen during a task
  ParamVector curr;  // trainable
};

/// Trainable side of the model: S1 prompt generators, S2 low-rank maps and the
/// hybrid fusion attention, each split into pre (retained knowledge) and curr.
class AdapterBank {
 public:
  AdapterBank() = default;
  /// Zero prompt generators and W_high, seeded W_low, fusion V/O maps at
  /// identity with small seeded Q/K; pre starts equal to curr.
  static AdapterBank initialize(const BackboneConfig& backbone, const AdapterConfig& config);

  const AdapterConfig& config() const noexcept { return config_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t blocks() const noexcept { return blocks_; }

  AdapterHalves& module(AdapterModule m) { return halves_[static_cast<std::size_t>(m)]; }
  const AdapterHalves& module(AdapterModule m) const { return halves_[static_cast<std::size_t>(m)]; }

  static ParamVector s1_layout(std::size_t width, std::size_t blocks, std::size_t prompts);
  static ParamVector s2_layout(std::size_t width, std::size_t blocks, std::size_t rank);
  static ParamVector hybrid_layout(std::size_t width);

  bool operator==(const AdapterBank& other) const;

 private:
  AdapterConfig config_;
  std::size_t width_ = 0;
  std::size_t blocks_ = 0;
  std::array<AdapterHalves, 3> halves_;
};

/// One bank-shaped gradient: curr halves only (pre never receives updates).
struct BankGradient {
  std::array<ParamVector, 3> curr;
  ParamVector& of(AdapterModule m) { return curr[static_cast<std::size_t>(m)]; }
  const ParamVector& of(AdapterModule m) const { return curr[static_cast<std::size_t>(m)]; }
  static BankGradient zeros_like(const AdapterBank& bank);
};

struct S1BlockResult {
  Matrix tokens;   // block output on the prompt-free positions, (N+1)×D
  Matrix prompts;  // q_i, Q×D
};

/// Single-block S1 step around a pretrained block: q_i = reshape(mean(u)·G + g) + q_prev,
/// then the pretrained feed-forward on the token rows. `prompts_in` are the
/// prompts attended as extra keys/values in this block's MSA (empty for block 0).
S1BlockResult s1_forward(const ToyBackbone& net, std::size_t block, const TokenSequence& x,
                         const Matrix& prompts_in, const Matrix& q_prev, const ParamVector& s1, std::size_t prompts);

/// Single-block S2 step: out = u + FFN(u) + W_high·W_low·u per token.
Matrix s2_forward(const ToyBackbone& net, std::size_t block, const TokenSequence& x, const ParamVector& s2,
                  std::size_t rank);

struct FusionTrace {
  Matrix queries, keys;   // 2×D token grids (pre half, curr half)
  Matrix q, k, v;         // projected
  std::vector<Matrix> probs;  // per head 2×2
  Matrix heads_out;       // 2×D
  std::vector<double> mean;   // D
  std::vector<double> out;    // D
};

/// Multi-head attention from the two halves of E_S1 (queries) onto the two
/// halves of E_S2 (keys/values), output tokens averaged then mapped by Wo.
FusionTrace hybrid_trace(std::span<const double> e_s1, std::span<const double> e_s2, const ParamVector& hybrid,
                         std::size_t heads);
std::vector<double> hybrid_fuse(std::span<const double> e_s1, std::span<const double> e_s2,
                                const ParamVector& hybrid, std::size_t heads);
/// Accumulates parameter gradients (optional) and input cotangents.
void hybrid_backward(const FusionTrace& trace, const ParamVector& hybrid, std::size_t heads,
                     std::span<const double> d_out, ParamVector* d_hybrid, std::span<double> d_e_s1,
                     std::span<double> d_e_s2);

struct FeatureTriple {
  std::vector<double> s1;      // 2D: pre ‖ curr
  std::vector<double> s2;      // 2D
  std::vector<double> hybrid;  // 2D
};

struct TripleTrace {
  std::array<ForwardTrace, 4> paths;  // s1 pre, s1 curr, s2 pre, s2 curr
  std::array<FusionTrace, 2> fusion;  // pre, curr
  FeatureTriple features;
};

TripleTrace triple_trace(const ToyBackbone& net, const AdapterBank& bank, const TokenSequence& x);
FeatureTriple triple_features(const ToyBackbone& net, const AdapterBank& bank, const TokenSequence& x);

/// Cotangents on the three features and where to put the results. `curr`
/// receives curr-half gradients; `pre` (optional) receives pre-half ones.
struct TripleGrads {
  BankGradient* curr = nullptr;
  BankGradient* pre = nullptr;
  ParamVector* backbone = nullptr;
};
void triple_backward(const ToyBackbone& net, const AdapterBank& bank, const TripleTrace& trace,
                     std::span<const double> d_s1, std::span<const double> d_s2, std::span<const double> d_hybrid,
                     const TripleGrads& grads);

struct EmaCoefficients {
  double k1 = 0.0;
  double k2 = 1.0;
};

/// k(0) = (0, 1); otherwise k2 = 1/(n+1), k1 = k2 / k2(n-1) = n/(n+1).
EmaCoefficients ema_coefficients(std::size_t completed);

/// p_pre' = k1(tau)·p_pre + k2(tau)·p_curr.
ParamVector ema_update(const ParamVector& pre, const ParamVector& curr, std::size_t tau);

/// Applies ema_update to every module of the bank.
void ema_update_bank(AdapterBank& bank, std::size_t tau);

}  // namespace ntkcl
