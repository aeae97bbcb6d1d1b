#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ntkcl/linalg.hpp"
#include "ntkcl/param_vector.hpp"

namespace ntkcl {

/// (N+1)×D token matrix, class token in row 0.
using TokenSequence = Matrix;

struct BackboneConfig {
  std::uint64_t seed = 0;
  std::size_t width = 32;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t patches = 8;

  std::size_t tokens() const noexcept { return patches + 1; }
  std::size_t hidden() const noexcept { return 4 * width; }
  std::size_t head_dim() const noexcept { return width / heads; }
  void validate() const;
};

/// Pre-norm transformer: per block
///   u   = x + MSA(LN1(x))
///   out = u + W2·GELU(W1·LN2(u) + b1) + b2
/// and a final LayerNorm applied to the class token for features.
class ToyBackbone {
 public:
  struct Block {
    std::span<const double> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  ToyBackbone() = default;
  /// Seeded random init: attention/MLP weights N(0, 1/fan_in), norms (1, 0).
  static ToyBackbone random_init(const BackboneConfig& config);
  /// Every weight zero, including the norm scales.
  static ToyBackbone zeros(const BackboneConfig& config);
  static ToyBackbone from_params(const BackboneConfig& config, ParamVector params);

  const BackboneConfig& config() const noexcept { return config_; }
  const ParamVector& params() const noexcept { return params_; }
  /// Only valid before freeze(); throws afterwards.
  ParamVector& mutable_params();
  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  Block block(std::size_t b) const;
  std::span<const double> final_gain() const { return params_.view("lnf.g"); }
  std::span<const double> final_shift() const { return params_.view("lnf.b"); }

  static ParamVector layout(const BackboneConfig& config);

 private:
  BackboneConfig config_;
  ParamVector params_;
  bool frozen_ = false;
};

/// Side-channel adapter weights for one forward path. An S1 vector carries
/// per-block prompt generators ("block{b}.gen_w" D×QD, "block{b}.gen_b" QD);
/// an S2 vector carries per-block low-rank maps ("block{b}.low" D×r,
/// "block{b}.high" r×D).
struct PathHooks {
  const ParamVector* s1 = nullptr;
  std::size_t prompts = 0;
  const ParamVector* s2 = nullptr;
  std::size_t rank = 0;
};

struct LayerNormCache {
  Matrix normalized;           // x̂ before gain/shift
  std::vector<double> inv_std; // per row
};

struct BlockCache {
  Matrix input;
  LayerNormCache ln1;
  Matrix h, q, k, v;
  std::vector<Matrix> probs;  // per head, T×T
  // Prompts from the previous block, attended as extra keys/values.
  Matrix prompt_in, prompt_k, prompt_v;
  std::vector<Matrix> prompt_probs;  // per head, T×Q
  Matrix attn_concat;
  Matrix u;
  std::vector<double> pooled;
  Matrix prompts_out;  // q_i carried to the next block
  LayerNormCache ln2;
  Matrix g, hidden_pre, hidden_act;
  Matrix low;  // u·W_low
  Matrix out;
};

struct ForwardTrace {
  std::vector<BlockCache> blocks;
  Matrix out;
  LayerNormCache final_ln;  // over row 0 only
  std::vector<double> cls;
};

/// One block. `attended` are prompts used as extra keys/values in the MSA
/// (zero rows disables that branch); `carried` is q_prev for the S1 generator.
BlockCache block_step(const ToyBackbone& net, std::size_t block, const Matrix& x, const PathHooks& hooks,
                      const Matrix& attended, const Matrix& carried);

/// Residual-stream output of the last block (no final norm). Prompts are
/// reset to zero for every sample.
TokenSequence backbone_forward(const ToyBackbone& net, const TokenSequence& x, const PathHooks& hooks = {});
ForwardTrace forward_trace(const ToyBackbone& net, const TokenSequence& x, const PathHooks& hooks = {});
/// Final-norm class-token feature (width D).
std::vector<double> cls_feature(const ToyBackbone& net, const TokenSequence& x, const PathHooks& hooks = {});

/// Gradient sinks; null members are skipped. Each must share the layout of
/// the corresponding parameter vector and is accumulated into.
struct PathGrads {
  ParamVector* backbone = nullptr;
  ParamVector* s1 = nullptr;
  ParamVector* s2 = nullptr;
};

/// Reverse pass from a cotangent on the class feature.
void backward_cls(const ToyBackbone& net, const ForwardTrace& trace, const PathHooks& hooks,
                  std::span<const double> d_cls, const PathGrads& grads);

double gelu(double x);
double gelu_grad(double x);

struct LabeledSequence {
  TokenSequence tokens;
  int label = 0;
};

struct PretrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ToyBackbone net;
  Matrix head_w;             // D×C
  std::vector<double> head_b;  // C
  double final_loss = 0.0;
};

/// Adam on cross-entropy of a linear head over cls_feature; the returned
/// backbone is frozen. epochs = 0 returns the frozen random init.
PretrainResult pretrain_backbone(const BackboneConfig& config, std::span<const LabeledSequence> data,
                                 const PretrainOptions& options);

/// Accuracy of the pretraining head on held-out pretraining data.
double pretrain_accuracy(const PretrainResult& result, std::span<const LabeledSequence> data);

std::uint64_t fingerprint(const ParamVector& params);

}  // namespace ntkcl
