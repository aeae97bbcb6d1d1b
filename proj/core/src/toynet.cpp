#include "ntkcl/toynet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "ntkcl/error.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

namespace {

constexpr double kLayerNormEps = 1e-6;

std::string block_name(std::size_t b, const char* leaf) { return "block" + std::to_string(b) + "." + leaf; }

// out = x·W (+ bias), W row-major in×out.
Matrix linear(const Matrix& x, std::span<const double> w, std::size_t out_dim, std::span<const double> bias = {}) {
  const std::size_t in_dim = x.cols();
  Matrix out(x.rows(), out_dim);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto o = out.row(i);
    if (!bias.empty()) std::copy(bias.begin(), bias.end(), o.begin());
    auto xi = x.row(i);
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double a = xi[k];
      if (a == 0.0) continue;
      const double* wk = w.data() + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += a * wk[j];
    }
  }
  return out;
}

// dx = dy·Wᵀ
Matrix linear_input_grad(const Matrix& dy, std::span<const double> w, std::size_t in_dim) {
  const std::size_t out_dim = dy.cols();
  Matrix dx(dy.rows(), in_dim);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto dyi = dy.row(i);
    auto dxi = dx.row(i);
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double* wk = w.data() + k * out_dim;
      double s = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j) s += wk[j] * dyi[j];
      dxi[k] = s;
    }
  }
  return dx;
}

// dW += xᵀ·dy
void accumulate_weight_grad(const Matrix& x, const Matrix& dy, std::span<double> dw) {
  const std::size_t in_dim = x.cols();
  const std::size_t out_dim = dy.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    auto dyi = dy.row(i);
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double a = xi[k];
      if (a == 0.0) continue;
      double* dwk = dw.data() + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) dwk[j] += a * dyi[j];
    }
  }
}

void accumulate_bias_grad(const Matrix& dy, std::span<double> db) {
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto dyi = dy.row(i);
    for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += dyi[j];
  }
}

Matrix layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> shift,
                  LayerNormCache& cache) {
  const std::size_t d = x.cols();
  cache.normalized = Matrix(x.rows(), d);
  cache.inv_std.assign(x.rows(), 0.0);
  Matrix y(x.rows(), d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    double mean = 0.0;
    for (double v : xi) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xi[j] - mean) * inv;
      cache.normalized(i, j) = xh;
      y(i, j) = gain[j] * xh + shift[j];
    }
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, std::span<const double> gain,
                           double* dgain, double* dshift) {
  const std::size_t d = dy.cols();
  Matrix dx(dy.rows(), d);
  std::vector<double> dxh(d);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    auto xh = cache.normalized.row(i);
    double mean_dxh = 0.0;
    double mean_dxh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxh[j] = dy(i, j) * gain[j];
      mean_dxh += dxh[j];
      mean_dxh_xh += dxh[j] * xh[j];
      if (dgain != nullptr) dgain[j] += dy(i, j) * xh[j];
      if (dshift != nullptr) dshift[j] += dy(i, j);
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
  }
  return dx;
}

// Scaled dot-product attention for one head over column slice [c0, c0+dh).
// Returns row-softmax probabilities (rows of q against rows of k).
Matrix head_scores(const Matrix& q, const Matrix& k, std::size_t c0, std::size_t dh) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix s(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < k.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < dh; ++c) acc += q(i, c0 + c) * k(j, c0 + c);
      s(i, j) = acc * scale;
    }
  return softmax_rows(s);
}

void apply_head(const Matrix& probs, const Matrix& v, std::size_t c0, std::size_t dh, Matrix& out) {
  for (std::size_t i = 0; i < probs.rows(); ++i)
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double p = probs(i, j);
      for (std::size_t c = 0; c < dh; ++c) out(i, c0 + c) += p * v(j, c0 + c);
    }
}

// Backward of out_h = softmax(q_h·k_hᵀ/√dh)·v_h given d_out_h (column slice of d_out).
void head_backward(const Matrix& probs, const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& d_out,
                   std::size_t c0, std::size_t dh, Matrix& dq, Matrix& dk, Matrix& dv) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nq = probs.rows();
  const std::size_t nk = probs.cols();
  std::vector<double> dp(nk);
  for (std::size_t i = 0; i < nq; ++i) {
    double row_dot = 0.0;
    for (std::size_t j = 0; j < nk; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < dh; ++c) acc += d_out(i, c0 + c) * v(j, c0 + c);
      dp[j] = acc;
      row_dot += acc * probs(i, j);
      const double p = probs(i, j);
      for (std::size_t c = 0; c < dh; ++c) dv(j, c0 + c) += p * d_out(i, c0 + c);
    }
    for (std::size_t j = 0; j < nk; ++j) {
      const double ds = probs(i, j) * (dp[j] - row_dot) * scale;
      if (ds == 0.0) continue;
      for (std::size_t c = 0; c < dh; ++c) {
        dq(i, c0 + c) += ds * k(j, c0 + c);
        dk(j, c0 + c) += ds * q(i, c0 + c);
      }
    }
  }
}

double* grad_ptr(ParamVector* g, const std::string& name) {
  return g == nullptr ? nullptr : g->view(name).data();
}

}  // namespace

void BackboneConfig::validate() const {
  require(width > 0 && blocks > 0 && heads > 0 && patches > 0, ErrorCode::kInvalidArgument,
          "backbone dimensions must be positive");
  require(width % heads == 0, ErrorCode::kInvalidArgument, "heads must divide width");
}

ParamVector ToyBackbone::layout(const BackboneConfig& c) {
  c.validate();
  ParamVector p;
  const std::size_t d = c.width;
  const std::size_t f = c.hidden();
  for (std::size_t b = 0; b < c.blocks; ++b) {
    p.add(block_name(b, "ln1.g"), d);
    p.add(block_name(b, "ln1.b"), d);
    p.add(block_name(b, "wq"), d * d);
    p.add(block_name(b, "wk"), d * d);
    p.add(block_name(b, "wv"), d * d);
    p.add(block_name(b, "wo"), d * d);
    p.add(block_name(b, "ln2.g"), d);
    p.add(block_name(b, "ln2.b"), d);
    p.add(block_name(b, "w1"), d * f);
    p.add(block_name(b, "b1"), f);
    p.add(block_name(b, "w2"), f * d);
    p.add(block_name(b, "b2"), d);
  }
  p.add("lnf.g", d);
  p.add("lnf.b", d);
  return p;
}

ToyBackbone ToyBackbone::zeros(const BackboneConfig& config) {
  ToyBackbone net;
  net.config_ = config;
  net.params_ = layout(config);
  return net;
}

ToyBackbone ToyBackbone::random_init(const BackboneConfig& config) {
  ToyBackbone net = zeros(config);
  CounterRng rng = CounterRng(config.seed).fork("backbone-init");
  const double d = static_cast<double>(config.width);
  const double f = static_cast<double>(config.hidden());
  auto fill_normal = [&](const std::string& name, double stddev) {
    for (double& v : net.params_.view(name)) v = stddev * rng.normal();
  };
  auto fill_const = [&](const std::string& name, double value) {
    for (double& v : net.params_.view(name)) v = value;
  };
  for (std::size_t b = 0; b < config.blocks; ++b) {
    fill_const(block_name(b, "ln1.g"), 1.0);
    fill_const(block_name(b, "ln2.g"), 1.0);
    for (const char* w : {"wq", "wk", "wv", "wo"}) fill_normal(block_name(b, w), 1.0 / std::sqrt(d));
    fill_normal(block_name(b, "w1"), 1.0 / std::sqrt(d));
    fill_normal(block_name(b, "w2"), 1.0 / std::sqrt(f));
  }
  fill_const("lnf.g", 1.0);
  return net;
}

ToyBackbone ToyBackbone::from_params(const BackboneConfig& config, ParamVector params) {
  ToyBackbone net = zeros(config);
  require(net.params_.same_layout(params), ErrorCode::kShapeMismatch, "parameter layout does not match config");
  net.params_ = std::move(params);
  return net;
}

ParamVector& ToyBackbone::mutable_params() {
  require(!frozen_, ErrorCode::kInvalidArgument, "backbone is frozen");
  return params_;
}

ToyBackbone::Block ToyBackbone::block(std::size_t b) const {
  require(b < config_.blocks, ErrorCode::kShapeMismatch, "block index out of range");
  return Block{params_.view(block_name(b, "ln1.g")), params_.view(block_name(b, "ln1.b")),
               params_.view(block_name(b, "wq")),    params_.view(block_name(b, "wk")),
               params_.view(block_name(b, "wv")),    params_.view(block_name(b, "wo")),
               params_.view(block_name(b, "ln2.g")), params_.view(block_name(b, "ln2.b")),
               params_.view(block_name(b, "w1")),    params_.view(block_name(b, "b1")),
               params_.view(block_name(b, "w2")),    params_.view(block_name(b, "b2"))};
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

BlockCache block_step(const ToyBackbone& net, std::size_t b, const Matrix& x, const PathHooks& hooks,
                      const Matrix& attended, const Matrix& carried) {
  const BackboneConfig& c = net.config();
  const std::size_t d = c.width;
  const std::size_t t = c.tokens();
  const std::size_t dh = c.head_dim();
  require(x.rows() == t && x.cols() == d, ErrorCode::kShapeMismatch, "block input has wrong shape");
  const bool prompt_attention = hooks.s1 != nullptr && attended.rows() > 0;
  if (prompt_attention)
    require(attended.cols() == d, ErrorCode::kShapeMismatch, "attended prompts have wrong width");
  if (hooks.s1 != nullptr)
    require(carried.rows() == hooks.prompts && carried.cols() == d, ErrorCode::kShapeMismatch,
            "carried prompts must be Q x D");

  const auto w = net.block(b);
  BlockCache bc;
  bc.input = x;
  bc.h = layer_norm(x, w.ln1_g, w.ln1_b, bc.ln1);
  bc.q = linear(bc.h, w.wq, d);
  bc.k = linear(bc.h, w.wk, d);
  bc.v = linear(bc.h, w.wv, d);
  bc.attn_concat = Matrix(t, d);
  bc.probs.resize(c.heads);
  if (prompt_attention) {
    bc.prompt_in = attended;
    bc.prompt_k = linear(attended, w.wk, d);
    bc.prompt_v = linear(attended, w.wv, d);
    bc.prompt_probs.resize(c.heads);
  }
  for (std::size_t hd = 0; hd < c.heads; ++hd) {
    bc.probs[hd] = head_scores(bc.q, bc.k, hd * dh, dh);
    apply_head(bc.probs[hd], bc.v, hd * dh, dh, bc.attn_concat);
    if (prompt_attention) {
      bc.prompt_probs[hd] = head_scores(bc.q, bc.prompt_k, hd * dh, dh);
      apply_head(bc.prompt_probs[hd], bc.prompt_v, hd * dh, dh, bc.attn_concat);
    }
  }
  bc.u = x + linear(bc.attn_concat, w.wo, d);

  if (hooks.s1 != nullptr) {
    bc.pooled.assign(d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) bc.pooled[j] += bc.u(i, j) / static_cast<double>(t);
    const Matrix pooled_row(1, d, bc.pooled);
    const Matrix gen = linear(pooled_row, hooks.s1->view(block_name(b, "gen_w")), hooks.prompts * d,
                              hooks.s1->view(block_name(b, "gen_b")));
    bc.prompts_out = Matrix(hooks.prompts, d, std::vector<double>(gen.data().begin(), gen.data().end()));
    for (std::size_t i = 0; i < bc.prompts_out.size(); ++i) bc.prompts_out.data()[i] += carried.data()[i];
  }

  // Feed-forward is per token, so prompt rows inserted next to the tokens
  // would not change token rows; they are stripped after the block and only
  // the token rows are evaluated.
  bc.g = layer_norm(bc.u, w.ln2_g, w.ln2_b, bc.ln2);
  bc.hidden_pre = linear(bc.g, w.w1, c.hidden(), w.b1);
  bc.hidden_act = bc.hidden_pre;
  for (double& v : bc.hidden_act.data()) v = gelu(v);
  bc.out = bc.u + linear(bc.hidden_act, w.w2, d, w.b2);

  if (hooks.s2 != nullptr) {
    bc.low = linear(bc.u, hooks.s2->view(block_name(b, "low")), hooks.rank);
    bc.out = bc.out + linear(bc.low, hooks.s2->view(block_name(b, "high")), d);
  }
  return bc;
}

ForwardTrace forward_trace(const ToyBackbone& net, const TokenSequence& x, const PathHooks& hooks) {
  const BackboneConfig& c = net.config();
  const std::size_t d = c.width;
  const std::size_t t = c.tokens();
  require(x.rows() == t && x.cols() == d, ErrorCode::kShapeMismatch,
          "token sequence is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) + ", backbone expects " +
              std::to_string(t) + "x" + std::to_string(d));
  if (hooks.s1 != nullptr) {
    require(hooks.prompts > 0, ErrorCode::kShapeMismatch, "S1 hooks need a positive prompt count");
    require(hooks.s1->has(block_name(c.blocks - 1, "gen_w")), ErrorCode::kShapeMismatch,
            "S1 hook points do not match block count");
  }
  if (hooks.s2 != nullptr) {
    require(hooks.rank > 0, ErrorCode::kShapeMismatch, "S2 hooks need a positive rank");
    require(hooks.s2->has(block_name(c.blocks - 1, "low")), ErrorCode::kShapeMismatch,
            "S2 hook points do not match block count");
  }

  ForwardTrace tr;
  tr.blocks.resize(c.blocks);
  Matrix cur = x;
  Matrix carried = hooks.s1 != nullptr ? Matrix(hooks.prompts, d) : Matrix();
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const Matrix attended = hooks.s1 != nullptr && b > 0 ? carried : Matrix();
    tr.blocks[b] = block_step(net, b, cur, hooks, attended, carried);
    if (hooks.s1 != nullptr) carried = tr.blocks[b].prompts_out;
    cur = tr.blocks[b].out;
  }
  tr.out = cur;
  const Matrix cls_row(1, d, std::vector<double>(cur.row(0).begin(), cur.row(0).end()));
  const Matrix normed = layer_norm(cls_row, net.final_gain(), net.final_shift(), tr.final_ln);
  tr.cls.assign(normed.data().begin(), normed.data().end());
  return tr;
}

TokenSequence backbone_forward(const ToyBackbone& net, const TokenSequence& x, const PathHooks& hooks) {
  return forward_trace(net, x, hooks).out;
}

std::vector<double> cls_feature(const ToyBackbone& net, const TokenSequence& x, const PathHooks& hooks) {
  return forward_trace(net, x, hooks).cls;
}

void backward_cls(const ToyBackbone& net, const ForwardTrace& tr, const PathHooks& hooks,
                  std::span<const double> d_cls, const PathGrads& grads) {
  const BackboneConfig& c = net.config();
  const std::size_t d = c.width;
  const std::size_t t = c.tokens();
  const std::size_t dh = c.head_dim();
  require(d_cls.size() == d, ErrorCode::kShapeMismatch, "class-feature cotangent has wrong width");
  ParamVector* gb = grads.backbone;

  Matrix d_out(t, d);
  {
    const Matrix dy(1, d, std::vector<double>(d_cls.begin(), d_cls.end()));
    const Matrix dx = layer_norm_backward(dy, tr.final_ln, net.final_gain(), grad_ptr(gb, "lnf.g"),
                                          grad_ptr(gb, "lnf.b"));
    for (std::size_t j = 0; j < d; ++j) d_out(0, j) = dx(0, j);
  }
  Matrix d_prompts_out = hooks.s1 != nullptr ? Matrix(hooks.prompts, d) : Matrix();

  for (std::size_t b = c.blocks; b-- > 0;) {
    const auto w = net.block(b);
    const BlockCache& bc = tr.blocks[b];
    Matrix du = d_out;

    if (hooks.s2 != nullptr) {
      const auto high = hooks.s2->view(block_name(b, "high"));
      const auto low = hooks.s2->view(block_name(b, "low"));
      const Matrix d_low = linear_input_grad(d_out, high, hooks.rank);
      if (grads.s2 != nullptr) {
        accumulate_weight_grad(bc.low, d_out, grads.s2->view(block_name(b, "high")));
        accumulate_weight_grad(bc.u, d_low, grads.s2->view(block_name(b, "low")));
      }
      du = du + linear_input_grad(d_low, low, d);
    }

    // Feed-forward.
    {
      if (gb != nullptr) {
        accumulate_weight_grad(bc.hidden_act, d_out, gb->view(block_name(b, "w2")));
        accumulate_bias_grad(d_out, gb->view(block_name(b, "b2")));
      }
      Matrix d_pre = linear_input_grad(d_out, w.w2, c.hidden());
      for (std::size_t i = 0; i < d_pre.size(); ++i) d_pre.data()[i] *= gelu_grad(bc.hidden_pre.data()[i]);
      if (gb != nullptr) {
        accumulate_weight_grad(bc.g, d_pre, gb->view(block_name(b, "w1")));
        accumulate_bias_grad(d_pre, gb->view(block_name(b, "b1")));
      }
      const Matrix d_g = linear_input_grad(d_pre, w.w1, d);
      du = du + layer_norm_backward(d_g, bc.ln2, w.ln2_g, grad_ptr(gb, block_name(b, "ln2.g")),
                                    grad_ptr(gb, block_name(b, "ln2.b")));
    }

    Matrix d_prompts_in;
    if (hooks.s1 != nullptr) {
      const auto gen_w = hooks.s1->view(block_name(b, "gen_w"));
      const std::size_t qd = hooks.prompts * d;
      const auto dq = d_prompts_out.data();
      if (grads.s1 != nullptr) {
        auto dgw = grads.s1->view(block_name(b, "gen_w"));
        auto dgb = grads.s1->view(block_name(b, "gen_b"));
        for (std::size_t k = 0; k < d; ++k)
          for (std::size_t j = 0; j < qd; ++j) dgw[k * qd + j] += bc.pooled[k] * dq[j];
        for (std::size_t j = 0; j < qd; ++j) dgb[j] += dq[j];
      }
      for (std::size_t k = 0; k < d; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < qd; ++j) s += gen_w[k * qd + j] * dq[j];
        s /= static_cast<double>(t);
        for (std::size_t i = 0; i < t; ++i) du(i, k) += s;
      }
      d_prompts_in = d_prompts_out;  // residual carry
    }

    // u = x + concat·Wo
    Matrix d_in = du;
    if (gb != nullptr) accumulate_weight_grad(bc.attn_concat, du, gb->view(block_name(b, "wo")));
    const Matrix d_concat = linear_input_grad(du, w.wo, d);
    Matrix dq(t, d), dk(t, d), dv(t, d);
    const bool prompt_attention = !bc.prompt_probs.empty();
    Matrix dkp, dvp;
    if (prompt_attention) {
      dkp = Matrix(bc.prompt_in.rows(), d);
      dvp = Matrix(bc.prompt_in.rows(), d);
    }
    for (std::size_t hd = 0; hd < c.heads; ++hd) {
      head_backward(bc.probs[hd], bc.q, bc.k, bc.v, d_concat, hd * dh, dh, dq, dk, dv);
      if (prompt_attention)
        head_backward(bc.prompt_probs[hd], bc.q, bc.prompt_k, bc.prompt_v, d_concat, hd * dh, dh, dq, dkp, dvp);
    }
    if (gb != nullptr) {
      accumulate_weight_grad(bc.h, dq, gb->view(block_name(b, "wq")));
      accumulate_weight_grad(bc.h, dk, gb->view(block_name(b, "wk")));
      accumulate_weight_grad(bc.h, dv, gb->view(block_name(b, "wv")));
      if (prompt_attention) {
        accumulate_weight_grad(bc.prompt_in, dkp, gb->view(block_name(b, "wk")));
        accumulate_weight_grad(bc.prompt_in, dvp, gb->view(block_name(b, "wv")));
      }
    }
    const Matrix dh_total = linear_input_grad(dq, w.wq, d) + linear_input_grad(dk, w.wk, d) +
                            linear_input_grad(dv, w.wv, d);
    d_in = d_in + layer_norm_backward(dh_total, bc.ln1, w.ln1_g, grad_ptr(gb, block_name(b, "ln1.g")),
                                      grad_ptr(gb, block_name(b, "ln1.b")));
    if (prompt_attention) {
      d_prompts_in = d_prompts_in + linear_input_grad(dkp, w.wk, d) + linear_input_grad(dvp, w.wv, d);
    }
    d_out = std::move(d_in);
    if (hooks.s1 != nullptr) d_prompts_out = std::move(d_prompts_in);
  }
}

namespace {

struct Adam {
  std::vector<double> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;

  explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  void apply(std::span<double> params, std::span<const double> grad, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

std::vector<double> head_logits(const Matrix& w, std::span<const double> b, std::span<const double> feat) {
  std::vector<double> z(b.begin(), b.end());
  for (std::size_t k = 0; k < feat.size(); ++k)
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += feat[k] * w(k, j);
  return z;
}

}  // namespace

PretrainResult pretrain_backbone(const BackboneConfig& config, std::span<const LabeledSequence> data,
                                 const PretrainOptions& options) {
  require(!data.empty(), ErrorCode::kInvalidArgument, "pretraining data is empty");
  int max_label = 0;
  for (const auto& s : data) {
    require(s.label >= 0, ErrorCode::kUnknownLabel, "negative pretraining label");
    max_label = std::max(max_label, s.label);
  }
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  const std::size_t d = config.width;

  PretrainResult result;
  BackboneConfig cfg = config;
  ToyBackbone net = ToyBackbone::random_init(cfg);
  CounterRng rng = CounterRng(options.seed).fork("pretrain");
  result.head_w = Matrix(d, classes);
  for (double& v : result.head_w.data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
  result.head_b.assign(classes, 0.0);

  Adam opt_net(net.params().size());
  Adam opt_head(result.head_w.size() + classes);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::size_t end = std::min(order.size(), start + options.batch);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      ParamVector g_net = net.params().zeros_like();
      std::vector<double> g_head(result.head_w.size() + classes, 0.0);
      for (std::size_t idx = start; idx < end; ++idx) {
        const LabeledSequence& s = data[order[idx]];
        const ForwardTrace tr = forward_trace(net, s.tokens);
        std::vector<double> z = head_logits(result.head_w, result.head_b, tr.cls);
        const double mx = *std::max_element(z.begin(), z.end());
        double zsum = 0.0;
        for (double& v : z) {
          v = std::exp(v - mx);
          zsum += v;
        }
        for (double& v : z) v /= zsum;
        const double loss = -std::log(std::max(z[static_cast<std::size_t>(s.label)], 1e-300));
        if (!std::isfinite(loss)) throw Error(ErrorCode::kDivergence, "pretraining loss is not finite");
        epoch_loss += loss;
        z[static_cast<std::size_t>(s.label)] -= 1.0;
        std::vector<double> d_cls(d, 0.0);
        for (std::size_t k = 0; k < d; ++k)
          for (std::size_t j = 0; j < classes; ++j) {
            g_head[k * classes + j] += inv_batch * tr.cls[k] * z[j];
            d_cls[k] += inv_batch * result.head_w(k, j) * z[j];
          }
        for (std::size_t j = 0; j < classes; ++j) g_head[result.head_w.size() + j] += inv_batch * z[j];
        backward_cls(net, tr, {}, d_cls, PathGrads{&g_net, nullptr, nullptr});
      }
      if (!all_finite(g_net.values())) throw Error(ErrorCode::kDivergence, "pretraining gradient is not finite");
      opt_net.apply(net.mutable_params().values(), g_net.values(), options.learning_rate);
      std::vector<double> head_params(result.head_w.data().begin(), result.head_w.data().end());
      head_params.insert(head_params.end(), result.head_b.begin(), result.head_b.end());
      opt_head.apply(head_params, g_head, options.learning_rate);
      std::copy(head_params.begin(), head_params.begin() + static_cast<std::ptrdiff_t>(result.head_w.size()),
                result.head_w.data().begin());
      std::copy(head_params.begin() + static_cast<std::ptrdiff_t>(result.head_w.size()), head_params.end(),
                result.head_b.begin());
    }
    result.final_loss = epoch_loss / static_cast<double>(data.size());
    if (!std::isfinite(result.final_loss)) throw Error(ErrorCode::kDivergence, "pretraining loss is not finite");
  }
  net.freeze();
  result.net = std::move(net);
  return result;
}

double pretrain_accuracy(const PretrainResult& result, std::span<const LabeledSequence> data) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : data) {
    const auto z = head_logits(result.head_w, result.head_b, cls_feature(result.net, s.tokens));
    const auto arg = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    if (arg == s.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::uint64_t fingerprint(const ParamVector& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : params.values()) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffULL;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace ntkcl
