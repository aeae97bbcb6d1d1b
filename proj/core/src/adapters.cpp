#include "ntkcl/adapters.hpp"

#include <cmath>

#include "ntkcl/error.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

namespace {

std::string block_name(std::size_t b, const char* leaf) { return "block" + std::to_string(b) + "." + leaf; }

Matrix as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return Matrix(rows, cols, std::vector<double>(v.begin(), v.end()));
}

Matrix two_tokens(std::span<const double> e, std::size_t d) {
  require(e.size() == 2 * d, ErrorCode::kShapeMismatch,
          "fusion input has width " + std::to_string(e.size()) + ", expected " + std::to_string(2 * d));
  return as_matrix(e, 2, d);
}

void add_into(std::span<double> dst, const Matrix& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src.data()[i];
}

std::vector<double> concat(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

std::string module_name(AdapterModule m) {
  switch (m) {
    case AdapterModule::kS1:
      return "s1";
    case AdapterModule::kS2:
      return "s2";
    case AdapterModule::kHybrid:
      return "hae";
  }
  return "unknown";
}

ParamVector AdapterBank::s1_layout(std::size_t width, std::size_t blocks, std::size_t prompts) {
  require(prompts >= 1, ErrorCode::kShapeMismatch, "prompt count must be at least 1");
  ParamVector p;
  for (std::size_t b = 0; b < blocks; ++b) {
    p.add(block_name(b, "gen_w"), width * prompts * width);
    p.add(block_name(b, "gen_b"), prompts * width);
  }
  return p;
}

ParamVector AdapterBank::s2_layout(std::size_t width, std::size_t blocks, std::size_t rank) {
  require(rank >= 1, ErrorCode::kShapeMismatch, "rank must be at least 1");
  ParamVector p;
  for (std::size_t b = 0; b < blocks; ++b) {
    p.add(block_name(b, "low"), width * rank);
    p.add(block_name(b, "high"), rank * width);
  }
  return p;
}

ParamVector AdapterBank::hybrid_layout(std::size_t width) {
  ParamVector p;
  for (const char* name : {"wq", "wk", "wv", "wo"}) p.add(name, width * width);
  return p;
}

AdapterBank AdapterBank::initialize(const BackboneConfig& backbone, const AdapterConfig& config) {
  backbone.validate();
  const std::size_t d = backbone.width;
  require(config.prompts >= 1, ErrorCode::kShapeMismatch, "prompt count must be at least 1");
  require(config.rank >= 1 && config.rank < d, ErrorCode::kShapeMismatch, "rank must satisfy 1 <= r < D");
  require(config.fusion_heads >= 1 && d % config.fusion_heads == 0, ErrorCode::kShapeMismatch,
          "fusion heads must divide D");

  AdapterBank bank;
  bank.config_ = config;
  bank.width_ = d;
  bank.blocks_ = backbone.blocks;
  CounterRng rng = CounterRng(config.seed).fork("adapter-init");

  ParamVector s1 = s1_layout(d, backbone.blocks, config.prompts);

  ParamVector s2 = s2_layout(d, backbone.blocks, config.rank);
  const double low_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t b = 0; b < backbone.blocks; ++b)
    for (double& v : s2.view(block_name(b, "low"))) v = low_std * rng.normal();

  ParamVector hy = hybrid_layout(d);
  const double qk_std = 0.1 / std::sqrt(static_cast<double>(d));
  for (const char* name : {"wq", "wk"})
    for (double& v : hy.view(name)) v = qk_std * rng.normal();
  for (const char* name : {"wv", "wo"}) {
    auto w = hy.view(name);
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
  }

  bank.module(AdapterModule::kS1) = {s1, s1};
  bank.module(AdapterModule::kS2) = {s2, s2};
  bank.module(AdapterModule::kHybrid) = {hy, hy};
  return bank;
}

bool AdapterBank::operator==(const AdapterBank& other) const {
  if (width_ != other.width_ || blocks_ != other.blocks_) return false;
  for (std::size_t i = 0; i < halves_.size(); ++i)
    if (!(halves_[i].pre == other.halves_[i].pre) || !(halves_[i].curr == other.halves_[i].curr)) return false;
  return true;
}

BankGradient BankGradient::zeros_like(const AdapterBank& bank) {
  BankGradient g;
  for (AdapterModule m : kAdapterModules) g.of(m) = bank.module(m).curr.zeros_like();
  return g;
}

S1BlockResult s1_forward(const ToyBackbone& net, std::size_t block, const TokenSequence& x,
                         const Matrix& prompts_in, const Matrix& q_prev, const ParamVector& s1, std::size_t prompts) {
  const std::size_t d = net.config().width;
  require(prompts >= 1, ErrorCode::kShapeMismatch, "prompt count must be at least 1");
  const std::string gw = block_name(block, "gen_w");
  const std::string gb = block_name(block, "gen_b");
  require(s1.has(gw) && s1.has(gb) && s1.segment(gw).length == d * prompts * d &&
              s1.segment(gb).length == prompts * d,
          ErrorCode::kShapeMismatch, "S1 generator does not match block " + std::to_string(block));
  const BlockCache bc = block_step(net, block, x, PathHooks{&s1, prompts, nullptr, 0}, prompts_in, q_prev);
  return {bc.out, bc.prompts_out};
}

Matrix s2_forward(const ToyBackbone& net, std::size_t block, const TokenSequence& x, const ParamVector& s2,
                  std::size_t rank) {
  const std::size_t d = net.config().width;
  require(rank >= 1 && rank <= d, ErrorCode::kShapeMismatch, "rank out of range");
  const std::string lo = block_name(block, "low");
  const std::string hi = block_name(block, "high");
  require(s2.has(lo) && s2.has(hi) && s2.segment(lo).length == d * rank && s2.segment(hi).length == rank * d,
          ErrorCode::kShapeMismatch, "S2 maps do not match block " + std::to_string(block));
  return block_step(net, block, x, PathHooks{nullptr, 0, &s2, rank}, Matrix(), Matrix()).out;
}

FusionTrace hybrid_trace(std::span<const double> e_s1, std::span<const double> e_s2, const ParamVector& hybrid,
                         std::size_t heads) {
  require(hybrid.has("wq") && hybrid.has("wo"), ErrorCode::kShapeMismatch, "not a fusion parameter vector");
  const std::size_t d2 = hybrid.segment("wq").length;
  const auto d = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d2))));
  require(d * d == d2, ErrorCode::kShapeMismatch, "fusion maps are not square");
  require(heads >= 1 && d % heads == 0, ErrorCode::kShapeMismatch, "fusion heads must divide D");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  FusionTrace tr;
  tr.queries = two_tokens(e_s1, d);
  tr.keys = two_tokens(e_s2, d);
  tr.q = matmul(tr.queries, as_matrix(hybrid.view("wq"), d, d));
  tr.k = matmul(tr.keys, as_matrix(hybrid.view("wk"), d, d));
  tr.v = matmul(tr.keys, as_matrix(hybrid.view("wv"), d, d));
  tr.heads_out = Matrix(2, d);
  tr.probs.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    Matrix s(2, 2);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += tr.q(i, c0 + c) * tr.k(j, c0 + c);
        s(i, j) = acc * scale;
      }
    tr.probs[h] = softmax_rows(s);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t c = 0; c < dh; ++c) tr.heads_out(i, c0 + c) += tr.probs[h](i, j) * tr.v(j, c0 + c);
  }
  tr.mean.assign(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) tr.mean[c] = 0.5 * (tr.heads_out(0, c) + tr.heads_out(1, c));
  const Matrix out = matmul(Matrix(1, d, tr.mean), as_matrix(hybrid.view("wo"), d, d));
  tr.out.assign(out.data().begin(), out.data().end());
  return tr;
}

std::vector<double> hybrid_fuse(std::span<const double> e_s1, std::span<const double> e_s2,
                                const ParamVector& hybrid, std::size_t heads) {
  return hybrid_trace(e_s1, e_s2, hybrid, heads).out;
}

void hybrid_backward(const FusionTrace& tr, const ParamVector& hybrid, std::size_t heads,
                     std::span<const double> d_out, ParamVector* d_hybrid, std::span<double> d_e_s1,
                     std::span<double> d_e_s2) {
  const std::size_t d = tr.mean.size();
  require(d_out.size() == d, ErrorCode::kShapeMismatch, "fusion cotangent has wrong width");
  require(d_e_s1.size() == 2 * d && d_e_s2.size() == 2 * d, ErrorCode::kShapeMismatch,
          "fusion input cotangents have wrong width");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix wq = as_matrix(hybrid.view("wq"), d, d);
  const Matrix wk = as_matrix(hybrid.view("wk"), d, d);
  const Matrix wv = as_matrix(hybrid.view("wv"), d, d);
  const Matrix wo = as_matrix(hybrid.view("wo"), d, d);

  const Matrix dy(1, d, std::vector<double>(d_out.begin(), d_out.end()));
  if (d_hybrid != nullptr) add_into(d_hybrid->view("wo"), matmul_tn(Matrix(1, d, tr.mean), dy));
  const Matrix d_mean = matmul_nt(dy, wo);
  Matrix d_heads(2, d);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < d; ++c) d_heads(i, c) = 0.5 * d_mean(0, c);

  Matrix dq(2, d), dk(2, d), dv(2, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    const Matrix& p = tr.probs[h];
    for (std::size_t i = 0; i < 2; ++i) {
      double dp[2];
      double row_dot = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          acc += d_heads(i, c0 + c) * tr.v(j, c0 + c);
          dv(j, c0 + c) += p(i, j) * d_heads(i, c0 + c);
        }
        dp[j] = acc;
        row_dot += acc * p(i, j);
      }
      for (std::size_t j = 0; j < 2; ++j) {
        const double ds = p(i, j) * (dp[j] - row_dot) * scale;
        for (std::size_t c = 0; c < dh; ++c) {
          dq(i, c0 + c) += ds * tr.k(j, c0 + c);
          dk(j, c0 + c) += ds * tr.q(i, c0 + c);
        }
      }
    }
  }
  if (d_hybrid != nullptr) {
    add_into(d_hybrid->view("wq"), matmul_tn(tr.queries, dq));
    add_into(d_hybrid->view("wk"), matmul_tn(tr.keys, dk));
    add_into(d_hybrid->view("wv"), matmul_tn(tr.keys, dv));
  }
  add_into(d_e_s1, matmul_nt(dq, wq));
  add_into(d_e_s2, matmul_nt(dk, wk) + matmul_nt(dv, wv));
}

namespace {

std::array<PathHooks, 4> path_hooks(const AdapterBank& bank) {
  const auto& s1 = bank.module(AdapterModule::kS1);
  const auto& s2 = bank.module(AdapterModule::kS2);
  const std::size_t q = bank.config().prompts;
  const std::size_t r = bank.config().rank;
  return {PathHooks{&s1.pre, q, nullptr, 0}, PathHooks{&s1.curr, q, nullptr, 0}, PathHooks{nullptr, 0, &s2.pre, r},
          PathHooks{nullptr, 0, &s2.curr, r}};
}

void check_bank(const ToyBackbone& net, const AdapterBank& bank) {
  require(bank.width() == net.config().width && bank.blocks() == net.config().blocks, ErrorCode::kShapeMismatch,
          "adapter bank does not match backbone");
  for (AdapterModule m : kAdapterModules)
    require(bank.module(m).pre.same_layout(bank.module(m).curr), ErrorCode::kShapeMismatch,
            "pre/curr layouts differ for " + module_name(m));
}

}  // namespace

TripleTrace triple_trace(const ToyBackbone& net, const AdapterBank& bank, const TokenSequence& x) {
  check_bank(net, bank);
  const auto hooks = path_hooks(bank);
  TripleTrace tr;
  for (std::size_t i = 0; i < 4; ++i) tr.paths[i] = forward_trace(net, x, hooks[i]);
  tr.features.s1 = concat(tr.paths[0].cls, tr.paths[1].cls);
  tr.features.s2 = concat(tr.paths[2].cls, tr.paths[3].cls);
  const auto& hy = bank.module(AdapterModule::kHybrid);
  const std::size_t heads = bank.config().fusion_heads;
  tr.fusion[0] = hybrid_trace(tr.features.s1, tr.features.s2, hy.pre, heads);
  tr.fusion[1] = hybrid_trace(tr.features.s1, tr.features.s2, hy.curr, heads);
  tr.features.hybrid = concat(tr.fusion[0].out, tr.fusion[1].out);
  return tr;
}

FeatureTriple triple_features(const ToyBackbone& net, const AdapterBank& bank, const TokenSequence& x) {
  return triple_trace(net, bank, x).features;
}

void triple_backward(const ToyBackbone& net, const AdapterBank& bank, const TripleTrace& tr,
                     std::span<const double> d_s1, std::span<const double> d_s2, std::span<const double> d_hybrid,
                     const TripleGrads& grads) {
  const std::size_t d = bank.width();
  auto check = [&](std::span<const double> g, const char* what) {
    require(g.empty() || g.size() == 2 * d, ErrorCode::kShapeMismatch, std::string(what) + " cotangent must be 2D");
  };
  check(d_s1, "E_S1");
  check(d_s2, "E_S2");
  check(d_hybrid, "E_HAE");

  std::vector<double> g_s1(2 * d, 0.0), g_s2(2 * d, 0.0);
  if (!d_s1.empty()) std::copy(d_s1.begin(), d_s1.end(), g_s1.begin());
  if (!d_s2.empty()) std::copy(d_s2.begin(), d_s2.end(), g_s2.begin());

  const auto& hy = bank.module(AdapterModule::kHybrid);
  const std::size_t heads = bank.config().fusion_heads;
  if (!d_hybrid.empty()) {
    ParamVector* pre_sink = grads.pre != nullptr ? &grads.pre->of(AdapterModule::kHybrid) : nullptr;
    ParamVector* curr_sink = grads.curr != nullptr ? &grads.curr->of(AdapterModule::kHybrid) : nullptr;
    hybrid_backward(tr.fusion[0], hy.pre, heads, d_hybrid.subspan(0, d), pre_sink, g_s1, g_s2);
    hybrid_backward(tr.fusion[1], hy.curr, heads, d_hybrid.subspan(d, d), curr_sink, g_s1, g_s2);
  }

  const auto hooks = path_hooks(bank);
  const std::array<std::span<const double>, 4> cot = {
      std::span<const double>(g_s1).subspan(0, d), std::span<const double>(g_s1).subspan(d, d),
      std::span<const double>(g_s2).subspan(0, d), std::span<const double>(g_s2).subspan(d, d)};
  for (std::size_t i = 0; i < 4; ++i) {
    BankGradient* half = (i % 2 == 0) ? grads.pre : grads.curr;
    PathGrads pg;
    pg.backbone = grads.backbone;
    if (half != nullptr) {
      if (i < 2)
        pg.s1 = &half->of(AdapterModule::kS1);
      else
        pg.s2 = &half->of(AdapterModule::kS2);
    }
    if (pg.backbone == nullptr && pg.s1 == nullptr && pg.s2 == nullptr) continue;
    backward_cls(net, tr.paths[i], hooks[i], cot[i], pg);
  }
}

EmaCoefficients ema_coefficients(std::size_t completed) {
  if (completed == 0) return {0.0, 1.0};
  const double n = static_cast<double>(completed);
  const double k2 = 1.0 / (n + 1.0);
  const double k2_prev = 1.0 / n;
  return {k2 / k2_prev, k2};
}

ParamVector ema_update(const ParamVector& pre, const ParamVector& curr, std::size_t tau) {
  require(pre.same_layout(curr), ErrorCode::kShapeMismatch, "pre/curr layouts differ");
  const EmaCoefficients k = ema_coefficients(tau);
  ParamVector out = pre;
  auto o = out.values();
  auto c = curr.values();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = k.k1 * o[i] + k.k2 * c[i];
  return out;
}

void ema_update_bank(AdapterBank& bank, std::size_t tau) {
  for (AdapterModule m : kAdapterModules) {
    auto& h = bank.module(m);
    h.pre = ema_update(h.pre, h.curr, tau);
  }
}

}  // namespace ntkcl
