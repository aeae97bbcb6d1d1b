#include <gtest/gtest.h>

#include <cmath>

#include "ntkcl/adapters.hpp"
#include "ntkcl/error.hpp"
#include "test_support.hpp"

using namespace ntkcl;
using namespace ntkcl::testing;

namespace {

struct Fixture {
  BackboneConfig config = small_backbone();
  ToyBackbone net;
  AdapterBank bank;

  Fixture() {
    net = ToyBackbone::random_init(config);
    CounterRng rng(99);
    for (double& v : net.mutable_params().values()) v += 0.1 * rng.normal();
    net.freeze();
    AdapterConfig ac;
    ac.prompts = 2;
    ac.rank = 3;
    ac.fusion_heads = 2;
    bank = AdapterBank::initialize(config, ac);
  }

  void randomize_bank(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (AdapterModule m : kAdapterModules) {
      randomize(bank.module(m).pre, s++, 0.3);
      randomize(bank.module(m).curr, s++, 0.3);
    }
  }
};

// Softmax attention written out per head from the formula, for the 2-token case.
std::vector<double> reference_fuse(std::span<const double> e1, std::span<const double> e2, const ParamVector& p,
                                   std::size_t heads) {
  const std::size_t d = e1.size() / 2;
  const std::size_t dh = d / heads;
  auto map = [&](const char* name, std::span<const double> tok) {
    const auto w = p.view(name);
    std::vector<double> y(d, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) y[j] += tok[k] * w[k * d + j];
    return y;
  };
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto q = map("wq", e1.subspan(i * d, d));
    const auto k0 = map("wk", e2.subspan(0, d)), k1 = map("wk", e2.subspan(d, d));
    const auto v0 = map("wv", e2.subspan(0, d)), v1 = map("wv", e2.subspan(d, d));
    for (std::size_t h = 0; h < heads; ++h) {
      double s0 = 0.0, s1 = 0.0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        s0 += q[c] * k0[c];
        s1 += q[c] * k1[c];
      }
      s0 /= std::sqrt(static_cast<double>(dh));
      s1 /= std::sqrt(static_cast<double>(dh));
      const double a0 = 1.0 / (1.0 + std::exp(s1 - s0));
      const double a1 = 1.0 - a0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) mean[c] += 0.5 * (a0 * v0[c] + a1 * v1[c]);
    }
  }
  return map("wo", mean);
}

}  // namespace

TEST(AdapterBank, InitializationShapesAndZeroInit) {
  Fixture fx;
  for (AdapterModule m : kAdapterModules) {
    EXPECT_TRUE(fx.bank.module(m).pre.same_layout(fx.bank.module(m).curr));
    EXPECT_EQ(fx.bank.module(m).pre, fx.bank.module(m).curr);
  }
  const auto& s1 = fx.bank.module(AdapterModule::kS1).curr;
  for (double v : s1.values()) EXPECT_EQ(v, 0.0);
  const auto& s2 = fx.bank.module(AdapterModule::kS2).curr;
  for (std::size_t b = 0; b < fx.config.blocks; ++b)
    for (double v : s2.view("block" + std::to_string(b) + ".high")) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s1.segment("block0.gen_w").length, fx.config.width * 2 * fx.config.width);
}

TEST(AdapterBank, InvalidDimensionsRejected) {
  const BackboneConfig c = small_backbone();
  AdapterConfig ac;
  ac.rank = c.width;
  EXPECT_THROW(AdapterBank::initialize(c, ac), Error);
  ac.rank = 2;
  ac.prompts = 0;
  EXPECT_THROW(AdapterBank::initialize(c, ac), Error);
  ac.prompts = 2;
  ac.fusion_heads = 3;
  EXPECT_THROW(AdapterBank::initialize(c, ac), Error);
}

TEST(S1Forward, ZeroGeneratorIsPretrainedBlock) {
  Fixture fx;
  const Matrix x = random_tokens(fx.config, 1);
  const Matrix zero_q(2, fx.config.width);
  const ParamVector s1 = AdapterBank::s1_layout(fx.config.width, fx.config.blocks, 2);
  for (std::size_t b = 0; b < fx.config.blocks; ++b) {
    const auto r = s1_forward(fx.net, b, x, b == 0 ? Matrix() : zero_q, zero_q, s1, 2);
    EXPECT_EQ(r.prompts, zero_q);
    const Matrix pure = block_step(fx.net, b, x, {}, Matrix(), Matrix()).out;
    EXPECT_LE(max_abs(r.tokens - pure), 0.0);
  }
}

TEST(S1Forward, ZeroGeneratorCarriesPromptsExactly) {
  Fixture fx;
  const Matrix x = random_tokens(fx.config, 2);
  const Matrix q_prev = random_matrix(2, fx.config.width, 3);
  const ParamVector s1 = AdapterBank::s1_layout(fx.config.width, fx.config.blocks, 2);
  const auto r = s1_forward(fx.net, 1, x, q_prev, q_prev, s1, 2);
  EXPECT_EQ(r.prompts, q_prev);
}

TEST(S1Forward, ShapeMismatch) {
  Fixture fx;
  const ParamVector s1 = AdapterBank::s1_layout(fx.config.width, fx.config.blocks, 3);
  try {
    s1_forward(fx.net, 0, random_tokens(fx.config, 1), Matrix(), Matrix(2, fx.config.width), s1, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(S2Forward, ZeroHighIsPretrainedBlock) {
  Fixture fx;
  const Matrix x = random_tokens(fx.config, 4);
  ParamVector s2 = AdapterBank::s2_layout(fx.config.width, fx.config.blocks, 3);
  randomize(s2, 5, 1.0);
  for (double& v : s2.view("block0.high")) v = 0.0;
  const Matrix pure = block_step(fx.net, 0, x, {}, Matrix(), Matrix()).out;
  EXPECT_EQ(s2_forward(fx.net, 0, x, s2, 3), pure);
}

TEST(S2Forward, IdentityFactorizationAddsInput) {
  Fixture fx;
  const std::size_t d = fx.config.width;
  const Matrix x = random_tokens(fx.config, 6);
  ParamVector s2 = AdapterBank::s2_layout(d, fx.config.blocks, d);
  auto low = s2.view("block1.low");
  auto high = s2.view("block1.high");
  for (std::size_t i = 0; i < d; ++i) low[i * d + i] = high[i * d + i] = 1.0;
  const BlockCache pure = block_step(fx.net, 1, x, {}, Matrix(), Matrix());
  const Matrix diff = s2_forward(fx.net, 1, x, s2, d) - pure.out;
  EXPECT_LE(max_abs(diff - pure.u), 1e-12);
}

TEST(HybridFuse, SymmetricKeysGiveHalfWeights) {
  Fixture fx;
  const std::size_t d = fx.config.width;
  ParamVector p = fx.bank.module(AdapterModule::kHybrid).curr;
  randomize(p, 7, 0.5);
  const auto e1 = random_vector(2 * d, 8);
  auto half = random_vector(d, 9);
  std::vector<double> e2 = half;
  e2.insert(e2.end(), half.begin(), half.end());
  const FusionTrace tr = hybrid_trace(e1, e2, p, 2);
  for (const auto& probs : tr.probs)
    for (double v : probs.data()) EXPECT_EQ(v, 0.5);
  const Matrix v_half = matmul(Matrix(1, d, half), Matrix(d, d, std::vector<double>(p.view("wv").begin(), p.view("wv").end())));
  const Matrix expected = matmul(v_half, Matrix(d, d, std::vector<double>(p.view("wo").begin(), p.view("wo").end())));
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(tr.out[j], expected(0, j), 1e-12);
}

TEST(HybridFuse, ZeroQueryKeyGivesUniformAttention) {
  Fixture fx;
  const std::size_t d = fx.config.width;
  ParamVector p = fx.bank.module(AdapterModule::kHybrid).curr;
  randomize(p, 10, 0.5);
  for (double& v : p.view("wq")) v = 0.0;
  for (double& v : p.view("wk")) v = 0.0;
  const auto e1 = random_vector(2 * d, 11);
  const auto e2 = random_vector(2 * d, 12);
  const auto out = hybrid_fuse(e1, e2, p, 2);
  std::vector<double> mean(d);
  for (std::size_t j = 0; j < d; ++j) mean[j] = 0.5 * (e2[j] + e2[d + j]);
  const auto wv = p.view("wv"), wo = p.view("wo");
  std::vector<double> v(d, 0.0), expected(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) v[j] += mean[k] * wv[k * d + j];
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k) expected[j] += v[k] * wo[k * d + j];
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out[j], expected[j], 1e-12);
}

TEST(HybridFuse, MatchesFormulaReimplementation) {
  Fixture fx;
  const std::size_t d = fx.config.width;
  ParamVector p = fx.bank.module(AdapterModule::kHybrid).curr;
  randomize(p, 13, 0.7);
  const auto e1 = random_vector(2 * d, 14);
  const auto e2 = random_vector(2 * d, 15);
  const auto got = hybrid_fuse(e1, e2, p, 2);
  const auto want = reference_fuse(e1, e2, p, 2);
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(got[j], want[j], 1e-12);
}

TEST(HybridFuse, WidthMismatch) {
  Fixture fx;
  const auto& p = fx.bank.module(AdapterModule::kHybrid).curr;
  try {
    hybrid_fuse(random_vector(fx.config.width, 1), random_vector(2 * fx.config.width, 2), p, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(HybridFuse, GradientsMatchFiniteDifferences) {
  Fixture fx;
  const std::size_t d = fx.config.width;
  ParamVector p = fx.bank.module(AdapterModule::kHybrid).curr;
  randomize(p, 16, 0.7);
  std::vector<double> e1 = random_vector(2 * d, 17);
  std::vector<double> e2 = random_vector(2 * d, 18);
  const auto w = random_vector(d, 19);
  ParamVector gp = p.zeros_like();
  std::vector<double> g1(2 * d, 0.0), g2(2 * d, 0.0);
  hybrid_backward(hybrid_trace(e1, e2, p, 2), p, 2, w, &gp, g1, g2);
  auto f = [&] { return dot(hybrid_fuse(e1, e2, p, 2), w); };
  EXPECT_LE(fd_check(p, gp, f), 1e-4);

  ParamVector pe1, pe2;
  pe1.add("x", 2 * d);
  pe2.add("x", 2 * d);
  std::copy(g1.begin(), g1.end(), pe1.values().begin());
  std::copy(g2.begin(), g2.end(), pe2.values().begin());
  ParamVector v1 = pe1.zeros_like(), v2 = pe2.zeros_like();
  std::copy(e1.begin(), e1.end(), v1.values().begin());
  std::copy(e2.begin(), e2.end(), v2.values().begin());
  auto f1 = [&] { return dot(hybrid_fuse(v1.values(), e2, p, 2), w); };
  auto f2 = [&] { return dot(hybrid_fuse(e1, v2.values(), p, 2), w); };
  EXPECT_LE(fd_check(v1, pe1, f1), 1e-4);
  EXPECT_LE(fd_check(v2, pe2, f2), 1e-4);
}

TEST(TripleFeatures, ZeroCurrMatchesZeroAdapterPrePaths) {
  Fixture fx;
  const Matrix x = random_tokens(fx.config, 20);
  const FeatureTriple f = triple_features(fx.net, fx.bank, x);
  const std::size_t d = fx.config.width;
  const auto pure = cls_feature(fx.net, x);
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_EQ(f.s1[d + j], f.s1[j]);
    EXPECT_LE(std::abs(f.s1[d + j] - pure[j]), 1e-12);
    EXPECT_LE(std::abs(f.s2[d + j] - pure[j]), 1e-12);
    EXPECT_EQ(f.hybrid[d + j], f.hybrid[j]);
  }
}

TEST(TripleFeatures, DeterministicAndTwoDWide) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    BackboneConfig c = small_backbone(seed);
    c.width = 4 + 4 * seed;
    c.heads = 2;
    c.blocks = 1 + seed % 3;
    c.patches = 2 + seed;
    const ToyBackbone net = ToyBackbone::random_init(c);
    AdapterConfig ac;
    ac.prompts = 1 + seed;
    ac.rank = 1 + seed;
    ac.fusion_heads = 2;
    ac.seed = seed;
    const AdapterBank bank = AdapterBank::initialize(c, ac);
    const Matrix x = random_tokens(c, seed + 30);
    const FeatureTriple a = triple_features(net, bank, x);
    const FeatureTriple b = triple_features(net, bank, x);
    EXPECT_EQ(a.s1.size(), 2 * c.width);
    EXPECT_EQ(a.s2.size(), 2 * c.width);
    EXPECT_EQ(a.hybrid.size(), 2 * c.width);
    EXPECT_EQ(a.s1, b.s1);
    EXPECT_EQ(a.s2, b.s2);
    EXPECT_EQ(a.hybrid, b.hybrid);
    EXPECT_TRUE(all_finite(a.hybrid));
  }
}

TEST(TripleFeatures, BackwardMatchesFiniteDifferences) {
  Fixture fx;
  fx.randomize_bank(40);
  const std::size_t d = fx.config.width;
  const Matrix x = random_tokens(fx.config, 41);
  const auto w1 = random_vector(2 * d, 42), w2 = random_vector(2 * d, 43), w3 = random_vector(2 * d, 44);
  auto scalar = [&] {
    const FeatureTriple f = triple_features(fx.net, fx.bank, x);
    return dot(f.s1, w1) + dot(f.s2, w2) + dot(f.hybrid, w3);
  };
  BankGradient curr = BankGradient::zeros_like(fx.bank);
  BankGradient pre = BankGradient::zeros_like(fx.bank);
  triple_backward(fx.net, fx.bank, triple_trace(fx.net, fx.bank, x), w1, w2, w3, TripleGrads{&curr, &pre, nullptr});
  for (AdapterModule m : kAdapterModules) {
    EXPECT_LE(fd_check(fx.bank.module(m).curr, curr.of(m), scalar, 150), 1e-4) << module_name(m) << " curr";
    EXPECT_LE(fd_check(fx.bank.module(m).pre, pre.of(m), scalar, 150), 1e-4) << module_name(m) << " pre";
  }
}

TEST(Ema, Coefficients) {
  const auto k0 = ema_coefficients(0);
  EXPECT_EQ(k0.k1, 0.0);
  EXPECT_EQ(k0.k2, 1.0);
  const auto k1 = ema_coefficients(1);
  EXPECT_DOUBLE_EQ(k1.k1, 0.5);
  EXPECT_DOUBLE_EQ(k1.k2, 0.5);
  const auto k3 = ema_coefficients(3);
  EXPECT_DOUBLE_EQ(k3.k1, 0.75);
  EXPECT_DOUBLE_EQ(k3.k2, 0.25);
}

TEST(Ema, UpdateExamples) {
  ParamVector pre, curr;
  pre.add("p", 1);
  curr.add("p", 1);
  pre.values()[0] = 7.0;
  curr.values()[0] = 0.0;
  pre = ema_update(pre, curr, 0);
  EXPECT_EQ(pre.values()[0], 0.0);
  curr.values()[0] = 2.0;
  pre = ema_update(pre, curr, 1);
  EXPECT_EQ(pre.values()[0], 1.0);
}

TEST(Ema, RunningMeanOfSnapshots) {
  ParamVector pre, curr;
  pre.add("p", 1);
  curr.add("p", 1);
  for (std::size_t tau = 0; tau < 3; ++tau) {
    curr.values()[0] = static_cast<double>(tau + 1);
    pre = ema_update(pre, curr, tau);
  }
  EXPECT_NEAR(pre.values()[0], 2.0, 1e-12);

  ParamVector a = AdapterBank::hybrid_layout(4);
  ParamVector b = a.zeros_like();
  std::vector<double> sum(a.size(), 0.0);
  for (std::size_t tau = 0; tau < 7; ++tau) {
    randomize(b, 100 + tau, 1.0);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += b.values()[i];
    a = ema_update(a, b, tau);
    for (std::size_t i = 0; i < sum.size(); ++i)
      EXPECT_NEAR(a.values()[i], sum[i] / static_cast<double>(tau + 1), 1e-12);
  }
}

TEST(Ema, ShapeMismatch) {
  EXPECT_THROW(ema_update(AdapterBank::hybrid_layout(4), AdapterBank::hybrid_layout(2), 0), Error);
}
