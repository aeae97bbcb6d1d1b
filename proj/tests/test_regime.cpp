#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "ntkcl/adapters.hpp"
#include "ntkcl/error.hpp"
#include "ntkcl/regime.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace ntkcl {
namespace {

using testing::random_matrix;

double max_diff(const Matrix& a, const Matrix& b) { return max_abs(a - b); }

TEST(FitTask, OnePointHandSolved) {
  RegimeState s(1);
  const Matrix x{{1.0}};
  const Matrix y{{1.0}};
  s = fit_task(s, x, y, Kernel::linear(), 1.0);
  EXPECT_NEAR(s.record(1).alpha(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(s.predict(Matrix{{3.0}})(0, 0), 1.5, 1e-15);
  EXPECT_NEAR(s.predict(Matrix{{-2.0}})(0, 0), -1.0, 1e-15);
}

TEST(FitTask, InterpolationLimit) {
  const Matrix x = random_matrix(6, 4, 11);
  const Matrix y = random_matrix(6, 2, 12);
  const RegimeState s = fit_task(RegimeState(2), x, y, Kernel::rbf(0.3), 1e-10);
  EXPECT_LT(max_diff(s.predict(x), y), 1e-6);
}

TEST(FitTask, ZeroResidualLeavesPredictionsUnchanged) {
  const Matrix x1 = random_matrix(5, 3, 21);
  const Matrix y1 = random_matrix(5, 1, 22);
  const RegimeState s1 = fit_task(RegimeState(1), x1, y1, Kernel::linear(), 0.1);
  const Matrix x2 = random_matrix(4, 3, 23);
  const Matrix y2 = s1.predict(x2);
  const RegimeState s2 = fit_task(s1, x2, y2, Kernel::rbf(0.5), 0.1);
  EXPECT_LT(max_abs(s2.record(2).residual_targets), 1e-15);
  EXPECT_LT(max_abs(s2.record(2).alpha), 1e-15);
  const Matrix probe = random_matrix(7, 3, 24);
  EXPECT_LT(max_diff(s2.predict(probe), s1.predict(probe)), 1e-14);
}

TEST(FitTask, PostconditionClosedForm) {
  const Matrix x = random_matrix(7, 3, 31);
  const Matrix y = random_matrix(7, 2, 32);
  const double lambda = 0.2;
  const RegimeState s0 = fit_task(RegimeState(2), random_matrix(4, 3, 33), random_matrix(4, 2, 34), Kernel::linear(),
                                  lambda);
  const RegimeState s1 = fit_task(s0, x, y, Kernel::rbf(0.4), lambda);
  const auto& r = s1.record(2);
  const Matrix gram = kernel_matrix(r.kernel, x, x);
  EXPECT_LT(max_diff(matmul(add_diagonal(gram, lambda), r.alpha), r.residual_targets), 1e-8);
  EXPECT_LT(max_diff(s1.predict(x), y - lambda * r.alpha), 1e-12);
}

TEST(FitTask, RejectsMismatchedRows) {
  try {
    fit_task(RegimeState(1), random_matrix(3, 2, 1), random_matrix(4, 1, 2), Kernel::linear(), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(FitTask, SingularGramWithZeroRidgePropagates) {
  const Matrix x{{1.0}, {1.0}};
  const Matrix y{{1.0}, {2.0}};
  try {
    fit_task(RegimeState(1), x, y, Kernel::linear(), 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonPositiveDefinite);
  }
}

TEST(Predict, EmptyStateReturnsBase) {
  const RegimeState s(2, [](const Matrix& x) {
    Matrix out(x.rows(), 2);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      out(i, 0) = x(i, 0);
      out(i, 1) = 2.0;
    }
    return out;
  });
  const Matrix p = s.predict(Matrix{{4.0}, {-1.0}});
  EXPECT_EQ(p, (Matrix{{4.0, 2.0}, {-1.0, 2.0}}));
}

TEST(Predict, TrainingRowInterpolated) {
  const Matrix x = random_matrix(5, 2, 41);
  const Matrix y = random_matrix(5, 1, 42);
  const RegimeState s = fit_task(RegimeState(1), x, y, Kernel::rbf(1.0), 1e-10);
  for (std::size_t i = 0; i < 5; ++i) {
    const Matrix xi(1, 2, std::vector<double>(x.row(i).begin(), x.row(i).end()));
    EXPECT_NEAR(s.predict(xi)(0, 0), y(i, 0), 1e-6);
  }
}

TEST(Predict, TwoTaskStraightLineOracle) {
  const double lambda = 0.5;
  const double a1 = 1.0, a2 = -2.0, y1a = 0.5, y2a = 1.5;
  const double b1 = 0.5, b2 = 3.0, y1b = -1.0, y2b = 2.0;
  auto solve2 = [&](double x1, double x2, double r1, double r2, double& c1, double& c2) {
    const double k11 = x1 * x1 + lambda, k12 = x1 * x2, k22 = x2 * x2 + lambda;
    const double det = k11 * k22 - k12 * k12;
    c1 = (k22 * r1 - k12 * r2) / det;
    c2 = (-k12 * r1 + k11 * r2) / det;
  };
  double al1, al2, be1, be2;
  solve2(a1, a2, y1a, y2a, al1, al2);
  auto f1 = [&](double x) { return x * a1 * al1 + x * a2 * al2; };
  solve2(b1, b2, y1b - f1(b1), y2b - f1(b2), be1, be2);
  auto f2 = [&](double x) { return f1(x) + x * b1 * be1 + x * b2 * be2; };

  RegimeState s(1);
  s = fit_task(s, Matrix{{a1}, {a2}}, Matrix{{y1a}, {y2a}}, Kernel::linear(), lambda);
  s = fit_task(s, Matrix{{b1}, {b2}}, Matrix{{y1b}, {y2b}}, Kernel::linear(), lambda);
  for (double x : {-3.0, -0.25, 0.0, 0.7, 4.0}) EXPECT_NEAR(s.predict(Matrix{{x}})(0, 0), f2(x), 1e-13) << x;
}

TEST(Predict, SequentialConsistency) {
  RegimeState s(2);
  const Matrix probe = random_matrix(6, 3, 50);
  s = fit_task(s, random_matrix(5, 3, 51), random_matrix(5, 2, 52), Kernel::rbf(0.7), 0.05);
  const Matrix first = s.contribution(1, probe);
  const Matrix alpha1 = s.record(1).alpha;
  const RegimeState s2 = fit_task(s, random_matrix(4, 3, 53), random_matrix(4, 2, 54), Kernel::linear(), 0.05);
  EXPECT_EQ(s2.record(1).alpha, alpha1);
  EXPECT_EQ(s2.contribution(1, probe), first);
  EXPECT_EQ(s2.predict_upto(probe, 1), s.predict(probe));
  EXPECT_EQ(s.tasks(), 1u);
}

TEST(Predict, RecordOutOfRange) {
  const RegimeState s = fit_task(RegimeState(1), Matrix{{1.0}}, Matrix{{1.0}}, Kernel::linear(), 1.0);
  for (std::size_t tau : {0u, 2u}) {
    try {
      (void)s.record(tau);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kTaskOutOfRange);
    }
  }
}

TEST(TrainingResidual, OnePointHandComputed) {
  const RegimeState s = fit_task(RegimeState(1), Matrix{{1.0}}, Matrix{{1.0}}, Kernel::linear(), 1.0);
  EXPECT_NEAR(training_residual(s, 1), 0.25, 1e-15);
}

TEST(TrainingResidual, ZeroRidgeFullRank) {
  const Matrix x = random_matrix(4, 6, 61);
  const RegimeState s = fit_task(RegimeState(1), x, random_matrix(4, 1, 62), Kernel::linear(), 0.0);
  const auto id = residual_identity(s, 1);
  EXPECT_EQ(id.closed_form, 0.0);
  EXPECT_LT(id.direct, 1e-20);
}

TEST(TrainingResidual, IdentityOnRandomTasks) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RegimeState s(2);
    s = fit_task(s, random_matrix(6, 3, 100 + seed), random_matrix(6, 2, 200 + seed), Kernel::linear(), 0.3);
    s = fit_task(s, random_matrix(8, 3, 300 + seed), random_matrix(8, 2, 400 + seed), Kernel::rbf(0.5), 0.01);
    for (std::size_t tau = 1; tau <= 2; ++tau) {
      const auto id = residual_identity(s, tau);
      EXPECT_LE(std::abs(id.direct - id.closed_form), 1e-8 * id.closed_form) << seed << " " << tau;
    }
  }
}

TEST(TrainingResidual, MonotoneInRidge) {
  const Matrix x = random_matrix(8, 3, 71);
  const Matrix y = random_matrix(8, 1, 72);
  double prev = -1.0;
  for (double lambda : {1e-6, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0}) {
    const double r = training_residual(fit_task(RegimeState(1), x, y, Kernel::rbf(0.5), lambda), 1);
    EXPECT_GE(r, prev) << lambda;
    prev = r;
  }
}

TEST(Kernel, MedianHeuristic) {
  const Matrix x{{0.0}, {1.0}, {3.0}};
  // Squared distances 1, 9, 4; median 4.
  EXPECT_DOUBLE_EQ(median_heuristic_gamma(x), 1.0 / 8.0);
}

TEST(Kernel, RbfRejectsNonPositiveGamma) {
  EXPECT_THROW(Kernel::rbf(0.0), Error);
  EXPECT_THROW(Kernel::rbf(-1.0), Error);
}

TEST(Kernel, EmpiricalNtkOfLinearModelIsLinearKernel) {
  auto model = std::make_shared<LinearModel>(LinearModel::from_weights(random_matrix(3, 4, 80)));
  const Matrix a = random_matrix(5, 4, 81);
  const Matrix b = random_matrix(3, 4, 82);
  EXPECT_LT(max_diff(kernel_matrix(Kernel::empirical_ntk(model), a, b), matmul_nt(a, b)), 1e-12);
}

TEST(ClosedFormDelta, ZeroResidualGivesZero) {
  const LinearModel m = LinearModel::from_weights(random_matrix(2, 3, 90));
  const ParamVector d = closed_form_delta(m, random_matrix(4, 3, 91), Matrix(4, 2), 0.1);
  for (double v : d.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(d.segment("W").length, 6u);
}

TEST(ClosedFormDelta, PrimalDualEquivalence) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto t = testing::random_linear_task(500 + seed);
    const ParamVector d = closed_form_delta(t.model, t.inputs, t.ytilde, t.lambda);
    // Weight space: ΔWᵀ = (XᵀX + λI)⁻¹XᵀỸ.
    const Matrix dwt = ridge_solve(matmul_tn(t.inputs, t.inputs), t.lambda, matmul_tn(t.inputs, t.ytilde));
    const Matrix dw = transpose(dwt);
    const auto v = d.view("W");
    for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(v[k], dw.data()[k], 1e-10) << seed;
  }
}

TEST(ClosedFormDelta, GradientDescentOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto t = testing::random_linear_task(600 + seed);
    const std::vector<std::string> subset{"W", "b"};
    const ParamVector d = closed_form_delta(t.model, t.inputs, t.ytilde, t.lambda, subset);
    const auto gd = testing::gradient_descent_delta(t.model, t.inputs, t.ytilde, t.lambda, subset);
    ASSERT_EQ(gd.size(), d.size());
    for (std::size_t k = 0; k < gd.size(); ++k) EXPECT_NEAR(d.values()[k], gd[k], 1e-6) << seed;
  }
}

TEST(ClosedFormDelta, LinearizedModelMatchesKernelPrediction) {
  auto model = std::make_shared<LinearModel>(LinearModel::from_weights(random_matrix(2, 3, 700)));
  NtkLinearization lin(model, KernelAt::kInit);
  const Matrix x = random_matrix(5, 3, 701);
  const Matrix y = random_matrix(5, 2, 702);
  const RegimeState s = lin.fit(RegimeState(2, lin.base_function()), x, y, 0.2);
  const ParamVector d = closed_form_delta(*model, x, s.record(1).residual_targets, 0.2);
  ParamVector p = model->parameters();
  axpy(p, 1.0, [&] {
    ParamVector full = p.zeros_like();
    auto dst = full.view("W");
    std::copy(d.view("W").begin(), d.view("W").end(), dst.begin());
    return full;
  }());
  const auto moved = model->with_parameters(p);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto out = moved->forward(x.row(i));
    const Matrix pred = s.predict(Matrix(1, 3, std::vector<double>(x.row(i).begin(), x.row(i).end())));
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out[j], pred(0, j), 1e-10);
  }
}

TEST(ClosedFormDelta, UnknownSubsetSegment) {
  const LinearModel m(3, 2);
  try {
    closed_form_delta(m, random_matrix(2, 3, 1), random_matrix(2, 2, 2), 0.1, {"nope"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownSegment);
  }
}

TEST(KernelAt, ModesDifferOnlyForNonlinearModels) {
  auto linear = std::make_shared<LinearModel>(LinearModel::from_weights(random_matrix(2, 3, 800)));
  const Matrix x1 = random_matrix(4, 3, 801), y1 = random_matrix(4, 2, 802);
  const Matrix x2 = random_matrix(4, 3, 803), y2 = random_matrix(4, 2, 804);
  const Matrix probe = random_matrix(3, 3, 805);
  NtkLinearization start(linear, KernelAt::kTaskStart);
  NtkLinearization init(linear, KernelAt::kInit);
  RegimeState a(2, start.base_function()), b(2, init.base_function());
  a = start.fit(a, x1, y1, 0.1);
  b = init.fit(b, x1, y1, 0.1);
  EXPECT_FALSE(start.current().parameters() == start.initial().parameters());
  EXPECT_TRUE(init.current().parameters() == init.initial().parameters());
  a = start.fit(a, x2, y2, 0.1);
  b = init.fit(b, x2, y2, 0.1);
  EXPECT_LT(max_diff(a.predict(probe), b.predict(probe)), 1e-10);
}

TEST(KernelAt, AdapterModelTaskStartMovesCurrentSegments) {
  const ToyBackbone net = ToyBackbone::random_init(testing::small_backbone());
  AdapterConfig ac;
  ac.prompts = 2;
  ac.rank = 2;
  ac.fusion_heads = 2;
  AdapterBank bank = AdapterBank::initialize(net.config(), ac);
  for (auto m : kAdapterModules) {
    testing::randomize(bank.module(m).curr, 900 + static_cast<std::uint64_t>(m), 0.2);
    bank.module(m).pre = bank.module(m).curr;
  }
  auto model = std::make_shared<AdapterNtkModel>(net, bank, NtkReadout::kHybrid);
  const auto cfg = testing::small_backbone();
  Matrix x(3, cfg.tokens() * cfg.width);
  for (std::size_t i = 0; i < 3; ++i) {
    const Matrix t = testing::random_tokens(cfg, 910 + i);
    std::copy(t.data().begin(), t.data().end(), x.row(i).begin());
  }
  const Matrix y = random_matrix(3, model->output_dim(), 920);
  NtkLinearization lin(model, KernelAt::kTaskStart);
  const RegimeState s = lin.fit(RegimeState(model->output_dim(), lin.base_function()), x, y, 0.1);
  const ParamVector& before = lin.initial().parameters();
  const ParamVector& after = lin.current().parameters();
  double moved = 0.0;
  for (const auto& seg : before.segments()) {
    const auto a = before.view(seg.name);
    const auto b = after.view(seg.name);
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d += std::abs(a[k] - b[k]);
    if (seg.name.find(".curr.") == std::string::npos)
      EXPECT_EQ(d, 0.0) << seg.name;
    else
      moved += d;
  }
  EXPECT_GT(moved, 0.0);
  EXPECT_NO_THROW(training_residual(s, 1));
}

}  // namespace
}  // namespace ntkcl
