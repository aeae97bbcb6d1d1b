#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ntkcl/error.hpp"
#include "ntkcl/harness.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {
namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.backbone.width = 16;
  c.backbone.blocks = 1;
  c.backbone.heads = 2;
  c.backbone.patches = 4;
  c.adapters.prompts = 2;
  c.adapters.rank = 2;
  c.adapters.fusion_heads = 2;
  c.pretrain.classes = 4;
  c.pretrain.per_class = 12;
  c.pretrain.epochs = 3;
  c.stream.classes = 4;
  c.stream.tasks = 2;
  c.stream.per_class = 10;
  c.stream.patches = 4;
  c.stream.width = 16;
  c.stream.noise = 0.3;
  c.train.epochs = 2;
  c.train.batch = 8;
  c.train.learning_rate = 0.05;
  return c;
}

const PretrainedBackbone& tiny_backbone() {
  static const PretrainedBackbone b = pretrain_for(tiny_config());
  return b;
}

TEST(Prototypes, MeanOfTwoSamples) {
  const Matrix f{{1.0, 0.0}, {0.0, 1.0}};
  const std::vector<int> labels{3, 3};
  const auto z = PrototypeClassifier{}.with_classes(f, labels);
  ASSERT_EQ(z.size(), 1u);
  EXPECT_EQ(z.prototypes().at(3), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(z.counts().at(3), 2u);
}

TEST(Prototypes, SingleSampleIsItsOwnPrototype) {
  const Matrix f{{0.25, -2.0, 7.0}};
  const std::vector<int> labels{0};
  const auto z = PrototypeClassifier{}.with_classes(f, labels);
  EXPECT_EQ(z.prototypes().at(0), (std::vector<double>{0.25, -2.0, 7.0}));
}

TEST(Prototypes, MeanInvariantUnderPermutation) {
  CounterRng rng(5);
  Matrix f(12, 4);
  std::vector<int> labels(12);
  for (std::size_t i = 0; i < 12; ++i) {
    labels[i] = static_cast<int>(i % 3);
    for (std::size_t k = 0; k < 4; ++k) f(i, k) = rng.normal();
  }
  std::vector<std::size_t> perm(12);
  for (std::size_t i = 0; i < 12; ++i) perm[i] = i;
  rng.shuffle(perm);
  Matrix g(12, 4);
  std::vector<int> glabels(12);
  for (std::size_t i = 0; i < 12; ++i) {
    glabels[i] = labels[perm[i]];
    for (std::size_t k = 0; k < 4; ++k) g(i, k) = f(perm[i], k);
  }
  const auto a = PrototypeClassifier{}.with_classes(f, labels);
  const auto b = PrototypeClassifier{}.with_classes(g, glabels);
  for (int c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_NEAR(a.prototypes().at(c)[k], b.prototypes().at(c)[k], 1e-15);
}

TEST(Prototypes, CollisionRejectedAndPreviousUntouched) {
  const Matrix f{{1.0, 2.0}};
  const std::vector<int> a{1}, b{2};
  const auto z = PrototypeClassifier{}.with_classes(f, a);
  try {
    z.with_classes(f, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kClassCollision);
  }
  const auto z2 = z.with_classes(Matrix{{5.0, 5.0}}, b);
  EXPECT_EQ(z2.prototypes().at(1), z.prototypes().at(1));
  EXPECT_EQ(z2.classes(), (std::vector<int>{1, 2}));
}

TEST(Classify, MatchingPrototypeWinsWithUnitLogit) {
  const Matrix f{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
  const std::vector<int> labels{4, 7, 9};
  const auto z = PrototypeClassifier{}.with_classes(f, labels);
  const std::vector<double> x{0.0, 1.0, 0.0};
  const auto r = z.classify(x);
  EXPECT_EQ(r.label, 7);
  EXPECT_EQ(r.classes, (std::vector<int>{4, 7, 9}));
  EXPECT_DOUBLE_EQ(r.logits[1], 1.0);
  EXPECT_DOUBLE_EQ(r.logits[0], 0.0);
}

TEST(Classify, TieGoesToLowestClassId) {
  const Matrix f{{1.0, 1.0}, {1.0, 1.0}};
  const std::vector<int> labels{6, 2};
  const auto z = PrototypeClassifier{}.with_classes(f, labels);
  const std::vector<double> x{0.3, -1.0};
  EXPECT_EQ(z.classify(x).label, 2);
}

TEST(Classify, MatchesBruteForceScan) {
  CounterRng rng(9);
  Matrix f(20, 6);
  std::vector<int> labels(20);
  for (std::size_t i = 0; i < 20; ++i) {
    labels[i] = static_cast<int>(i);
    for (std::size_t k = 0; k < 6; ++k) f(i, k) = rng.normal();
  }
  const auto z = PrototypeClassifier{}.with_classes(f, labels);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(6);
    for (double& v : x) v = rng.normal();
    int best = -1;
    double best_s = -2.0;
    for (std::size_t i = 0; i < 20; ++i) {
      double d = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < 6; ++k) {
        d += x[k] * f(i, k);
        na += x[k] * x[k];
        nb += f(i, k) * f(i, k);
      }
      const double s = d / std::sqrt(na * nb);
      if (s > best_s) {
        best_s = s;
        best = static_cast<int>(i);
      }
    }
    EXPECT_EQ(z.classify(x).label, best);
  }
}

TEST(Classify, EmptyClassifierRejected) {
  const std::vector<double> x{1.0};
  try {
    PrototypeClassifier{}.classify(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyClassifier);
  }
}

TEST(Metrics, AverageOfStages) {
  const std::vector<double> a{100.0, 50.0};
  EXPECT_EQ(average_accuracy(a), 75.0);
}

StreamSpec tiny_stream(std::uint64_t seed) {
  StreamSpec s = tiny_config().stream;
  s.seed = seed;
  return s;
}

TEST(Vault, ReadsAfterSealAreCounted) {
  const TaskStream st = synth_stream(tiny_stream(1));
  TaskDataVault v(st);
  v.read(1, 0);
  v.read(1, 1);
  EXPECT_EQ(v.reads(1), 2u);
  v.seal(1);
  EXPECT_EQ(v.reads_after_seal(), 0u);
  v.read(2, 0);
  EXPECT_EQ(v.reads_after_seal(), 0u);
  v.read(1, 0);
  EXPECT_EQ(v.reads_after_seal(), 1u);
  EXPECT_THROW(v.read(3, 0), Error);
}

TEST(TrainTask, OneEpochLowersClassificationLoss) {
  ExperimentConfig c = tiny_config();
  c.train.epochs = 1;
  const TaskStream st = synth_stream(tiny_stream(2));
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  const auto r = train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  EXPECT_LT(r.final_cls, r.initial_cls);
  EXPECT_FALSE(r.trace.empty());
}

TEST(TrainTask, OnlyCurrHalvesAndHeadsChange) {
  const ExperimentConfig c = tiny_config();
  const TaskStream st = synth_stream(tiny_stream(2));
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  const Learner before = l;
  TaskDataVault v(st);
  train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  EXPECT_EQ(l.net.params(), before.net.params());
  bool curr_moved = false;
  for (AdapterModule m : kAdapterModules) {
    EXPECT_EQ(l.bank.module(m).pre, before.bank.module(m).pre);
    curr_moved = curr_moved || !(l.bank.module(m).curr == before.bank.module(m).curr);
  }
  EXPECT_TRUE(curr_moved);
  EXPECT_NE(l.heads[2].weight, before.heads[2].weight);
  EXPECT_TRUE(l.prototypes.empty());
}

TEST(TrainTask, DeterministicGivenSeed) {
  const ExperimentConfig c = tiny_config();
  const TaskStream st = synth_stream(tiny_stream(2));
  Learner a = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  Learner b = a;
  TaskDataVault va(st), vb(st);
  train_task(a, va, 1, {c.weights, c.train.temperature}, c.train, 3);
  train_task(b, vb, 1, {c.weights, c.train.temperature}, c.train, 3);
  EXPECT_TRUE(a.bank == b.bank);
}

TEST(TrainTask, DivergenceOnNonFiniteLoss) {
  ExperimentConfig c = tiny_config();
  c.train.learning_rate = 1e200;
  c.train.epochs = 3;
  const TaskStream st = synth_stream(tiny_stream(2));
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  try {
    train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDivergence);
  }
}

TEST(FinishTask, PrototypesSealThenEma) {
  const ExperimentConfig c = tiny_config();
  const TaskStream st = synth_stream(tiny_stream(2));
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  finish_task(l, v, 1, false, true);
  EXPECT_TRUE(v.sealed(1));
  EXPECT_EQ(l.prototypes.classes().size(), st.tasks[0].classes.size());
  for (AdapterModule m : kAdapterModules) EXPECT_EQ(l.bank.module(m).pre, l.bank.module(m).curr);
  train_task(l, v, 2, {c.weights, c.train.temperature}, c.train, 3);
  const AdapterBank before = l.bank;
  finish_task(l, v, 2, true, true);
  EXPECT_TRUE(l.bank == before);
  EXPECT_EQ(v.reads_after_seal(), 0u);
}

TEST(FinishTask, SecondEmaIsRunningMean) {
  ExperimentConfig c = tiny_config();
  c.stream.tasks = 3;
  c.stream.classes = 6;
  StreamSpec s = c.stream;
  s.seed = 4;
  const TaskStream st = synth_stream(s);
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  finish_task(l, v, 1, false, true);
  const ParamVector c1 = l.bank.module(AdapterModule::kS2).curr;
  train_task(l, v, 2, {c.weights, c.train.temperature}, c.train, 3);
  const ParamVector c2 = l.bank.module(AdapterModule::kS2).curr;
  finish_task(l, v, 2, false, true);
  const auto pre = l.bank.module(AdapterModule::kS2).pre.values();
  for (std::size_t i = 0; i < pre.size(); ++i)
    EXPECT_NEAR(pre[i], 0.5 * c1.values()[i] + 0.5 * c2.values()[i], 1e-15);
}

TEST(FinishTask, EmaOffCopiesCurrIntoPre) {
  const ExperimentConfig c = tiny_config();
  const TaskStream st = synth_stream(tiny_stream(2));
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  finish_task(l, v, 1, false, false);
  for (AdapterModule m : kAdapterModules) EXPECT_EQ(l.bank.module(m).pre, l.bank.module(m).curr);
}

TEST(Evaluate, SeparableFirstStageIsPerfect) {
  ExperimentConfig c = tiny_config();
  StreamSpec s = tiny_stream(6);
  s.noise = 0.05;
  const TaskStream st = synth_stream(s);
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  finish_task(l, v, 1, false, true);
  EXPECT_EQ(evaluate(l, st, 1), 100.0);
}

TEST(Evaluate, TestOrderIrrelevant) {
  const ExperimentConfig c = tiny_config();
  TaskStream st = synth_stream(tiny_stream(7));
  Learner l = Learner::create(tiny_backbone().net, c.adapters, c.stream.classes);
  TaskDataVault v(st);
  train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 3);
  finish_task(l, v, 1, false, true);
  const double a = evaluate(l, st, 1);
  CounterRng rng(1);
  rng.shuffle(st.tasks[0].test);
  EXPECT_EQ(evaluate(l, st, 1), a);
  EXPECT_THROW(evaluate(l, st, 3), Error);
}

TEST(RunContinual, TwoTaskReportValidates) {
  const RunReport r = run_continual(tiny_config(), 0, &tiny_backbone());
  ASSERT_EQ(r.accuracies.size(), 2u);
  EXPECT_EQ(r.average, (r.accuracies[0] + r.accuracies[1]) / 2.0);
  EXPECT_EQ(r.final_accuracy, r.accuracies.back());
  EXPECT_EQ(r.reads_after_seal, 0u);
  EXPECT_NO_THROW(validate_report_json(report_json(r)));
  EXPECT_EQ(accuracy_csv(r).substr(0, 15), "stage,accuracy\n");
}

TEST(RunContinual, ByteIdenticalForSameSeed) {
  const auto a = run_continual(tiny_config(), 5, &tiny_backbone());
  const auto b = run_continual(tiny_config(), 5, &tiny_backbone());
  EXPECT_EQ(report_json(a), report_json(b));
  EXPECT_EQ(losses_csv(a), losses_csv(b));
  const auto c = run_continual(tiny_config(), 6, &tiny_backbone());
  EXPECT_NE(a.fingerprint, c.fingerprint);
}

TEST(RunContinual, AblationArmsReachable) {
  ExperimentConfig c = tiny_config();
  c.weights = {0.0, 0.0, 0.0};
  c.ema = false;
  const RunReport r = run_continual(c, 1, &tiny_backbone());
  for (const auto& row : r.losses) {
    EXPECT_EQ(row.weights.eta, 0.0);
    EXPECT_EQ(row.loss.total, row.loss.cls);
  }
  EXPECT_NO_THROW(validate_report_json(report_json(r)));
}

TEST(RunContinual, DynamicCoefficientsStayInRange) {
  ExperimentConfig c = tiny_config();
  c.ahps = AhpsMode::kDynamic;
  const RunReport r = run_continual(c, 2, &tiny_backbone());
  const ScalerState d = ScalerState::with_defaults();
  for (const auto& row : r.losses) {
    EXPECT_GE(row.weights.eta, d.ranges[0].min);
    EXPECT_LE(row.weights.eta, d.ranges[0].max);
    EXPECT_GE(row.weights.upsilon, d.ranges[1].min);
    EXPECT_LE(row.weights.lambda, d.ranges[2].max);
  }
}

TEST(RunContinual, BayesSearchesEveryTaskInsideTheBox) {
  ExperimentConfig c = tiny_config();
  c.ahps = AhpsMode::kBayes;
  c.search_calls = 3;
  c.train.epochs = 1;
  const RunReport r = run_continual(c, 3, &tiny_backbone());
  ASSERT_EQ(r.stages.size(), 2u);
  for (const auto& s : r.stages) {
    ASSERT_EQ(s.search.size(), 3u);
    for (const auto& h : s.search) EXPECT_TRUE(SearchBox{}.contains(h.point));
  }
  const auto& first = r.stages[0].search;
  const auto best = std::min_element(first.begin(), first.end(),
                                     [](const SearchRecord& a, const SearchRecord& b) { return a.value < b.value; });
  EXPECT_EQ(r.stages[1].search.front().point, best->point);
  EXPECT_EQ(r.stages[0].chosen.temperature, best->point[0]);
  EXPECT_EQ(r.reads_after_seal, 0u);
}

TEST(RunContinual, WeightSearchSpaceKeepsTemperatureFixed) {
  ExperimentConfig c = tiny_config();
  c.ahps = AhpsMode::kBayes;
  c.search_space = SearchSpace::kWeights;
  c.search_calls = 3;
  c.train.epochs = 1;
  const RunReport r = run_continual(c, 3, &tiny_backbone());
  for (const auto& s : r.stages) {
    const auto best = std::min_element(s.search.begin(), s.search.end(),
                                       [](const SearchRecord& a, const SearchRecord& b) { return a.value < b.value; });
    EXPECT_EQ(s.chosen.temperature, c.train.temperature);
    EXPECT_EQ(s.chosen.weights.eta, best->point[0]);
    EXPECT_EQ(s.chosen.weights.upsilon, best->point[1]);
    EXPECT_EQ(s.chosen.weights.lambda, best->point[2]);
  }
  EXPECT_NE(config_fingerprint(c, 3), config_fingerprint(tiny_config(), 3));
}

TEST(RunContinual, GapDiagnosticsPerTask) {
  ExperimentConfig c = tiny_config();
  c.gaps = true;
  const RunReport r = run_continual(c, 0, &tiny_backbone());
  ASSERT_EQ(r.gaps.size(), 2u);
  for (const auto& g : r.gaps)
    EXPECT_NEAR(g.total, g.empirical + 2.0 * c.diagnostics.gap.lipschitz * g.rademacher + g.confidence, 1e-12);
}

TEST(ReportSchema, RejectsInconsistentAverage) {
  RunReport r = run_continual(tiny_config(), 0, &tiny_backbone());
  r.average += 1.0;
  try {
    validate_report_json(report_json(r));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigInvalid);
  }
  EXPECT_THROW(validate_report_json("{"), Error);
}

TEST(Config, FingerprintTracksContent) {
  ExperimentConfig a = tiny_config(), b = tiny_config();
  EXPECT_EQ(config_fingerprint(a, 0), config_fingerprint(b, 0));
  b.weights.eta = 0.5;
  EXPECT_NE(config_fingerprint(a, 0), config_fingerprint(b, 0));
  EXPECT_NE(config_fingerprint(a, 0), config_fingerprint(a, 1));
  EXPECT_EQ(config_fingerprint(a, 0).size(), 16u);
}

TEST(Config, MismatchedStreamWidthRejected) {
  ExperimentConfig c = tiny_config();
  c.stream.width = 8;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigInvalid);
  }
}

}  // namespace
}  // namespace ntkcl
