#include "ntkcl/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ntkcl/error.hpp"
#include "ntkcl/ntk.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

using nlohmann::json;

void TrainOptions::validate() const {
  require(batch >= 1, ErrorCode::kInvalidArgument, "batch size must be >= 1");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorCode::kInvalidArgument,
          "learning rate must be finite and >= 0");
  require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::kInvalidArgument,
          "temperature must be positive");
  require(svd_energy > 0.0 && svd_energy <= 1.0, ErrorCode::kInvalidArgument, "svd energy must lie in (0, 1]");
}

std::string to_string(AhpsMode mode) {
  switch (mode) {
    case AhpsMode::kFixed: return "fixed";
    case AhpsMode::kDynamic: return "dynamic";
    case AhpsMode::kBayes: return "bayes";
  }
  return "fixed";
}

AhpsMode parse_ahps_mode(std::string_view name) {
  if (name == "fixed") return AhpsMode::kFixed;
  if (name == "dynamic") return AhpsMode::kDynamic;
  if (name == "bayes") return AhpsMode::kBayes;
  throw Error(ErrorCode::kConfigInvalid, "unknown AHPS mode '" + std::string(name) + "'");
}

std::string to_string(SearchSpace space) { return space == SearchSpace::kWeights ? "weights" : "temperature"; }

SearchSpace parse_search_space(std::string_view name) {
  if (name == "temperature") return SearchSpace::kTemperature;
  if (name == "weights") return SearchSpace::kWeights;
  throw Error(ErrorCode::kConfigInvalid, "unknown search space '" + std::string(name) + "'");
}

void ExperimentConfig::validate() const {
  backbone.validate();
  weights.validate();
  train.validate();
  require(stream.patches == backbone.patches && stream.width == backbone.width, ErrorCode::kConfigInvalid,
          "stream patches/width must match the backbone");
  require(stream.tasks >= 1 && stream.classes >= stream.tasks, ErrorCode::kConfigInvalid,
          "stream needs at least one class per task");
  require(adapters.rank >= 1 && adapters.rank < backbone.width, ErrorCode::kConfigInvalid,
          "adapter rank must lie in [1, width)");
  require(adapters.fusion_heads >= 1 && backbone.width % adapters.fusion_heads == 0, ErrorCode::kConfigInvalid,
          "fusion heads must divide the width");
  require(pretrain.held_out_fraction >= 0.0 && pretrain.held_out_fraction < 1.0, ErrorCode::kConfigInvalid,
          "held-out fraction must lie in [0, 1)");
  require(diagnostics.lambda >= 0.0, ErrorCode::kConfigInvalid, "diagnostic ridge must be >= 0");
  require(ahps != AhpsMode::kBayes || search_calls >= 3, ErrorCode::kConfigInvalid, "search_calls must be >= 3");
}

namespace {

json config_json(const ExperimentConfig& c) {
  json j;
  j["backbone"] = {{"seed", c.backbone.seed},
                   {"width", c.backbone.width},
                   {"blocks", c.backbone.blocks},
                   {"heads", c.backbone.heads},
                   {"patches", c.backbone.patches}};
  j["pretrain"] = {{"classes", c.pretrain.classes},     {"per_class", c.pretrain.per_class},
                   {"epochs", c.pretrain.epochs},       {"batch", c.pretrain.batch},
                   {"learning_rate", c.pretrain.learning_rate}, {"noise", c.pretrain.noise},
                   {"held_out_fraction", c.pretrain.held_out_fraction}};
  j["adapters"] = {{"prompts", c.adapters.prompts}, {"rank", c.adapters.rank},
                   {"fusion_heads", c.adapters.fusion_heads}};
  j["weights"] = {{"eta", c.weights.eta}, {"upsilon", c.weights.upsilon}, {"lambda", c.weights.lambda}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch", c.train.batch},
                {"learning_rate", c.train.learning_rate},
                {"temperature", c.train.temperature},
                {"svd_energy", c.train.svd_energy},
                {"max_negatives", c.train.max_negatives}};
  json s = {{"kind", to_string(c.stream.kind)}, {"classes", c.stream.classes},
            {"per_class", c.stream.per_class}, {"tasks", c.stream.tasks},
            {"noise", c.stream.noise},         {"test_fraction", c.stream.test_fraction}};
  if (c.stream.class_order) s["class_order"] = *c.stream.class_order;
  j["stream"] = s;
  j["ema"] = c.ema;
  j["ahps"] = to_string(c.ahps);
  j["search_calls"] = c.search_calls;
  j["search_space"] = to_string(c.search_space);
  j["gaps"] = c.gaps;
  j["diagnostics"] = {{"kernel", to_string(c.diagnostics.kernel)},
                      {"lambda", c.diagnostics.lambda},
                      {"lipschitz", c.diagnostics.gap.lipschitz},
                      {"ceiling", c.diagnostics.gap.ceiling},
                      {"delta", c.diagnostics.gap.delta}};
  return j;
}

json weights_json(const HyperParameters& hp) {
  return {{"eta", hp.weights.eta},
          {"upsilon", hp.weights.upsilon},
          {"lambda", hp.weights.lambda},
          {"temperature", hp.temperature}};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<bool> task_mask(std::size_t classes, const std::vector<int>& task_classes) {
  std::vector<bool> mask(classes, false);
  for (int c : task_classes) mask.at(static_cast<std::size_t>(c)) = true;
  return mask;
}

double mean_cls(const Learner& learner, TaskDataVault& vault, std::size_t tau, const std::vector<bool>& mask,
                std::span<const std::size_t> indices) {
  double sum = 0.0;
  for (std::size_t i : indices) {
    const LabeledSequence& s = vault.read(tau, i);
    sum += cls_loss(triple_features(learner.net, learner.bank, s.tokens), learner.heads,
                    static_cast<std::size_t>(s.label), mask);
  }
  return indices.empty() ? 0.0 : sum / static_cast<double>(indices.size());
}

void sgd_heads(BranchHeads& heads, const std::array<LinearHead, 3>& grads, double lr) {
  for (std::size_t h = 0; h < 3; ++h) {
    auto w = heads[h].weight.data();
    const auto gw = grads[h].weight.data();
    if (gw.empty()) continue;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
    for (std::size_t i = 0; i < heads[h].bias.size(); ++i) heads[h].bias[i] -= lr * grads[h].bias[i];
  }
}

}  // namespace

std::string canonical_json(const ExperimentConfig& config) { return config_json(config).dump(); }

std::string config_fingerprint(const ExperimentConfig& config, std::uint64_t seed) {
  const std::string text = canonical_json(config) + "#seed=" + std::to_string(seed);
  return hex64(CounterRng::hash(text));
}

std::vector<int> PrototypeClassifier::classes() const {
  std::vector<int> out;
  out.reserve(prototypes_.size());
  for (const auto& [c, p] : prototypes_) out.push_back(c);
  return out;
}

Matrix PrototypeClassifier::matrix() const {
  if (prototypes_.empty()) return {};
  const std::size_t f = prototypes_.begin()->second.size();
  Matrix m(prototypes_.size(), f);
  std::size_t r = 0;
  for (const auto& [c, p] : prototypes_) std::copy(p.begin(), p.end(), m.row(r++).begin());
  return m;
}

PrototypeClassifier PrototypeClassifier::with_classes(const Matrix& features, std::span<const int> labels) const {
  require(features.rows() == labels.size(), ErrorCode::kShapeMismatch, "one label per feature row required");
  if (!prototypes_.empty())
    require(features.cols() == prototypes_.begin()->second.size() || features.rows() == 0, ErrorCode::kShapeMismatch,
            "feature width differs from stored prototypes");
  std::map<int, std::vector<double>> sums;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(!prototypes_.contains(labels[i]), ErrorCode::kClassCollision,
            "class " + std::to_string(labels[i]) + " already has a prototype");
    auto& s = sums[labels[i]];
    if (s.empty()) s.assign(features.cols(), 0.0);
    const auto row = features.row(i);
    for (std::size_t k = 0; k < row.size(); ++k) s[k] += row[k];
    ++counts[labels[i]];
  }
  PrototypeClassifier out = *this;
  for (auto& [c, s] : sums) {
    const double n = static_cast<double>(counts[c]);
    for (double& v : s) {
      v /= n;
      require(std::isfinite(v), ErrorCode::kDivergence, "prototype is not finite");
    }
    out.prototypes_[c] = std::move(s);
    out.counts_[c] = counts[c];
  }
  return out;
}

Classification PrototypeClassifier::classify(std::span<const double> feature) const {
  require(!prototypes_.empty(), ErrorCode::kEmptyClassifier, "no prototypes stored");
  Classification out;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [c, p] : prototypes_) {
    require(p.size() == feature.size(), ErrorCode::kShapeMismatch, "feature width differs from prototypes");
    const double s = cosine_similarity(feature, p);
    out.classes.push_back(c);
    out.logits.push_back(s);
    if (s > best) {
      best = s;
      out.label = c;
    }
  }
  return out;
}

TaskDataVault::TaskDataVault(const TaskStream& stream)
    : stream_(&stream), reads_(stream.tasks.size(), 0), sealed_(stream.tasks.size(), false) {}

std::size_t TaskDataVault::size(std::size_t tau) const {
  require(tau >= 1 && tau <= reads_.size(), ErrorCode::kTaskOutOfRange, "task index out of range");
  return stream_->tasks[tau - 1].train.size();
}

const LabeledSequence& TaskDataVault::read(std::size_t tau, std::size_t index) {
  require(tau >= 1 && tau <= reads_.size(), ErrorCode::kTaskOutOfRange, "task index out of range");
  const auto& train = stream_->tasks[tau - 1].train;
  require(index < train.size(), ErrorCode::kInvalidArgument, "sample index out of range");
  ++reads_[tau - 1];
  if (sealed_[tau - 1]) ++after_seal_;
  return train[index];
}

void TaskDataVault::seal(std::size_t tau) {
  require(tau >= 1 && tau <= reads_.size(), ErrorCode::kTaskOutOfRange, "task index out of range");
  sealed_[tau - 1] = true;
}

bool TaskDataVault::sealed(std::size_t tau) const {
  require(tau >= 1 && tau <= reads_.size(), ErrorCode::kTaskOutOfRange, "task index out of range");
  return sealed_[tau - 1];
}

std::size_t TaskDataVault::reads(std::size_t tau) const {
  require(tau >= 1 && tau <= reads_.size(), ErrorCode::kTaskOutOfRange, "task index out of range");
  return reads_[tau - 1];
}

Learner Learner::create(const ToyBackbone& net, const AdapterConfig& adapters, std::size_t classes) {
  Learner l;
  l.net = net;
  l.bank = AdapterBank::initialize(net.config(), adapters);
  const std::size_t f = 2 * net.config().width;
  for (auto& h : l.heads) h = LinearHead::zeros(classes, f);
  l.classes = classes;
  return l;
}

TaskTrainResult train_task(Learner& learner, TaskDataVault& vault, std::size_t tau, const HyperParameters& hp,
                           const TrainOptions& options, std::uint64_t seed, ScalerState* scaler,
                           std::span<const std::size_t> indices) {
  options.validate();
  hp.weights.validate();
  require(hp.temperature > 0.0, ErrorCode::kInvalidArgument, "temperature must be positive");
  require(!vault.sealed(tau), ErrorCode::kInvalidArgument, "task is already sealed");
  std::vector<std::size_t> pool(indices.begin(), indices.end());
  if (pool.empty()) {
    pool.resize(vault.size(tau));
    std::iota(pool.begin(), pool.end(), std::size_t{0});
  }
  std::vector<int> task_classes;
  for (std::size_t i : pool) {
    const int c = vault.read(tau, i).label;
    if (std::find(task_classes.begin(), task_classes.end(), c) == task_classes.end()) task_classes.push_back(c);
  }
  const std::vector<bool> mask = task_mask(learner.classes, task_classes);

  const Matrix zeta = learner.prototypes.matrix();
  Matrix basis;
  if (zeta.rows() > 0) basis = truncated_svd(transpose(zeta), options.svd_energy).basis;

  TaskTrainResult result;
  result.initial_cls = mean_cls(learner, vault, tau, mask, pool);

  const std::size_t per_epoch = (pool.size() + options.batch - 1) / options.batch;
  const std::size_t total_steps = per_epoch * options.epochs;
  const CounterRng root = CounterRng(seed).fork("train-task").fork(static_cast<std::uint64_t>(tau));
  const std::size_t f = 2 * learner.net.config().width;
  std::size_t step = 0;
  HyperParameters active = hp;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<std::size_t> order = pool;
    CounterRng shuffle_rng = root.fork("epoch").fork(static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += options.batch, ++step) {
      const std::size_t end = std::min(order.size(), start + options.batch);
      const std::size_t b = end - start;
      const double inv_b = 1.0 / static_cast<double>(b);
      CounterRng step_rng = root.fork("step").fork(static_cast<std::uint64_t>(step));

      std::vector<TripleTrace> traces;
      traces.reserve(b);
      std::vector<std::size_t> labels(b);
      Matrix z(b, f);
      ClsGradients cls_grad;
      std::vector<FeatureTriple> d_feat(b);
      double cls = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const LabeledSequence& s = vault.read(tau, order[start + i]);
        labels[i] = static_cast<std::size_t>(s.label);
        traces.push_back(triple_trace(learner.net, learner.bank, s.tokens));
        const auto& hyb = traces.back().features.hybrid;
        std::copy(hyb.begin(), hyb.end(), z.row(i).begin());
        ClsGradients g;
        cls += cls_loss(traces.back().features, learner.heads, labels[i], mask, &g);
        d_feat[i] = std::move(g.features);
        for (std::size_t h = 0; h < 3; ++h) {
          if (cls_grad.heads[h].weight.empty()) {
            cls_grad.heads[h] = std::move(g.heads[h]);
          } else {
            auto dst = cls_grad.heads[h].weight.data();
            const auto src = g.heads[h].weight.data();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            for (std::size_t k = 0; k < cls_grad.heads[h].bias.size(); ++k)
              cls_grad.heads[h].bias[k] += g.heads[h].bias[k];
          }
        }
      }
      cls *= inv_b;

      const auto partners = choose_partners(labels, step_rng);
      Matrix negatives;
      if (zeta.rows() > 0) {
        const auto rows = sample_negative_rows(zeta.rows(), options.max_negatives, step_rng);
        negatives = Matrix(rows.size(), f);
        for (std::size_t r = 0; r < rows.size(); ++r)
          std::copy(zeta.row(rows[r]).begin(), zeta.row(rows[r]).end(), negatives.row(r).begin());
      }
      Matrix dz_dis, dz_orth;
      const double dis = dis_loss(z, partners, negatives, active.temperature, &dz_dis);
      const double orth = orth_loss(z, basis, &dz_orth);
      BankGradient reg_grad = BankGradient::zeros_like(learner.bank);
      const double reg = reg_loss(learner.bank, &reg_grad);

      if (scaler != nullptr) {
        *scaler = scale_step(*scaler, dis, orth, reg);
        active.weights = {scaler->eta(), scaler->upsilon(), scaler->lambda()};
      }
      const LossBreakdown loss = total_loss(cls, dis, orth, reg, active.weights);

      BankGradient grad = BankGradient::zeros_like(learner.bank);
      std::vector<double> d_s1(f), d_s2(f), d_hyb(f);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < f; ++k) {
          d_s1[k] = inv_b * d_feat[i].s1[k];
          d_s2[k] = inv_b * d_feat[i].s2[k];
          d_hyb[k] = inv_b * d_feat[i].hybrid[k];
          if (!dz_dis.empty()) d_hyb[k] += active.weights.eta * dz_dis(i, k);
          if (!dz_orth.empty()) d_hyb[k] += active.weights.upsilon * dz_orth(i, k);
        }
        triple_backward(learner.net, learner.bank, traces[i], d_s1, d_s2, d_hyb, TripleGrads{&grad, nullptr, nullptr});
      }

      const double lr = total_steps == 0 ? 0.0
                                         : options.learning_rate * 0.5 *
                                               (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                                               static_cast<double>(total_steps)));
      for (AdapterModule m : kAdapterModules) {
        axpy(grad.of(m), active.weights.lambda, reg_grad.of(m));
        require(all_finite(grad.of(m).values()), ErrorCode::kDivergence, "non-finite adapter gradient");
        axpy(learner.bank.module(m).curr, -lr, grad.of(m));
      }
      for (std::size_t h = 0; h < 3; ++h) {
        for (double& v : cls_grad.heads[h].weight.data()) v *= inv_b;
        for (double& v : cls_grad.heads[h].bias) v *= inv_b;
      }
      sgd_heads(learner.heads, cls_grad.heads, lr);

      result.trace.push_back({tau, step, lr, active.temperature, active.weights, loss});
    }
  }
  result.final_cls = mean_cls(learner, vault, tau, mask, pool);
  require(std::isfinite(result.final_cls), ErrorCode::kDivergence, "classification loss diverged");
  result.last_weights = active.weights;
  return result;
}

void finish_task(Learner& learner, TaskDataVault& vault, std::size_t tau, bool last, bool ema) {
  const std::size_t n = vault.size(tau);
  const std::size_t f = 2 * learner.net.config().width;
  Matrix features(n, f);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const LabeledSequence& s = vault.read(tau, i);
    const auto e = triple_features(learner.net, learner.bank, s.tokens).hybrid;
    std::copy(e.begin(), e.end(), features.row(i).begin());
    labels[i] = s.label;
  }
  learner.prototypes = learner.prototypes.with_classes(features, labels);
  vault.seal(tau);
  if (last) return;
  if (ema) {
    ema_update_bank(learner.bank, tau - 1);
  } else {
    for (AdapterModule m : kAdapterModules) learner.bank.module(m).pre = learner.bank.module(m).curr;
  }
}

double evaluate(const Learner& learner, const TaskStream& stream, std::size_t upto) {
  require(upto >= 1 && upto <= stream.tasks.size(), ErrorCode::kTaskOutOfRange, "stage out of range");
  std::size_t correct = 0, total = 0;
  for (std::size_t t = 0; t < upto; ++t) {
    for (const auto& s : stream.tasks[t].test) {
      const auto e = triple_features(learner.net, learner.bank, s.tokens).hybrid;
      if (learner.prototypes.classify(e).label == s.label) ++correct;
      ++total;
    }
  }
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

double average_accuracy(std::span<const double> accuracies) {
  require(!accuracies.empty(), ErrorCode::kInvalidArgument, "no stages to average");
  double s = 0.0;
  for (double a : accuracies) s += a;
  return s / static_cast<double>(accuracies.size());
}

PretrainedBackbone pretrain_for(const ExperimentConfig& config) {
  const auto& p = config.pretrain;
  const std::uint64_t seed = CounterRng(config.backbone.seed).fork("pretrain-data").next_u64();
  const auto data = pretraining_set(p.classes, p.per_class, config.backbone.patches, config.backbone.width, p.noise,
                                    seed);
  std::vector<LabeledSequence> train, held;
  const std::size_t held_per_class =
      static_cast<std::size_t>(std::floor(p.held_out_fraction * static_cast<double>(p.per_class)));
  std::map<int, std::size_t> seen;
  for (const auto& s : data) (seen[s.label]++ < held_per_class ? held : train).push_back(s);
  PretrainOptions opts;
  opts.epochs = p.epochs;
  opts.batch = p.batch;
  opts.learning_rate = p.learning_rate;
  opts.seed = config.backbone.seed;
  PretrainResult r = pretrain_backbone(config.backbone, train, opts);
  PretrainedBackbone out;
  out.held_out_accuracy = held.empty() ? 0.0 : pretrain_accuracy(r, held);
  out.net = std::move(r.net);
  return out;
}

namespace {

HyperParameters search_point(const ExperimentConfig& config, const Point3& p) {
  if (config.search_space == SearchSpace::kWeights) return {{p[0], p[1], p[2]}, config.train.temperature};
  return {{config.weights.eta, p[1], p[2]}, p[0]};
}

/// Validation error of a candidate: train a copy on `fit`, add temporary
/// prototypes from `fit`, classify `held` (all current-task samples).
double validation_error(const Learner& base, TaskDataVault& vault, std::size_t tau, const HyperParameters& hp,
                        const TrainOptions& options, std::uint64_t seed, std::span<const std::size_t> fit,
                        std::span<const std::size_t> held) {
  Learner trial = base;
  train_task(trial, vault, tau, hp, options, seed, nullptr, fit);
  const std::size_t f = 2 * trial.net.config().width;
  Matrix features(fit.size(), f);
  std::vector<int> labels(fit.size());
  for (std::size_t i = 0; i < fit.size(); ++i) {
    const LabeledSequence& s = vault.read(tau, fit[i]);
    const auto e = triple_features(trial.net, trial.bank, s.tokens).hybrid;
    std::copy(e.begin(), e.end(), features.row(i).begin());
    labels[i] = s.label;
  }
  const PrototypeClassifier protos = trial.prototypes.with_classes(features, labels);
  std::size_t wrong = 0;
  for (std::size_t i : held) {
    const LabeledSequence& s = vault.read(tau, i);
    if (protos.classify(triple_features(trial.net, trial.bank, s.tokens).hybrid).label != s.label) ++wrong;
  }
  return held.empty() ? 0.0 : static_cast<double>(wrong) / static_cast<double>(held.size());
}

void split_validation(TaskDataVault& vault, std::size_t tau, std::uint64_t seed, std::vector<std::size_t>& fit,
                      std::vector<std::size_t>& held) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < vault.size(tau); ++i) by_class[vault.read(tau, i).label].push_back(i);
  CounterRng rng = CounterRng(seed).fork("validation").fork(static_cast<std::uint64_t>(tau));
  for (auto& [c, idx] : by_class) {
    rng.shuffle(idx);
    const std::size_t h = idx.size() >= 2 ? std::max<std::size_t>(1, idx.size() / 5) : 0;
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(h));
    fit.insert(fit.end(), idx.begin() + static_cast<std::ptrdiff_t>(h), idx.end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(held.begin(), held.end());
}

}  // namespace

TaskStream run_stream(const ExperimentConfig& config, std::uint64_t seed) {
  StreamSpec spec = config.stream;
  spec.seed = CounterRng(seed).fork("run").fork("stream").next_u64();
  return synth_stream(spec);
}

AdapterConfig run_adapters(const ExperimentConfig& config, std::uint64_t seed) {
  AdapterConfig ac = config.adapters;
  ac.seed = CounterRng(seed).fork("run").fork("adapters").next_u64();
  return ac;
}

RunReport run_continual(const ExperimentConfig& config, std::uint64_t seed, const PretrainedBackbone* pretrained) {
  config.validate();
  const CounterRng root = CounterRng(seed).fork("run");
  RunReport report;
  report.seed = seed;
  report.fingerprint = config_fingerprint(config, seed);

  PretrainedBackbone local;
  if (pretrained == nullptr) {
    local = pretrain_for(config);
    pretrained = &local;
  }
  report.pretrain_accuracy = pretrained->held_out_accuracy;

  const TaskStream stream = run_stream(config, seed);
  report.class_order = stream.class_order;
  report.total_train = stream.total_train();

  Learner learner = Learner::create(pretrained->net, run_adapters(config, seed), config.stream.classes);
  TaskDataVault vault(stream);
  ScalerState scaler = ScalerState::with_defaults();
  const std::uint64_t train_seed = root.fork("train").next_u64();
  std::vector<Point3> warm;

  const std::size_t tasks = stream.tasks.size();
  for (std::size_t tau = 1; tau <= tasks; ++tau) {
    StageRecord stage;
    stage.task = tau;
    HyperParameters hp{config.weights, config.train.temperature};
    if (config.ahps == AhpsMode::kBayes) {
      std::vector<std::size_t> fit, held;
      split_validation(vault, tau, train_seed, fit, held);
      SearchOptions so;
      so.n_calls = config.search_calls;
      so.seed = root.fork("search").fork(static_cast<std::uint64_t>(tau)).next_u64();
      so.warm_start = warm;
      const auto objective = [&](const Point3& p) {
        const HyperParameters cand = search_point(config, p);
        return validation_error(learner, vault, tau, cand, config.train, train_seed, fit, held);
      };
      const SearchResult sr = gp_search(objective, SearchBox{}, so);
      warm = carry_forward(sr);
      stage.search = sr.history;
      hp = search_point(config, sr.best_point);
    }
    const TaskTrainResult tr = train_task(learner, vault, tau, hp, config.train, train_seed,
                                          config.ahps == AhpsMode::kDynamic ? &scaler : nullptr);
    report.losses.insert(report.losses.end(), tr.trace.begin(), tr.trace.end());
    stage.chosen = {tr.last_weights, hp.temperature};
    finish_task(learner, vault, tau, tau == tasks, config.ema);
    stage.accuracy = evaluate(learner, stream, tau);
    report.accuracies.push_back(stage.accuracy);
    report.stages.push_back(std::move(stage));
  }
  report.average = average_accuracy(report.accuracies);
  report.final_accuracy = report.accuracies.back();
  report.reads_after_seal = vault.reads_after_seal();
  if (config.gaps) {
    const RegimeState state = build_regime(stream, learner.net, learner.bank, config.stream.classes, config.diagnostics);
    report.gaps = gap_diagnostics(state, config.diagnostics, stream.total_train());
  }
  return report;
}

std::string report_json(const RunReport& r) {
  json j;
  j["seed"] = r.seed;
  j["fingerprint"] = r.fingerprint;
  j["class_order"] = r.class_order;
  j["accuracies"] = r.accuracies;
  j["average_accuracy"] = r.average;
  j["final_accuracy"] = r.final_accuracy;
  j["pretrain_accuracy"] = r.pretrain_accuracy;
  j["reads_after_seal"] = r.reads_after_seal;
  j["total_train"] = r.total_train;
  json stages = json::array();
  for (const auto& s : r.stages) {
    json st = {{"task", s.task}, {"accuracy", s.accuracy}, {"chosen", weights_json(s.chosen)}};
    json hist = json::array();
    for (const auto& h : s.search)
      hist.push_back({{"point", {h.point[0], h.point[1], h.point[2]}}, {"value", h.value}});
    st["search"] = hist;
    stages.push_back(st);
  }
  j["stages"] = stages;
  json gaps = json::array();
  for (std::size_t t = 0; t < r.gaps.size(); ++t) {
    const auto& g = r.gaps[t];
    gaps.push_back({{"task", t + 1},
                    {"empirical", g.empirical},
                    {"rademacher", g.rademacher},
                    {"confidence", g.confidence},
                    {"total", g.total}});
  }
  j["gaps"] = gaps;
  j["loss_steps"] = r.losses.size();
  return j.dump(2) + "\n";
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string accuracy_csv(const RunReport& r) {
  std::ostringstream os;
  os << "stage,accuracy\n";
  for (std::size_t t = 0; t < r.accuracies.size(); ++t) os << (t + 1) << ',' << fmt(r.accuracies[t]) << '\n';
  return os.str();
}

std::string losses_csv(const RunReport& r) {
  std::ostringstream os;
  os << "task,step,cls,dis,orth,reg,eta,upsilon,lambda,total\n";
  for (const auto& row : r.losses) {
    os << row.task << ',' << row.step << ',' << fmt(row.loss.cls) << ',' << fmt(row.loss.dis) << ','
       << fmt(row.loss.orth) << ',' << fmt(row.loss.reg) << ',' << fmt(row.weights.eta) << ','
       << fmt(row.weights.upsilon) << ',' << fmt(row.weights.lambda) << ',' << fmt(row.loss.total) << '\n';
  }
  return os.str();
}

void validate_report_json(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, std::string("report is not JSON: ") + e.what());
  }
  const auto need = [&](const char* key, json::value_t type) {
    require(j.contains(key), ErrorCode::kConfigInvalid, std::string("report lacks '") + key + "'");
    const auto t = j[key].type();
    const bool numeric = type == json::value_t::number_float &&
                         (t == json::value_t::number_float || t == json::value_t::number_integer ||
                          t == json::value_t::number_unsigned);
    const bool integral = type == json::value_t::number_unsigned &&
                          (t == json::value_t::number_unsigned || t == json::value_t::number_integer);
    require(numeric || integral || t == type, ErrorCode::kConfigInvalid, std::string("report field '") + key +
                                                                             "' has the wrong type");
  };
  need("seed", json::value_t::number_unsigned);
  need("fingerprint", json::value_t::string);
  need("class_order", json::value_t::array);
  need("accuracies", json::value_t::array);
  need("average_accuracy", json::value_t::number_float);
  need("final_accuracy", json::value_t::number_float);
  need("stages", json::value_t::array);
  need("gaps", json::value_t::array);
  need("reads_after_seal", json::value_t::number_unsigned);
  const auto& acc = j["accuracies"];
  require(!acc.empty() && acc.size() == j["stages"].size(), ErrorCode::kConfigInvalid,
          "one accuracy per stage required");
  double sum = 0.0;
  for (const auto& a : acc) {
    require(a.is_number(), ErrorCode::kConfigInvalid, "accuracies must be numbers");
    const double v = a.get<double>();
    require(v >= 0.0 && v <= 100.0, ErrorCode::kConfigInvalid, "accuracy outside [0, 100]");
    sum += v;
  }
  require(j["average_accuracy"].get<double>() == sum / static_cast<double>(acc.size()), ErrorCode::kConfigInvalid,
          "average accuracy is not the stage mean");
  require(j["final_accuracy"].get<double>() == acc.back().get<double>(), ErrorCode::kConfigInvalid,
          "final accuracy is not the last stage");
  require(j["fingerprint"].get<std::string>().size() == 16, ErrorCode::kConfigInvalid, "fingerprint must be 16 hex");
}

std::string to_string(DiagnosticKernel kind) {
  switch (kind) {
    case DiagnosticKernel::kLinear: return "linear";
    case DiagnosticKernel::kRbf: return "rbf";
    case DiagnosticKernel::kEmpiricalNtk: return "ntk";
  }
  return "rbf";
}

DiagnosticKernel parse_diagnostic_kernel(std::string_view name) {
  if (name == "linear") return DiagnosticKernel::kLinear;
  if (name == "rbf") return DiagnosticKernel::kRbf;
  if (name == "ntk") return DiagnosticKernel::kEmpiricalNtk;
  throw Error(ErrorCode::kConfigInvalid, "unknown diagnostic kernel '" + std::string(name) + "'");
}

RegimeState build_regime(const TaskStream& stream, const ToyBackbone& net, const AdapterBank& bank,
                         std::size_t classes, const DiagnosticOptions& options) {
  require(!stream.tasks.empty(), ErrorCode::kInvalidArgument, "stream has no tasks");
  const bool ntk = options.kernel == DiagnosticKernel::kEmpiricalNtk;
  const auto inputs_of = [&](const TaskData& t) {
    const std::size_t n = t.train.size();
    const std::size_t d = ntk ? net.config().tokens() * net.config().width : net.config().width;
    Matrix x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      if (ntk) {
        const auto v = t.train[i].tokens.data();
        std::copy(v.begin(), v.end(), x.row(i).begin());
      } else {
        const auto e = cls_feature(net, t.train[i].tokens);
        std::copy(e.begin(), e.end(), x.row(i).begin());
      }
    }
    return x;
  };
  Kernel kernel;
  const Matrix first = inputs_of(stream.tasks.front());
  switch (options.kernel) {
    case DiagnosticKernel::kLinear: kernel = Kernel::linear(); break;
    case DiagnosticKernel::kRbf: kernel = Kernel::rbf(median_heuristic_gamma(first)); break;
    case DiagnosticKernel::kEmpiricalNtk:
      kernel = Kernel::empirical_ntk(std::make_shared<AdapterNtkModel>(net, bank, NtkReadout::kHybrid));
      break;
  }
  RegimeState state(classes);
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    const TaskData& task = stream.tasks[t];
    Matrix y(task.train.size(), classes);
    for (std::size_t i = 0; i < task.train.size(); ++i) y(i, static_cast<std::size_t>(task.train[i].label)) = 1.0;
    state = fit_task(state, t == 0 ? first : inputs_of(task), y, kernel, options.lambda);
  }
  return state;
}

std::vector<GapReport> gap_diagnostics(const RegimeState& state, const DiagnosticOptions& options,
                                       std::size_t total_samples) {
  GapConfig cfg = options.gap;
  cfg.total_samples = total_samples;
  std::vector<GapReport> out;
  for (std::size_t tau = 1; tau <= state.tasks(); ++tau) out.push_back(population_bound(state, tau, cfg));
  return out;
}

}  // namespace ntkcl
