#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ntkcl/adapters.hpp"
#include "ntkcl/ahps.hpp"
#include "ntkcl/data.hpp"
#include "ntkcl/gaps.hpp"
#include "ntkcl/objective.hpp"
#include "ntkcl/regime.hpp"
#include "ntkcl/toynet.hpp"

namespace ntkcl {

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch = 16;
  double learning_rate = 0.01;  // cosine-annealed to 0 over each task
  double temperature = kDefaultTemperature;
  double svd_energy = 0.95;
  std::size_t max_negatives = kMaxNegatives;
  void validate() const;
};

enum class AhpsMode { kFixed, kDynamic, kBayes };
std::string to_string(AhpsMode mode);
/// Accepts "fixed", "dynamic", "bayes".
AhpsMode parse_ahps_mode(std::string_view name);

/// How the three search coordinates map onto hyper-parameters:
/// kTemperature searches (T, υ, λ) with η fixed, kWeights searches (η, υ, λ) with T fixed.
enum class SearchSpace { kTemperature, kWeights };
std::string to_string(SearchSpace space);
/// Accepts "temperature", "weights".
SearchSpace parse_search_space(std::string_view name);

struct PretrainSpec {
  std::size_t classes = 8;
  std::size_t per_class = 40;
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double learning_rate = 3e-3;
  double noise = 1.0;
  double held_out_fraction = 0.25;
};

enum class DiagnosticKernel { kLinear, kRbf, kEmpiricalNtk };
std::string to_string(DiagnosticKernel kind);
DiagnosticKernel parse_diagnostic_kernel(std::string_view name);

struct DiagnosticOptions {
  DiagnosticKernel kernel = DiagnosticKernel::kRbf;
  double lambda = kDefaultRidge;
  GapConfig gap;
};

struct ExperimentConfig {
  BackboneConfig backbone;
  PretrainSpec pretrain;
  AdapterConfig adapters;
  LossWeights weights;
  TrainOptions train;
  StreamSpec stream;
  bool ema = true;
  AhpsMode ahps = AhpsMode::kFixed;
  std::size_t search_calls = 10;
  SearchSpace search_space = SearchSpace::kTemperature;
  bool gaps = false;
  DiagnosticOptions diagnostics;
  void validate() const;
};

/// Canonical JSON of the configuration (keys sorted).
std::string canonical_json(const ExperimentConfig& config);
/// FNV-1a of canonical_json plus the run seed, as 16 hex digits.
std::string config_fingerprint(const ExperimentConfig& config, std::uint64_t seed);

struct Classification {
  std::vector<int> classes;    // ascending
  std::vector<double> logits;  // cosine similarity per class
  int label = -1;
};

/// Class-mean prototypes of E_HAE features; stores no samples.
class PrototypeClassifier {
 public:
  bool empty() const noexcept { return prototypes_.empty(); }
  std::size_t size() const noexcept { return prototypes_.size(); }
  const std::map<int, std::vector<double>>& prototypes() const noexcept { return prototypes_; }
  const std::map<int, std::size_t>& counts() const noexcept { return counts_; }
  std::vector<int> classes() const;
  /// One row per class in ascending id order.
  Matrix matrix() const;

  /// Adds the mean feature of every label present; throws kClassCollision when
  /// a label already has a prototype.
  PrototypeClassifier with_classes(const Matrix& features, std::span<const int> labels) const;

  /// Cosine logits; ties go to the lowest class id. Throws kEmptyClassifier.
  Classification classify(std::span<const double> feature) const;

 private:
  std::map<int, std::vector<double>> prototypes_;
  std::map<int, std::size_t> counts_;
};

/// Training-sample gate. Every read is counted; reads of a task after it is
/// sealed are recorded separately.
class TaskDataVault {
 public:
  explicit TaskDataVault(const TaskStream& stream);
  std::size_t tasks() const noexcept { return reads_.size(); }
  std::size_t size(std::size_t tau) const;
  const LabeledSequence& read(std::size_t tau, std::size_t index);
  void seal(std::size_t tau);
  bool sealed(std::size_t tau) const;
  std::size_t reads(std::size_t tau) const;
  std::size_t reads_after_seal() const noexcept { return after_seal_; }

 private:
  const TaskStream* stream_;
  std::vector<std::size_t> reads_;
  std::vector<bool> sealed_;
  std::size_t after_seal_ = 0;
};

struct Learner {
  ToyBackbone net;
  AdapterBank bank;
  BranchHeads heads;
  PrototypeClassifier prototypes;
  std::size_t classes = 0;

  static Learner create(const ToyBackbone& net, const AdapterConfig& adapters, std::size_t classes);
};

struct LossRow {
  std::size_t task = 0;  // 1-based
  std::size_t step = 0;
  double learning_rate = 0.0;
  double temperature = 0.0;
  LossWeights weights;
  LossBreakdown loss;
};

struct TaskTrainResult {
  std::vector<LossRow> trace;
  double initial_cls = 0.0;  // mean over the task's training set before training
  double final_cls = 0.0;    // and after
  LossWeights last_weights;
};

struct HyperParameters {
  LossWeights weights;
  double temperature = kDefaultTemperature;
};

/// Trains curr halves and heads on task τ (1-based). `indices` restricts the
/// training samples (all when empty). With a scaler, weights follow it.
TaskTrainResult train_task(Learner& learner, TaskDataVault& vault, std::size_t tau, const HyperParameters& hp,
                           const TrainOptions& options, std::uint64_t seed, ScalerState* scaler = nullptr,
                           std::span<const std::size_t> indices = {});

/// Prototype update from the task's training features, seal, then EMA unless
/// τ is the last task. With EMA off pre is overwritten by curr instead.
void finish_task(Learner& learner, TaskDataVault& vault, std::size_t tau, bool last, bool ema);

/// Accuracy in percent over the test splits of tasks 1..upto.
double evaluate(const Learner& learner, const TaskStream& stream, std::size_t upto);

double average_accuracy(std::span<const double> accuracies);

struct StageRecord {
  std::size_t task = 0;
  double accuracy = 0.0;
  HyperParameters chosen;
  std::vector<SearchRecord> search;
};

struct RunReport {
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::vector<int> class_order;
  std::vector<StageRecord> stages;
  std::vector<double> accuracies;
  double average = 0.0;
  double final_accuracy = 0.0;
  double pretrain_accuracy = 0.0;
  std::vector<LossRow> losses;
  std::size_t reads_after_seal = 0;
  std::size_t total_train = 0;
  std::vector<GapReport> gaps;
};

struct PretrainedBackbone {
  ToyBackbone net;
  double held_out_accuracy = 0.0;
};

PretrainedBackbone pretrain_for(const ExperimentConfig& config);

/// Stream and adapter initialization a run with this seed uses.
TaskStream run_stream(const ExperimentConfig& config, std::uint64_t seed);
AdapterConfig run_adapters(const ExperimentConfig& config, std::uint64_t seed);

/// Full class-incremental run; `pretrained` skips backbone pretraining.
RunReport run_continual(const ExperimentConfig& config, std::uint64_t seed,
                        const PretrainedBackbone* pretrained = nullptr);

std::string report_json(const RunReport& report);
std::string accuracy_csv(const RunReport& report);
std::string losses_csv(const RunReport& report);
/// Throws kConfigInvalid when `json_text` is not a well-formed report.
void validate_report_json(std::string_view json_text);

/// Sequential kernel regression of one-hot labels over the stream's training
/// splits. Inputs are frozen class features (linear, RBF) or flattened tokens
/// with the adapter NTK.
RegimeState build_regime(const TaskStream& stream, const ToyBackbone& net, const AdapterBank& bank,
                         std::size_t classes, const DiagnosticOptions& options);

/// population_bound for every task, with N = total training samples.
std::vector<GapReport> gap_diagnostics(const RegimeState& state, const DiagnosticOptions& options,
                                       std::size_t total_samples);

}  // namespace ntkcl
