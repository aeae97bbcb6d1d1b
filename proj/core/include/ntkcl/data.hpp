#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ntkcl/toynet.hpp"

namespace ntkcl {

enum class StreamKind { kBlobs, kRings, kPatchTextures };

std::string to_string(StreamKind kind);
/// Accepts "blobs", "rings", "patch-textures".
StreamKind parse_stream_kind(std::string_view name);

struct StreamSpec {
  StreamKind kind = StreamKind::kBlobs;
  std::size_t classes = 10;
  std::size_t per_class = 20;  // train + test samples per class
  std::size_t tasks = 5;
  std::uint64_t seed = 0;
  double noise = 1.0;
  double test_fraction = 0.2;
  std::size_t patches = 8;
  std::size_t width = 32;
  /// Optional exact class order (for example loaded from a JSON file).
  std::optional<std::vector<int>> class_order;
};

struct ClassSegmentation {
  std::vector<int> order;
  std::vector<std::vector<int>> tasks;
};

/// Fisher-Yates permutation of 0..C-1 from the counter-based generator, cut
/// into `num_tasks` contiguous groups; the remainder goes to the earliest tasks.
ClassSegmentation segment_classes(std::size_t num_classes, std::size_t num_tasks, std::uint64_t seed);
/// Same split over a caller-supplied permutation.
ClassSegmentation segment_order(std::vector<int> order, std::size_t num_tasks);

std::vector<int> parse_class_order(std::string_view json_text);
std::vector<int> load_class_order(const std::string& path);
/// Throws kNotAPermutation unless `order` is a permutation of 0..n-1.
void check_permutation(const std::vector<int>& order);

struct TaskData {
  std::vector<int> classes;
  std::vector<LabeledSequence> train;
  std::vector<LabeledSequence> test;
};

struct TaskStream {
  std::vector<int> class_order;
  std::vector<TaskData> tasks;

  std::size_t train_size(std::size_t tau) const { return tasks.at(tau).train.size(); }
  std::size_t total_train() const;
};

/// One sample of class `label`: N patch tokens drawn from the class-conditional
/// distribution, with a zero class-token placeholder in row 0.
TokenSequence synth_sample(StreamKind kind, int label, std::size_t patches, std::size_t width, double noise,
                           std::uint64_t seed, std::uint64_t index);

TaskStream synth_stream(const StreamSpec& spec);

/// Pretraining set from a class family disjoint from every stream (different
/// class-mean generator).
std::vector<LabeledSequence> pretraining_set(std::size_t classes, std::size_t per_class, std::size_t patches,
                                             std::size_t width, double noise, std::uint64_t seed);

}  // namespace ntkcl
