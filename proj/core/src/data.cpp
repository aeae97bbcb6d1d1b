#include "ntkcl/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "ntkcl/error.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {

namespace {

constexpr std::string_view kStreamFamily = "stream-family";
constexpr std::string_view kPretrainFamily = "pretrain-family";

std::vector<double> unit_gaussian(CounterRng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  const double norm = std::sqrt(norm_sq(v));
  for (double& x : v) x /= norm;
  return v;
}

TokenSequence render(StreamKind kind, std::string_view family, int label, std::size_t patches, std::size_t width,
                     double noise, std::uint64_t seed, std::uint64_t index) {
  CounterRng cls = CounterRng(seed).fork(family).fork(static_cast<std::uint64_t>(label));
  CounterRng smp = CounterRng(seed).fork(family).fork("sample").fork(static_cast<std::uint64_t>(label)).fork(index);

  Matrix mean(patches, width);
  for (double& v : mean.data()) v = cls.normal();

  TokenSequence x(patches + 1, width);
  switch (kind) {
    case StreamKind::kBlobs:
      for (std::size_t k = 0; k < patches; ++k)
        for (std::size_t j = 0; j < width; ++j) x(k + 1, j) = mean(k, j) + noise * smp.normal();
      break;
    case StreamKind::kRings: {
      const std::vector<double> u = unit_gaussian(cls, width);
      std::vector<double> v = unit_gaussian(cls, width);
      const double uv = dot(u, v);
      for (std::size_t j = 0; j < width; ++j) v[j] -= uv * u[j];
      const double vn = std::sqrt(norm_sq(v));
      for (double& e : v) e /= vn;
      const double radius = 1.5 + cls.uniform();
      const double theta = 2.0 * std::numbers::pi * smp.uniform();
      for (std::size_t k = 0; k < patches; ++k) {
        const double a = theta + 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(patches);
        for (std::size_t j = 0; j < width; ++j)
          x(k + 1, j) = 0.5 * mean(k, j) + radius * (std::cos(a) * u[j] + std::sin(a) * v[j]) + noise * smp.normal();
      }
      break;
    }
    case StreamKind::kPatchTextures: {
      const double omega = cls.uniform(0.3, 1.5);
      const double phi = cls.uniform(0.3, 1.5);
      const double psi = 2.0 * std::numbers::pi * smp.uniform();
      for (std::size_t k = 0; k < patches; ++k)
        for (std::size_t j = 0; j < width; ++j)
          x(k + 1, j) = 1.5 * std::sin(omega * static_cast<double>(k) + phi * static_cast<double>(j) + psi) +
                        0.3 * mean(k, j) + noise * smp.normal();
      break;
    }
  }
  return x;
}

}  // namespace

std::string to_string(StreamKind kind) {
  switch (kind) {
    case StreamKind::kBlobs:
      return "blobs";
    case StreamKind::kRings:
      return "rings";
    case StreamKind::kPatchTextures:
      return "patch-textures";
  }
  return "unknown";
}

StreamKind parse_stream_kind(std::string_view name) {
  if (name == "blobs") return StreamKind::kBlobs;
  if (name == "rings") return StreamKind::kRings;
  if (name == "patch-textures") return StreamKind::kPatchTextures;
  throw Error(ErrorCode::kConfigInvalid, "unknown stream kind '" + std::string(name) + "'");
}

void check_permutation(const std::vector<int>& order) {
  std::vector<bool> seen(order.size(), false);
  for (int c : order) {
    require(c >= 0 && static_cast<std::size_t>(c) < order.size(), ErrorCode::kNotAPermutation,
            "class id " + std::to_string(c) + " out of range");
    require(!seen[static_cast<std::size_t>(c)], ErrorCode::kNotAPermutation,
            "class id " + std::to_string(c) + " repeated");
    seen[static_cast<std::size_t>(c)] = true;
  }
}

ClassSegmentation segment_order(std::vector<int> order, std::size_t num_tasks) {
  check_permutation(order);
  require(num_tasks >= 1 && num_tasks <= order.size(), ErrorCode::kInvalidCounts,
          "need 1 <= tasks <= classes, got " + std::to_string(num_tasks) + " tasks for " +
              std::to_string(order.size()) + " classes");
  ClassSegmentation seg;
  const std::size_t base = order.size() / num_tasks;
  const std::size_t extra = order.size() % num_tasks;
  std::size_t pos = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const std::size_t n = base + (t < extra ? 1 : 0);
    seg.tasks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                           order.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  seg.order = std::move(order);
  return seg;
}

ClassSegmentation segment_classes(std::size_t num_classes, std::size_t num_tasks, std::uint64_t seed) {
  require(num_classes >= 1, ErrorCode::kInvalidCounts, "need at least one class");
  std::vector<int> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = static_cast<int>(i);
  CounterRng(seed).fork("class-order").shuffle(order);
  return segment_order(std::move(order), num_tasks);
}

std::vector<int> parse_class_order(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kNotAPermutation, std::string("class order is not valid JSON: ") + e.what());
  }
  require(j.is_array(), ErrorCode::kNotAPermutation, "class order must be a JSON array");
  std::vector<int> order;
  for (const auto& v : j) {
    require(v.is_number_integer(), ErrorCode::kNotAPermutation, "class order entries must be integers");
    order.push_back(v.get<int>());
  }
  check_permutation(order);
  return order;
}

std::vector<int> load_class_order(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open class order file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_class_order(buf.str());
}

std::size_t TaskStream::total_train() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.train.size();
  return n;
}

TokenSequence synth_sample(StreamKind kind, int label, std::size_t patches, std::size_t width, double noise,
                           std::uint64_t seed, std::uint64_t index) {
  return render(kind, kStreamFamily, label, patches, width, noise, seed, index);
}

TaskStream synth_stream(const StreamSpec& spec) {
  require(spec.classes >= 1 && spec.per_class >= 1 && spec.patches >= 1 && spec.width >= 1,
          ErrorCode::kInvalidCounts, "stream counts must be positive");
  require(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0, ErrorCode::kInvalidCounts,
          "test fraction must lie in [0, 1)");
  ClassSegmentation seg;
  if (spec.class_order) {
    require(spec.class_order->size() == spec.classes, ErrorCode::kNotAPermutation,
            "class order length differs from class count");
    seg = segment_order(*spec.class_order, spec.tasks);
  } else {
    seg = segment_classes(spec.classes, spec.tasks, spec.seed);
  }

  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(spec.per_class) * spec.test_fraction + 0.5));
  TaskStream stream;
  stream.class_order = seg.order;
  for (const auto& classes : seg.tasks) {
    TaskData task;
    task.classes = classes;
    for (int c : classes) {
      std::vector<std::size_t> idx(spec.per_class);
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      CounterRng(spec.seed).fork("split").fork(static_cast<std::uint64_t>(c)).shuffle(idx);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        LabeledSequence s{synth_sample(spec.kind, c, spec.patches, spec.width, spec.noise, spec.seed, idx[i]), c};
        (i < n_test ? task.test : task.train).push_back(std::move(s));
      }
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

std::vector<LabeledSequence> pretraining_set(std::size_t classes, std::size_t per_class, std::size_t patches,
                                             std::size_t width, double noise, std::uint64_t seed) {
  std::vector<LabeledSequence> out;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i)
      out.push_back({render(StreamKind::kBlobs, kPretrainFamily, static_cast<int>(c), patches, width, noise, seed, i),
                     static_cast<int>(c)});
  return out;
}

}  // namespace ntkcl
