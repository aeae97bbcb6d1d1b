#include "ntkcl/config.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <toml.hpp>

#include "ntkcl/data.hpp"
#include "ntkcl/error.hpp"

namespace ntkcl {

namespace {

namespace fs = std::filesystem;

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::kConfigInvalid, what); }

void check_keys(const toml::table& t, const std::string& where, const std::set<std::string>& allowed) {
  for (const auto& [k, v] : t) {
    const std::string key(k.str());
    if (!allowed.contains(key)) invalid("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

class Reader {
 public:
  Reader(const toml::table& t, std::string where) : t_(t), where_(std::move(where)) {}

  template <typename T>
  void unsigned_int(const char* key, T& out) {
    if (const auto* n = t_.get(key)) {
      const auto v = n->value_exact<std::int64_t>();
      if (!v || *v < 0) invalid(name(key) + " must be a non-negative integer");
      out = static_cast<T>(*v);
    }
  }
  void real(const char* key, double& out) {
    if (const auto* n = t_.get(key)) {
      if (const auto i = n->value_exact<std::int64_t>()) {
        out = static_cast<double>(*i);
      } else if (const auto d = n->value_exact<double>()) {
        out = *d;
      } else {
        invalid(name(key) + " must be a number");
      }
    }
  }
  void boolean(const char* key, bool& out) {
    if (const auto* n = t_.get(key)) {
      const auto v = n->value_exact<bool>();
      if (!v) invalid(name(key) + " must be a boolean");
      out = *v;
    }
  }
  std::optional<std::string> string(const char* key) {
    if (const auto* n = t_.get(key)) {
      const auto v = n->value_exact<std::string>();
      if (!v) invalid(name(key) + " must be a string");
      return *v;
    }
    return std::nullopt;
  }

 private:
  std::string name(const char* key) const { return where_.empty() ? key : where_ + "." + key; }
  const toml::table& t_;
  std::string where_;
};

const toml::table* section(const toml::table& root, const char* name) {
  const auto* n = root.get(name);
  if (n == nullptr) return nullptr;
  const auto* t = n->as_table();
  if (t == nullptr) invalid(std::string("'") + name + "' must be a table");
  return t;
}

std::string resolve(const std::string& base, const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() ? path : (fs::path(base) / p).string();
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

RunConfig parse_run_config(std::string_view toml_text, const std::string& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    invalid(std::string("TOML parse error: ") + std::string(e.description()));
  }
  check_keys(root, "", {"seeds", "out", "backbone", "pretrain", "adapters", "weights", "train", "stream", "ahps",
                        "diagnostics"});
  RunConfig rc;
  ExperimentConfig& c = rc.experiment;

  if (const auto* n = root.get("seeds")) {
    const auto* arr = n->as_array();
    if (arr == nullptr || arr->empty()) invalid("seeds must be a non-empty array of integers");
    rc.seeds.clear();
    for (const auto& e : *arr) {
      const auto v = e.value_exact<std::int64_t>();
      if (!v || *v < 0) invalid("seeds must be non-negative integers");
      rc.seeds.push_back(static_cast<std::uint64_t>(*v));
    }
  }
  Reader top(root, "");
  if (auto o = top.string("out")) rc.out_dir = resolve(base_dir, *o);

  if (const auto* t = section(root, "backbone")) {
    check_keys(*t, "backbone", {"seed", "width", "blocks", "heads", "patches", "file"});
    Reader r(*t, "backbone");
    r.unsigned_int("seed", c.backbone.seed);
    r.unsigned_int("width", c.backbone.width);
    r.unsigned_int("blocks", c.backbone.blocks);
    r.unsigned_int("heads", c.backbone.heads);
    r.unsigned_int("patches", c.backbone.patches);
    if (auto f = r.string("file")) rc.backbone_file = resolve(base_dir, *f);
  }
  if (const auto* t = section(root, "pretrain")) {
    check_keys(*t, "pretrain", {"classes", "per_class", "epochs", "batch", "learning_rate", "noise",
                                "held_out_fraction"});
    Reader r(*t, "pretrain");
    r.unsigned_int("classes", c.pretrain.classes);
    r.unsigned_int("per_class", c.pretrain.per_class);
    r.unsigned_int("epochs", c.pretrain.epochs);
    r.unsigned_int("batch", c.pretrain.batch);
    r.real("learning_rate", c.pretrain.learning_rate);
    r.real("noise", c.pretrain.noise);
    r.real("held_out_fraction", c.pretrain.held_out_fraction);
  }
  if (const auto* t = section(root, "adapters")) {
    check_keys(*t, "adapters", {"prompts", "rank", "fusion_heads"});
    Reader r(*t, "adapters");
    r.unsigned_int("prompts", c.adapters.prompts);
    r.unsigned_int("rank", c.adapters.rank);
    r.unsigned_int("fusion_heads", c.adapters.fusion_heads);
  }
  if (const auto* t = section(root, "weights")) {
    check_keys(*t, "weights", {"eta", "upsilon", "lambda"});
    Reader r(*t, "weights");
    r.real("eta", c.weights.eta);
    r.real("upsilon", c.weights.upsilon);
    r.real("lambda", c.weights.lambda);
  }
  if (const auto* t = section(root, "train")) {
    check_keys(*t, "train", {"epochs", "batch", "learning_rate", "temperature", "svd_energy", "max_negatives"});
    Reader r(*t, "train");
    r.unsigned_int("epochs", c.train.epochs);
    r.unsigned_int("batch", c.train.batch);
    r.real("learning_rate", c.train.learning_rate);
    r.real("temperature", c.train.temperature);
    r.real("svd_energy", c.train.svd_energy);
    r.unsigned_int("max_negatives", c.train.max_negatives);
  }
  c.stream.patches = c.backbone.patches;
  c.stream.width = c.backbone.width;
  if (const auto* t = section(root, "stream")) {
    check_keys(*t, "stream", {"kind", "classes", "per_class", "tasks", "noise", "test_fraction", "class_order_file"});
    Reader r(*t, "stream");
    if (auto k = r.string("kind")) {
      try {
        c.stream.kind = parse_stream_kind(*k);
      } catch (const Error& e) {
        invalid(e.what());
      }
    }
    r.unsigned_int("classes", c.stream.classes);
    r.unsigned_int("per_class", c.stream.per_class);
    r.unsigned_int("tasks", c.stream.tasks);
    r.real("noise", c.stream.noise);
    r.real("test_fraction", c.stream.test_fraction);
    if (auto f = r.string("class_order_file")) {
      try {
        c.stream.class_order = load_class_order(resolve(base_dir, *f));
      } catch (const Error& e) {
        invalid(std::string("stream.class_order_file: ") + e.what());
      }
    }
  }
  if (const auto* t = section(root, "ahps")) {
    check_keys(*t, "ahps", {"mode", "search_calls", "search_space"});
    Reader r(*t, "ahps");
    if (auto m = r.string("mode")) c.ahps = parse_ahps_mode(*m);
    if (auto m = r.string("search_space")) c.search_space = parse_search_space(*m);
    r.unsigned_int("search_calls", c.search_calls);
  }
  if (const auto* t = section(root, "diagnostics")) {
    check_keys(*t, "diagnostics",
               {"gaps", "regime", "spectral", "kernel", "lambda", "lipschitz", "ceiling", "delta"});
    Reader r(*t, "diagnostics");
    r.boolean("gaps", c.gaps);
    r.boolean("regime", rc.regime);
    r.boolean("spectral", rc.spectral);
    if (auto k = r.string("kernel")) c.diagnostics.kernel = parse_diagnostic_kernel(*k);
    r.real("lambda", c.diagnostics.lambda);
    r.real("lipschitz", c.diagnostics.gap.lipschitz);
    r.real("ceiling", c.diagnostics.gap.ceiling);
    r.real("delta", c.diagnostics.gap.delta);
  }

  try {
    c.validate();
    GapConfig g = c.diagnostics.gap;
    g.total_samples = 1;
    g.validate();
    if (c.stream.class_order) check_permutation(*c.stream.class_order);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfigInvalid) throw;
    invalid(e.what());
  }
  require(c.stream.class_order == std::nullopt || c.stream.class_order->size() == c.stream.classes,
          ErrorCode::kConfigInvalid, "class order length differs from stream.classes");
  return rc;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error&) {
    invalid("cannot read config file '" + path + "'");
  }
  return parse_run_config(text, fs::path(path).parent_path().string().empty() ? "."
                                                                                : fs::path(path).parent_path().string());
}

SpectralModel parse_spectral_model(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    invalid(std::string("spectral spec is not JSON: ") + e.what());
  }
  if (!j.is_object()) invalid("spectral spec must be an object");
  for (const auto& [k, v] : j.items())
    if (k != "eigenvalues" && k != "weights") invalid("unknown key '" + k + "' in spectral spec");
  SpectralModel m;
  for (const char* key : {"eigenvalues", "weights"}) {
    if (!j.contains(key) || !j[key].is_array()) invalid(std::string("spectral spec needs array '") + key + "'");
    auto& dst = std::string_view(key) == "eigenvalues" ? m.eigenvalues : m.weights;
    for (const auto& v : j[key]) {
      if (!v.is_number()) invalid(std::string("'") + key + "' entries must be numbers");
      dst.push_back(v.get<double>());
    }
  }
  try {
    m.validate();
  } catch (const Error& e) {
    invalid(e.what());
  }
  return m;
}

SpectralModel load_spectral_model(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error&) {
    invalid("cannot read spectral spec '" + path + "'");
  }
  return parse_spectral_model(text);
}

void write_file_atomic(const std::string& path, std::string_view content) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    require(static_cast<bool>(out), ErrorCode::kIo, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  require(!ec, ErrorCode::kIo, "cannot rename onto '" + path + "': " + ec.message());
}

void save_backbone(const std::string& path, const ToyBackbone& net) {
  const auto& c = net.config();
  nlohmann::json header = {{"kind", "backbone"},
                           {"config",
                            {{"seed", c.seed},
                             {"width", c.width},
                             {"blocks", c.blocks},
                             {"heads", c.heads},
                             {"patches", c.patches}}}};
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : net.params().segments()) segs.push_back({{"name", s.name}, {"length", s.length}});
  header["segments"] = segs;
  const std::string h = header.dump();
  std::string out = "NTKCLPAR";
  put_u64(out, h.size());
  out += h;
  for (double v : net.params().values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  write_file_atomic(path, out);
}

ToyBackbone load_backbone(const std::string& path) {
  const std::string data = read_text_file(path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
  require(data.size() >= 16 && data.compare(0, 8, "NTKCLPAR") == 0, ErrorCode::kIo,
          "'" + path + "' is not a parameter file");
  const std::uint64_t hlen = get_u64(bytes + 8);
  require(hlen <= data.size() - 16, ErrorCode::kIo, "truncated parameter header in '" + path + "'");
  nlohmann::json header;
  BackboneConfig c;
  try {
    header = nlohmann::json::parse(data.substr(16, hlen));
    const auto& jc = header.at("config");
    c.seed = jc.at("seed").get<std::uint64_t>();
    c.width = jc.at("width").get<std::size_t>();
    c.blocks = jc.at("blocks").get<std::size_t>();
    c.heads = jc.at("heads").get<std::size_t>();
    c.patches = jc.at("patches").get<std::size_t>();
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIo, "bad parameter header in '" + path + "': " + e.what());
  }
  ParamVector params = ToyBackbone::layout(c);
  const auto& segs = header.at("segments");
  require(segs.is_array() && segs.size() == params.segments().size(), ErrorCode::kIo,
          "segment table does not match the backbone layout");
  for (std::size_t i = 0; i < segs.size(); ++i)
    require(segs[i].value("name", "") == params.segments()[i].name &&
                segs[i].value("length", std::size_t{0}) == params.segments()[i].length,
            ErrorCode::kIo, "segment table does not match the backbone layout");
  const std::size_t offset = 16 + hlen;
  require(data.size() == offset + 8 * params.size(), ErrorCode::kIo, "parameter payload has the wrong length");
  auto values = params.values();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<double>(get_u64(bytes + offset + 8 * i));
  ToyBackbone net = ToyBackbone::from_params(c, std::move(params));
  net.freeze();
  return net;
}

}  // namespace ntkcl
