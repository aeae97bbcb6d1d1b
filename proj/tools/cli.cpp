#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ntkcl/config.hpp"
#include "ntkcl/error.hpp"
#include "ntkcl/gaps.hpp"
#include "ntkcl/harness.hpp"
#include "ntkcl/regime.hpp"

namespace ntkcl::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string mode;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> per_class;
};

RunConfig load_with_overrides(const Overrides& o) {
  RunConfig rc = load_run_config(o.config);
  if (!o.seeds.empty()) rc.seeds = o.seeds;
  if (!o.out.empty()) rc.out_dir = o.out;
  if (!o.mode.empty()) rc.experiment.ahps = parse_ahps_mode(o.mode);
  if (o.epochs) rc.experiment.train.epochs = *o.epochs;
  if (o.per_class) rc.experiment.stream.per_class = *o.per_class;
  rc.experiment.validate();
  return rc;
}

PretrainedBackbone backbone_for(const RunConfig& rc) {
  if (!rc.backbone_file) return pretrain_for(rc.experiment);
  PretrainedBackbone b;
  b.net = load_backbone(*rc.backbone_file);
  const auto& got = b.net.config();
  const auto& want = rc.experiment.backbone;
  require(got.width == want.width && got.blocks == want.blocks && got.heads == want.heads &&
              got.patches == want.patches,
          ErrorCode::kConfigInvalid, "backbone file '" + *rc.backbone_file + "' does not match [backbone]");
  return b;
}

std::size_t thread_cap(std::size_t jobs) {
  std::size_t cap = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NTKCL_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) cap = v;
  }
  return std::min(cap, std::max<std::size_t>(jobs, 1));
}

/// Runs job(i) for every seed index on up to NTKCL_THREADS workers; the first
/// error by seed order is rethrown.
template <typename Job>
void fan_out(std::size_t count, const Job& job) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n = thread_cap(count);
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string seed_dir(const std::string& out, std::uint64_t seed) {
  return (fs::path(out) / ("seed-" + std::to_string(seed))).string();
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::vector<double> kDefaultSpectralSamples{0, 1, 2, 4, 8, 16, 32, 64, 128};
constexpr std::size_t kDefaultTrials = 2000;

json regime_doc(const RegimeState& state, std::uint64_t seed, double lambda);
RegimeState initial_regime(const ExperimentConfig& cfg, const PretrainedBackbone& pre, std::uint64_t seed);
std::string spectral_csv(const SpectralModel& model, const std::vector<double>& samples, double lambda,
                         std::size_t trials, std::uint64_t seed);

int cmd_run(const Overrides& o, const std::string& save_backbone_path, std::ostream& out) {
  const RunConfig rc = load_with_overrides(o);
  const PretrainedBackbone pre = backbone_for(rc);
  if (!save_backbone_path.empty()) save_backbone(save_backbone_path, pre.net);
  std::vector<RunReport> reports(rc.seeds.size());
  fan_out(rc.seeds.size(), [&](std::size_t i) {
    reports[i] = run_continual(rc.experiment, rc.seeds[i], &pre);
    const std::string dir = seed_dir(rc.out_dir, rc.seeds[i]);
    write_file_atomic(dir + "/report.json", report_json(reports[i]));
    write_file_atomic(dir + "/accuracy.csv", accuracy_csv(reports[i]));
    write_file_atomic(dir + "/losses.csv", losses_csv(reports[i]));
    if (rc.regime || rc.spectral) {
      const RegimeState state = initial_regime(rc.experiment, pre, rc.seeds[i]);
      const double lambda = rc.experiment.diagnostics.lambda;
      if (rc.regime) write_file_atomic(dir + "/regime.json", regime_doc(state, rc.seeds[i], lambda).dump(2) + "\n");
      if (rc.spectral) {
        const auto& first = state.record(1);
        const SpectralModel model = empirical_spectrum(kernel_matrix(first.kernel, first.inputs, first.inputs),
                                                       first.residual_targets);
        write_file_atomic(dir + "/spectral.csv",
                          spectral_csv(model, kDefaultSpectralSamples, lambda, kDefaultTrials, rc.seeds[i]));
      }
    }
  });
  double mean = 0.0;
  for (const auto& r : reports) {
    out << "seed " << r.seed << " fingerprint " << r.fingerprint << " average " << num(r.average) << " final "
        << num(r.final_accuracy) << "\n";
    mean += r.average;
  }
  out << "mean average accuracy " << num(mean / static_cast<double>(reports.size())) << " over " << reports.size()
      << " seed(s)\n";
  return kExitOk;
}

json gap_rows(const RegimeState& state, const std::vector<GapReport>& gaps) {
  json rows = json::array();
  for (std::size_t t = 0; t < gaps.size(); ++t) {
    const double ridge_only = interplay_empirical_bound(state, t + 1, 0.0);
    rows.push_back({{"task", t + 1},
                    {"samples", state.record(t + 1).inputs.rows()},
                    {"empirical", gaps[t].empirical},
                    {"ridge_term", ridge_only},
                    {"cross_task", gaps[t].empirical - ridge_only},
                    {"rademacher", gaps[t].rademacher},
                    {"confidence", gaps[t].confidence},
                    {"total", gaps[t].total}});
  }
  return rows;
}

int cmd_gaps(const Overrides& o, std::ostream& out) {
  const RunConfig rc = load_with_overrides(o);
  const PretrainedBackbone pre = backbone_for(rc);
  std::vector<json> docs(rc.seeds.size());
  fan_out(rc.seeds.size(), [&](std::size_t i) {
    const auto& cfg = rc.experiment;
    const TaskStream stream = run_stream(cfg, rc.seeds[i]);
    const AdapterBank bank = AdapterBank::initialize(pre.net.config(), run_adapters(cfg, rc.seeds[i]));
    const RegimeState state = build_regime(stream, pre.net, bank, cfg.stream.classes, cfg.diagnostics);
    const auto gaps = gap_diagnostics(state, cfg.diagnostics, stream.total_train());
    docs[i] = {{"seed", rc.seeds[i]},
               {"fingerprint", config_fingerprint(cfg, rc.seeds[i])},
               {"kernel", to_string(cfg.diagnostics.kernel)},
               {"total_samples", stream.total_train()},
               {"tasks", gap_rows(state, gaps)}};
    write_file_atomic(seed_dir(rc.out_dir, rc.seeds[i]) + "/gaps.json", docs[i].dump(2) + "\n");
  });
  for (const auto& d : docs) out << d.dump(2) << "\n";
  return kExitOk;
}

json regime_doc(const RegimeState& state, std::uint64_t seed, double lambda) {
  json rows = json::array();
  for (std::size_t t = 1; t <= state.tasks(); ++t) {
    const auto id = residual_identity(state, t);
    rows.push_back({{"task", t},
                    {"samples", state.record(t).inputs.rows()},
                    {"residual_direct", id.direct},
                    {"residual_closed_form", id.closed_form},
                    {"kernel", state.record(t).kernel.describe()}});
  }
  return {{"seed", seed}, {"lambda", lambda}, {"tasks", rows}};
}

RegimeState initial_regime(const ExperimentConfig& cfg, const PretrainedBackbone& pre, std::uint64_t seed) {
  const TaskStream stream = run_stream(cfg, seed);
  const AdapterBank bank = AdapterBank::initialize(pre.net.config(), run_adapters(cfg, seed));
  return build_regime(stream, pre.net, bank, cfg.stream.classes, cfg.diagnostics);
}

int cmd_regime(const Overrides& o, std::ostream& out) {
  const RunConfig rc = load_with_overrides(o);
  const PretrainedBackbone pre = backbone_for(rc);
  std::vector<json> docs(rc.seeds.size());
  fan_out(rc.seeds.size(), [&](std::size_t i) {
    const RegimeState state = initial_regime(rc.experiment, pre, rc.seeds[i]);
    docs[i] = regime_doc(state, rc.seeds[i], rc.experiment.diagnostics.lambda);
    write_file_atomic(seed_dir(rc.out_dir, rc.seeds[i]) + "/regime.json", docs[i].dump(2) + "\n");
  });
  for (const auto& d : docs) out << d.dump(2) << "\n";
  return kExitOk;
}

std::vector<double> parse_samples(const std::vector<std::string>& items) {
  std::vector<double> s;
  for (const auto& item : items) {
    std::stringstream ss(item);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      require(used == tok.size() && tok.find('-') == std::string::npos, ErrorCode::kConfigInvalid,
              "sample count '" + tok + "' is not a non-negative integer");
      s.push_back(static_cast<double>(v));
    }
  }
  require(!s.empty(), ErrorCode::kConfigInvalid, "no sample counts given");
  return s;
}

std::string spectral_csv(const SpectralModel& model, const std::vector<double>& samples, double lambda,
                         std::size_t trials, std::uint64_t seed) {
  std::ostringstream csv;
  csv << "s,E_g,mc_mean,mc_stderr,flag\n";
  for (double s : samples) {
    std::string eg, flag = "ok";
    try {
      eg = num(task_specific_gap(model, s, lambda));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSingularDenominator && e.code() != ErrorCode::kNoConvergence) throw;
      eg = "nan";
      flag = e.code() == ErrorCode::kSingularDenominator ? "singular_denominator" : "no_convergence";
    }
    const auto mc = monte_carlo_gap(model, static_cast<std::size_t>(s), lambda, trials, seed);
    csv << static_cast<unsigned long long>(s) << ',' << eg << ',' << num(mc.mean) << ',' << num(mc.stderr_) << ','
        << flag << '\n';
  }
  return csv.str();
}

int cmd_spectral(const std::string& spec_path, const std::vector<std::string>& s_items, double lambda,
                 std::size_t trials, std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  const SpectralModel model = load_spectral_model(spec_path);
  require(std::isfinite(lambda) && lambda >= 0.0, ErrorCode::kConfigInvalid, "lambda must be >= 0");
  require(trials >= 100, ErrorCode::kConfigInvalid, "trials must be >= 100");
  const std::string csv = spectral_csv(model, parse_samples(s_items), lambda, trials, seed);
  if (!out_path.empty()) write_file_atomic(out_path, csv);
  out << csv;
  return kExitOk;
}

int cmd_sweep(const Overrides& o, std::ostream& out) {
  const RunConfig rc = load_with_overrides(o);
  const PretrainedBackbone pre = backbone_for(rc);
  std::vector<RunReport> reports(rc.seeds.size());
  fan_out(rc.seeds.size(), [&](std::size_t i) {
    reports[i] = run_continual(rc.experiment, rc.seeds[i], &pre);
    std::ostringstream csv;
    csv << "task,call,nce_temp,dis_temp,reg_temp,value\n";
    for (const auto& st : reports[i].stages) {
      if (!st.search.empty()) {
        for (std::size_t c = 0; c < st.search.size(); ++c) {
          const auto& h = st.search[c];
          csv << st.task << ',' << (c + 1) << ',' << num(h.point[0]) << ',' << num(h.point[1]) << ','
              << num(h.point[2]) << ',' << num(h.value) << '\n';
        }
      } else {
        csv << st.task << ",0," << num(st.chosen.temperature) << ',' << num(st.chosen.weights.upsilon) << ','
            << num(st.chosen.weights.lambda) << ',' << num(1.0 - st.accuracy / 100.0) << '\n';
      }
    }
    const std::string dir = seed_dir(rc.out_dir, rc.seeds[i]);
    write_file_atomic(dir + "/sweep.csv", csv.str());
    write_file_atomic(dir + "/report.json", report_json(reports[i]));
  });
  for (const auto& r : reports) {
    out << "seed " << r.seed << " mode " << to_string(rc.experiment.ahps) << " average " << num(r.average) << "\n";
    for (const auto& st : r.stages)
      out << "  task " << st.task << " T " << num(st.chosen.temperature) << " eta " << num(st.chosen.weights.eta)
          << " upsilon " << num(st.chosen.weights.upsilon) << " lambda " << num(st.chosen.weights.lambda) << "\n";
  }
  return kExitOk;
}

void add_config_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "TOML run configuration")->required();
  app->add_option("--seed", o.seeds, "Run seed (repeatable; overrides the config)");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--epochs", o.epochs, "Epochs per task");
  app->add_option("--per-class", o.per_class, "Samples per class in the stream");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Class-incremental NTK adapter experiments and generalization-gap diagnostics"};
  app.require_subcommand(1);
  Overrides run_o, gaps_o, regime_o, sweep_o;
  std::string save_path;
  auto* run = app.add_subcommand("run", "Train and evaluate one run per seed");
  add_config_flags(run, run_o);
  run->add_option("--mode", run_o.mode, "AHPS mode: fixed, dynamic or bayes");
  run->add_option("--save-backbone", save_path, "Write the pretrained backbone to this parameter file");
  auto* gaps = app.add_subcommand("gaps", "Generalization-gap bounds per task");
  add_config_flags(gaps, gaps_o);
  auto* regime = app.add_subcommand("regime", "Sequential kernel regression residual check per task");
  add_config_flags(regime, regime_o);
  auto* sweep = app.add_subcommand("sweep", "Hyper-parameter search or dynamic scaling per task");
  add_config_flags(sweep, sweep_o);
  sweep->add_option("--mode", sweep_o.mode, "AHPS mode: bayes, dynamic or fixed")->required();

  std::string spec_path, spectral_out;
  std::vector<std::string> s_items{"0,1,2,4,8,16,32,64,128"};
  double lambda = 0.01;
  std::size_t trials = kDefaultTrials;
  std::uint64_t spectral_seed = 0;
  auto* spectral = app.add_subcommand("spectral", "Self-consistent gap prediction against Monte Carlo");
  spectral->add_option("--spec", spec_path, "JSON spectrum {eigenvalues, weights}")->required();
  spectral->add_option("--s", s_items, "Sample counts (repeatable or comma-separated)");
  spectral->add_option("--lambda", lambda, "Ridge");
  spectral->add_option("--trials", trials, "Monte Carlo trials");
  spectral->add_option("--seed", spectral_seed, "Monte Carlo seed");
  spectral->add_option("--out", spectral_out, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_o, save_path, out);
    if (*gaps) return cmd_gaps(gaps_o, out);
    if (*regime) return cmd_regime(regime_o, out);
    if (*sweep) return cmd_sweep(sweep_o, out);
    if (*spectral) return cmd_spectral(spec_path, s_items, lambda, trials, spectral_seed, spectral_out, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::kConfigInvalid ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace ntkcl::cli
