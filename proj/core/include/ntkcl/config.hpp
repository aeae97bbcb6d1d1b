#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ntkcl/gaps.hpp"
#include "ntkcl/harness.hpp"
#include "ntkcl/toynet.hpp"

namespace ntkcl {

struct RunConfig {
  ExperimentConfig experiment;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "out";
  bool regime = false;
  bool spectral = false;
  /// Pretrained backbone parameter file; pretraining runs when absent.
  std::optional<std::string> backbone_file;
};

/// Parses a TOML run configuration. Unknown tables or keys, wrong types and
/// invalid values throw kConfigInvalid. Relative paths resolve against base_dir.
RunConfig parse_run_config(std::string_view toml_text, const std::string& base_dir = ".");
/// Throws kConfigInvalid naming the path when it cannot be read.
RunConfig load_run_config(const std::string& path);

/// {"eigenvalues": [...], "weights": [...]}; throws kConfigInvalid.
SpectralModel parse_spectral_model(std::string_view json_text);
SpectralModel load_spectral_model(const std::string& path);

std::string read_text_file(const std::string& path);
/// Writes to a sibling temporary file then renames it over `path`.
void write_file_atomic(const std::string& path, std::string_view content);

/// Parameter file: "NTKCLPAR" magic, u64 little-endian header length, a JSON
/// header (backbone config and segment table), then little-endian f64 values.
void save_backbone(const std::string& path, const ToyBackbone& net);
/// The returned backbone is frozen. Throws kIo on a malformed file.
ToyBackbone load_backbone(const std::string& path);

}  // namespace ntkcl
