#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "tipnet/geometry.hpp"
#include "tipnet/phantom.hpp"
#include "tipnet/tipnet.hpp"
#include "tipnet/training.hpp"

namespace tipnet {

/// Effective settings of one CLI run. Geometry and grid follow the scale
/// preset; everything else can be overridden from JSON.
struct RunConfig {
  Scale scale = Scale::Desk;
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  /// Trailing subjects of a dataset kept out of training for evaluation.
  int holdout = 8;
  std::filesystem::path data_dir;
  std::filesystem::path pretrain_dir;

  void validate() const;
};

/// Defaults for a scale, with the seed applied to every stream.
RunConfig default_run_config(Scale scale, std::uint64_t seed = 1);

struct RunOverrides {
  std::optional<Scale> scale;
  std::optional<std::uint64_t> seed;
};

/// Layers defaults < JSON document < overrides. Unknown keys raise
/// ConfigError. A top-level seed applies to the dataset and training unless
/// a section sets its own; an override seed applies everywhere.
RunConfig resolve_run_config(const nlohmann::json& doc, const RunOverrides& overrides = {});
RunConfig load_run_config(const std::filesystem::path& path, const RunOverrides& overrides = {});

nlohmann::json to_json(const RunConfig& config);
/// Writes `config.json` into `dir` (created if needed).
void write_effective_config(const RunConfig& config, const std::filesystem::path& dir);

nlohmann::json to_json(const MLEMConfig& config);
MLEMConfig mlem_config_from_json(const nlohmann::json& j, MLEMConfig base = {});

}  // namespace tipnet
