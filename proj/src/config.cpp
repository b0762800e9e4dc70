#include "tipnet/config.hpp"

#include <fstream>

#include "tipnet/error.hpp"

namespace tipnet {

namespace {

template <typename V>
V read_value(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: invalid value for '" + key + "'");
  }
}

void require_object(const nlohmann::json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError("config: '" + section + "' must be a JSON object");
}

}  // namespace

nlohmann::json to_json(const MLEMConfig& c) {
  return {{"n_iters", c.n_iters},
          {"epsilon", c.epsilon ? nlohmann::json(*c.epsilon) : nlohmann::json(nullptr)},
          {"initial_value", c.initial_value}};
}

MLEMConfig mlem_config_from_json(const nlohmann::json& j, MLEMConfig c) {
  require_object(j, "mlem");
  for (const auto& [key, value] : j.items()) {
    if (key == "n_iters") c.n_iters = read_value<int>(value, key);
    else if (key == "initial_value") c.initial_value = read_value<double>(value, key);
    else if (key == "epsilon") {
      if (value.is_null()) c.epsilon.reset();
      else c.epsilon = read_value<double>(value, key);
    } else throw ConfigError("unknown mlem config key '" + key + "'");
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  dataset.validate();
  model.validate();
  train.validate();
  if (holdout < 0) throw ConfigError("config: holdout must be >= 0");
  const auto setup = scale_setup(scale);
  if (model.nx != setup.grid.nx || model.ny != setup.grid.ny || model.nz != setup.grid.nz ||
      model.n_modules != setup.geometry.n_modules || model.nu != setup.geometry.nu ||
      model.nv != setup.geometry.nv) {
    throw ConfigError(std::string("config: model dimensions do not match the ") + to_string(scale) +
                      " grid and detector");
  }
}

RunConfig default_run_config(Scale scale, std::uint64_t seed) {
  RunConfig c;
  c.scale = scale;
  c.seed = seed;
  c.dataset.scale = scale;
  c.dataset.seed = seed;
  c.model = ModelConfig::for_scale(scale);
  c.train.seed = seed;
  return c;
}

RunConfig resolve_run_config(const nlohmann::json& doc, const RunOverrides& overrides) {
  require_object(doc, "config");
  Scale scale = Scale::Desk;
  std::uint64_t seed = 1;
  if (doc.contains("scale")) scale = parse_scale(read_value<std::string>(doc["scale"], "scale"));
  if (doc.contains("seed")) seed = read_value<std::uint64_t>(doc["seed"], "seed");
  if (overrides.scale) scale = *overrides.scale;

  RunConfig c = default_run_config(scale, seed);
  for (const auto& [key, value] : doc.items()) {
    if (key == "scale" || key == "seed") continue;
    if (key == "model") {
      c.model = model_config_from_json(value, c.model);
    } else if (key == "train") {
      c.train = train_config_from_json(value, c.train);
    } else if (key == "mlem") {
      c.dataset.mlem = mlem_config_from_json(value, c.dataset.mlem);
    } else if (key == "dataset") {
      require_object(value, "dataset");
      for (const auto& [k, v] : value.items()) {
        if (k == "n_subjects") c.dataset.n_subjects = read_value<int>(v, k);
        else if (k == "counts_per_angle") c.dataset.counts_per_angle = read_value<double>(v, k);
        else if (k == "seed") c.dataset.seed = read_value<std::uint64_t>(v, k);
        else if (k == "holdout") c.holdout = read_value<int>(v, k);
        else if (k == "path") c.data_dir = read_value<std::string>(v, k);
        else if (k == "pretrain_path") c.pretrain_dir = read_value<std::string>(v, k);
        else throw ConfigError("unknown dataset config key '" + k + "'");
      }
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  if (overrides.seed) {
    c.seed = *overrides.seed;
    c.dataset.seed = *overrides.seed;
    c.train.seed = *overrides.seed;
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunOverrides& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return resolve_run_config(doc, overrides);
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"scale", to_string(c.scale)},
          {"seed", c.seed},
          {"dataset",
           {{"n_subjects", c.dataset.n_subjects},
            {"counts_per_angle", c.dataset.counts_per_angle},
            {"seed", c.dataset.seed},
            {"holdout", c.holdout},
            {"path", c.data_dir.string()},
            {"pretrain_path", c.pretrain_dir.string()}}},
          {"mlem", to_json(c.dataset.mlem)},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)}};
}

void write_effective_config(const RunConfig& config, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / "config.json");
  if (!out) throw IoError("cannot write " + (dir / "config.json").string());
  out << to_json(config).dump(2) << '\n';
}

}  // namespace tipnet
