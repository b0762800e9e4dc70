#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/losses.hpp"
#include "tipnet/metrics.hpp"
#include "tipnet/params.hpp"
#include "tipnet/phantom.hpp"
#include "tipnet/tipnet.hpp"

namespace tipnet {

struct TrainConfig {
  int steps = 500;
  int batch_size = 2;
  double lr = 1e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;
  double adam_eps = 1e-8;
  int critic_steps_per_gen = 5;
  std::uint64_t seed = 1;
  /// Save a checkpoint every this many generator steps (0: final only).
  int checkpoint_interval = 0;
  /// Subject index held out of every batch and evaluated after training.
  std::optional<int> fold_index;
  /// Generator steps on the pre-training set before fine-tuning (0: none).
  int pretrain_steps = 0;
  LossWeights weights;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Weights ~ Uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)); biases 0;
/// layer-norm gains 1.
template <typename T>
void xavier_init(ParamStore<T>& params, std::mt19937_64& rng);

/// Xavier initialization from `seed`, then zeroes the last I-net layer so
/// an untrained generator reproduces IMG_mlem exactly.
template <typename T>
void initialize_model(TIPNetModel<T>& model, std::uint64_t seed);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of `params` from their accumulated
/// gradients (a parameter without gradient counts as zero gradient).
/// Throws NumericalError on a non-finite gradient.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState& state, const AdamOptions& options);

/// Model-ready tensors for one subject. Volumes are divided by the mean of
/// IMG_mlem (target included), IMG_bp by its own mean and the projections by
/// their mean.
struct PreparedSample {
  std::string id;
  GeneratorInput<float> input;
  ad::Tensor<float> target;
  double volume_scale = 1.0;
};

PreparedSample prepare_sample(const Sample& sample);

struct InferenceResult {
  VolumeGrid img_p;
  VolumeGrid final;
};

/// Generator pass without taping, mapped back to activity units.
InferenceResult infer(const TIPNetModel<float>& model, const Sample& sample);

struct TrainResult {
  /// JSON-lines records in emission order.
  std::vector<nlohmann::json> log;
  std::vector<std::filesystem::path> checkpoints;
  /// Metrics of the held-out subject (fold_index set) against I_four.
  std::optional<SubjectMetrics> fold_metrics;
};

struct TrainOutputs {
  /// Directory for checkpoints and `metrics.jsonl`; empty writes nothing.
  std::filesystem::path dir;
  /// Called for every log record as it is produced.
  std::function<void(const nlohmann::json&)> on_record;
};

/// WGAN-GP loop: each step draws a batch, runs critic_steps_per_gen critic
/// updates against the batch's generator output, then one generator update.
/// With `pretrain` and cfg.pretrain_steps > 0, a pre-training phase on that
/// set precedes fine-tuning on `data`. The model is initialized by the caller.
TrainResult train(const std::vector<Sample>& data, TIPNetModel<float>& model, const TrainConfig& cfg,
                  const TrainOutputs& outputs = {}, const std::vector<Sample>* pretrain = nullptr);

/// Log record serialization with round-trip precision; `wall_time` can be
/// dropped for reproducibility comparisons.
std::string format_record(const nlohmann::json& record, bool include_wall_time = true);

}  // namespace tipnet
