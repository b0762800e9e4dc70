#include "tipnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "tipnet/error.hpp"
#include "tipnet/log.hpp"

namespace tipnet {

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (critic_steps_per_gen < 0) throw ConfigError("train: critic_steps_per_gen must be >= 0");
  if (checkpoint_interval < 0) throw ConfigError("train: checkpoint_interval must be >= 0");
  if (pretrain_steps < 0) throw ConfigError("train: pretrain_steps must be >= 0");
  if (fold_index && *fold_index < 0) throw ConfigError("train: fold_index must be >= 0");
  weights.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"critic_steps_per_gen", c.critic_steps_per_gen},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"fold_index", c.fold_index ? nlohmann::json(*c.fold_index) : nlohmann::json(nullptr)},
          {"pretrain_steps", c.pretrain_steps},
          {"weights", to_json(c.weights)}};
}

namespace {

template <typename V>
void read_into(const nlohmann::json& j, const std::string& key, V& out) {
  try {
    out = j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("train config: invalid value for '" + key + "'");
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") read_into(value, key, c.steps);
    else if (key == "batch_size") read_into(value, key, c.batch_size);
    else if (key == "lr") read_into(value, key, c.lr);
    else if (key == "adam_beta1") read_into(value, key, c.adam_beta1);
    else if (key == "adam_beta2") read_into(value, key, c.adam_beta2);
    else if (key == "adam_eps") read_into(value, key, c.adam_eps);
    else if (key == "critic_steps_per_gen") read_into(value, key, c.critic_steps_per_gen);
    else if (key == "seed") read_into(value, key, c.seed);
    else if (key == "checkpoint_interval") read_into(value, key, c.checkpoint_interval);
    else if (key == "pretrain_steps") read_into(value, key, c.pretrain_steps);
    else if (key == "fold_index") {
      if (value.is_null()) c.fold_index.reset();
      else {
        int k = 0;
        read_into(value, key, k);
        c.fold_index = k;
      }
    } else if (key == "weights") c.weights = loss_weights_from_json(value, c.weights);
    else throw ConfigError("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

template <typename T>
void xavier_init(ParamStore<T>& params, std::mt19937_64& rng) {
  for (auto& p : params.params()) {
    auto values = p.tensor.mutable_values();
    switch (p.kind) {
      case ParamKind::Bias:
        std::fill(values.begin(), values.end(), T(0));
        break;
      case ParamKind::Gain:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case ParamKind::Weight: {
        const double a = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        for (auto& v : values) v = static_cast<T>(dist(rng));
        break;
      }
    }
  }
}

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState& state, const AdamOptions& o) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->tensor.size(), 0.0);
      state.v.emplace_back(p->tensor.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->tensor.has_grad()) {
      for (T g : params[k]->tensor.grad()) {
        if (!std::isfinite(g)) {
          throw NumericalError("adam: non-finite gradient in parameter '" + params[k]->name + "'");
        }
      }
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& tensor = params[k]->tensor;
    auto values = tensor.mutable_values();
    const bool has = tensor.has_grad();
    const auto grad = tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != values.size()) throw ShapeError("adam: moment shape mismatch for " + params[k]->name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      values[i] = static_cast<T>(values[i] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
}

template <typename T>
void initialize_model(TIPNetModel<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  xavier_init(model.params(), rng);
  for (auto& p : model.params().params()) {
    if (p.name.rfind("inet.cnn2.out.", 0) != 0) continue;
    auto v = p.tensor.mutable_values();
    std::fill(v.begin(), v.end(), T(0));
  }
}

template void xavier_init(ParamStore<float>&, std::mt19937_64&);
template void xavier_init(ParamStore<double>&, std::mt19937_64&);
template void adam_step(std::span<Parameter<float>* const>, AdamState&, const AdamOptions&);
template void adam_step(std::span<Parameter<double>* const>, AdamState&, const AdamOptions&);
template void initialize_model(TIPNetModel<float>&, std::uint64_t);
template void initialize_model(TIPNetModel<double>&, std::uint64_t);

namespace {

double mean_of(std::span<const float> v) {
  double total = 0.0;
  for (float x : v) total += x;
  return v.empty() ? 0.0 : total / static_cast<double>(v.size());
}

ad::Tensor<float> scaled(std::span<const float> v, ad::Shape shape, double scale) {
  const float inv = static_cast<float>(1.0 / scale);
  std::vector<float> out(v.begin(), v.end());
  for (auto& x : out) x *= inv;
  return ad::Tensor<float>::constant(std::move(shape), std::move(out));
}

double positive_or_one(double v) { return v > 0.0 ? v : 1.0; }

}  // namespace

PreparedSample prepare_sample(const Sample& s) {
  PreparedSample p;
  p.id = s.id;
  const GridSpec& g = s.img_mlem.grid();
  const ad::Shape vol{g.nz, g.ny, g.nx};
  p.volume_scale = positive_or_one(mean_of(s.img_mlem.values()));
  const double bp_scale = positive_or_one(mean_of(s.img_bp.values()));
  const double proj_scale = positive_or_one(mean_of(s.proj_one.values()));
  p.input.proj = scaled(s.proj_one.values(), {s.proj_one.n_modules(), s.proj_one.nv(), s.proj_one.nu()},
                        proj_scale);
  p.input.img_bp = scaled(s.img_bp.values(), vol, bp_scale);
  p.input.img_mlem = scaled(s.img_mlem.values(), vol, p.volume_scale);
  p.target = scaled(s.img_four.values(), vol, p.volume_scale);
  return p;
}

InferenceResult infer(const TIPNetModel<float>& model, const Sample& sample) {
  ad::NoGradGuard no_grad;
  const PreparedSample p = prepare_sample(sample);
  const auto out = model.generate(p.input);
  const GridSpec& g = sample.img_mlem.grid();
  auto back = [&](const ad::Tensor<float>& t) {
    std::vector<float> v(t.values().begin(), t.values().end());
    for (auto& x : v) x = static_cast<float>(x * p.volume_scale);
    return VolumeGrid(g, std::move(v));
  };
  return {back(out.img_p), back(out.final)};
}

std::string format_record(const nlohmann::json& record, bool include_wall_time) {
  if (include_wall_time || !record.contains("wall_time")) return record.dump();
  nlohmann::json copy = record;
  copy.erase("wall_time");
  return copy.dump();
}

namespace {

std::uint64_t stream_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

class Trainer {
 public:
  Trainer(TIPNetModel<float>& model, const TrainConfig& cfg, const TrainOutputs& outputs,
          TrainResult& result)
      : model_(model),
        cfg_(cfg),
        outputs_(outputs),
        result_(result),
        data_rng_(stream_seed(cfg.seed, 1)),
        gp_rng_(stream_seed(cfg.seed, 2)),
        start_(std::chrono::steady_clock::now()) {
    for (auto& p : model_.params().params()) {
      (p.name.rfind("critic.", 0) == 0 ? critic_params_ : gen_params_).push_back(&p);
    }
    adam_.lr = cfg.lr;
    adam_.beta1 = cfg.adam_beta1;
    adam_.beta2 = cfg.adam_beta2;
    adam_.eps = cfg.adam_eps;
    if (!outputs_.dir.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(outputs_.dir, ec);
      if (ec) throw IoError("cannot create " + outputs_.dir.string() + ": " + ec.message());
      log_file_.open(outputs_.dir / "metrics.jsonl");
      if (!log_file_) throw IoError("cannot write " + (outputs_.dir / "metrics.jsonl").string());
    }
  }

  void run_phase(const std::vector<Sample>& data, const std::vector<int>& indices, int steps,
                 const std::string& phase) {
    std::vector<PreparedSample> prepared;
    prepared.reserve(data.size());
    for (const auto& s : data) prepared.push_back(prepare_sample(s));
    std::vector<int> order;
    std::size_t cursor = 0;
    auto next_index = [&]() {
      if (cursor == order.size()) {
        order = indices;
        std::shuffle(order.begin(), order.end(), data_rng_);
        cursor = 0;
      }
      return order[cursor++];
    };

    for (int step = 0; step < steps; ++step) {
      std::vector<int> batch;
      for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(next_index());

      std::vector<ad::Tensor<float>> finals, img_ps, targets, fakes;
      for (int idx : batch) {
        const auto& p = prepared[static_cast<std::size_t>(idx)];
        auto out = model_.generate(p.input);
        fakes.push_back(out.final.detach());
        finals.push_back(out.final);
        img_ps.push_back(out.img_p);
        targets.push_back(p.target);
      }

      for (int c = 0; c < cfg_.critic_steps_per_gen; ++c) {
        for (auto* p : critic_params_) p->tensor.zero_grad();
        const auto terms = critic_objective<float>(targets, fakes, model_.critic(), cfg_.weights, gp_rng_);
        terms.total.backward();
        adam_step<float>(critic_params_, critic_state_, adam_);
        emit({{"phase", phase},
              {"kind", "critic"},
              {"step", step},
              {"critic_iter", c},
              {"loss", terms.total.item()},
              {"wasserstein", terms.wasserstein.item()},
              {"penalty", terms.penalty.item()}});
      }

      model_.params().zero_grad();
      const auto g = generator_objective<float>(finals, img_ps, targets, model_.critic(), cfg_.weights);
      if (!std::isfinite(g.total.item())) throw NumericalError("train: generator loss is not finite");
      g.total.backward();
      adam_step<float>(gen_params_, gen_state_, adam_);
      nlohmann::json ids = nlohmann::json::array();
      for (int idx : batch) ids.push_back(data[static_cast<std::size_t>(idx)].id);
      emit({{"phase", phase},
            {"kind", "generator"},
            {"step", step},
            {"loss", g.total.item()},
            {"l_main", g.main.item()},
            {"l_pnet", g.pnet.item()},
            {"adversarial", g.adversarial.item()},
            {"batch", ids}});

      if (!outputs_.dir.empty() && cfg_.checkpoint_interval > 0 &&
          (step + 1) % cfg_.checkpoint_interval == 0) {
        char name[48];
        std::snprintf(name, sizeof(name), "ckpt_%s_%06d", phase.c_str(), step + 1);
        save(outputs_.dir / name, phase, step + 1);
      }
    }
  }

  void save(const std::filesystem::path& stem, const std::string& phase, int step) {
    save_checkpoint(stem, model_.params(),
                    {{"phase", phase}, {"step", step}, {"model", to_json(model_.config())},
                     {"train", to_json(cfg_)}});
    result_.checkpoints.push_back(stem);
  }

  void emit(nlohmann::json record) {
    record["wall_time"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (log_file_.is_open()) {
      log_file_ << format_record(record) << '\n';
      log_file_.flush();
    }
    if (outputs_.on_record) outputs_.on_record(record);
    result_.log.push_back(std::move(record));
  }

 private:
  TIPNetModel<float>& model_;
  const TrainConfig& cfg_;
  const TrainOutputs& outputs_;
  TrainResult& result_;
  std::vector<Parameter<float>*> gen_params_;
  std::vector<Parameter<float>*> critic_params_;
  AdamOptions adam_;
  AdamState gen_state_;
  AdamState critic_state_;
  std::mt19937_64 data_rng_;
  std::mt19937_64 gp_rng_;
  std::chrono::steady_clock::time_point start_;
  std::ofstream log_file_;
};

}  // namespace

TrainResult train(const std::vector<Sample>& data, TIPNetModel<float>& model, const TrainConfig& cfg,
                  const TrainOutputs& outputs, const std::vector<Sample>* pretrain) {
  cfg.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  std::vector<int> indices;
  for (int i = 0; i < static_cast<int>(data.size()); ++i) {
    if (!cfg.fold_index || *cfg.fold_index != i) indices.push_back(i);
  }
  if (cfg.fold_index && *cfg.fold_index >= static_cast<int>(data.size())) {
    throw ConfigError("train: fold_index " + std::to_string(*cfg.fold_index) + " is outside the dataset");
  }
  if (indices.empty()) throw DataError("train: no training subjects left after the held-out fold");

  TrainResult result;
  Trainer trainer(model, cfg, outputs, result);
  if (pretrain && cfg.pretrain_steps > 0) {
    if (pretrain->empty()) throw DataError("train: empty pre-training dataset");
    std::vector<int> all(pretrain->size());
    std::iota(all.begin(), all.end(), 0);
    trainer.run_phase(*pretrain, all, cfg.pretrain_steps, "pretrain");
  }
  trainer.run_phase(data, indices, cfg.steps, pretrain && cfg.pretrain_steps > 0 ? "finetune" : "train");
  if (!outputs.dir.empty()) trainer.save(outputs.dir / "final", "final", cfg.steps);

  if (cfg.fold_index) {
    const Sample& held = data[static_cast<std::size_t>(*cfg.fold_index)];
    const auto out = infer(model, held);
    result.fold_metrics = evaluate_subject(held.id, out.final, held.img_four, held.masks);
    trainer.emit({{"kind", "fold_eval"},
                  {"subject", held.id},
                  {"ssim", result.fold_metrics->ssim},
                  {"rmse", result.fold_metrics->rmse},
                  {"mbp", result.fold_metrics->mbp},
                  {"defect_size", result.fold_metrics->defect_size}});
  }
  return result;
}

}  // namespace tipnet
