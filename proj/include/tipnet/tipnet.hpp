#pragma once

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/autodiff.hpp"
#include "tipnet/geometry.hpp"
#include "tipnet/losses.hpp"
#include "tipnet/params.hpp"

namespace tipnet {

struct TransformerConfig {
  int patch_size = 4;
  int embed_dim = 64;
  int n_heads = 2;
  int n_layers = 2;
  int mlp_ratio = 2;
  /// Rows of the token-mixing matrix in the slice head.
  int head_rank = 8;

  void validate(int nu, int nv) const;
};

struct ModelConfig {
  int nx = 24;
  int ny = 24;
  int nz = 16;
  int n_modules = 19;
  int nu = 16;
  int nv = 16;
  TransformerConfig transformer;
  /// Hidden widths of the per-slice 2-D CNN (input n_modules + 2, output 1).
  std::vector<int> slice_cnn{32, 16};
  /// Encoder widths of the 3-D U-Net used twice in the I-net.
  std::vector<int> unet{16, 32, 64};
  /// Critic widths; the first three layers downsample by 2.
  std::vector<int> critic{8, 16, 32, 32};
  double leaky_slope = 0.1;
  double critic_slope = 0.2;

  int fused_channels() const { return n_modules + 2; }
  void validate() const;

  static ModelConfig for_setup(const ScaleSetup& setup);
  static ModelConfig for_scale(Scale scale) { return for_setup(scale_setup(scale)); }
};

nlohmann::json to_json(const ModelConfig& config);
/// Strict parse: unknown keys raise ConfigError. Missing keys keep `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

template <typename T>
struct Linear {
  ad::Tensor<T> w;  ///< (in, out)
  ad::Tensor<T> b;  ///< (out)

  ad::Tensor<T> operator()(const ad::Tensor<T>& x) const { return add_rowvec(matmul(x, w), b); }
};

/// Parameters of one P-net loop iteration (one output slice).
template <typename T>
struct SliceGroup {
  Linear<T> patch_embed;
  ad::Tensor<T> pos_embed;     ///< (patches per module, E)
  ad::Tensor<T> module_embed;  ///< (n_modules, E)
  struct Layer {
    ad::Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Linear<T> wq, wk, wv, wo, fc1, fc2;
  };
  std::vector<Layer> layers;
  ad::Tensor<T> lnf_g, lnf_b;
  ad::Tensor<T> head_mix;  ///< (head_rank, tokens)
  Linear<T> head_out;      ///< head_rank * E -> nx * ny
  std::vector<ad::Tensor<T>> cnn_w;
  std::vector<ad::Tensor<T>> cnn_b;
};

/// Projection-domain reconstructor: one transformer + head + shallow 2-D CNN
/// per output slice, each with its own parameters.
template <typename T>
class PNet {
 public:
  PNet(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix = "pnet");

  /// proj: (n_modules, nv, nu), img_bp: (nz, ny, nx) -> (nz, ny, nx).
  ad::Tensor<T> forward(const ad::Tensor<T>& proj, const ad::Tensor<T>& img_bp) const;

  /// Transformer + head output for slice i, shape (1, ny, nx).
  ad::Tensor<T> transformer_slice(int i, const ad::Tensor<T>& proj) const;
  /// Fused per-slice features (n_modules + 2, ny, nx). `resized` is the
  /// projection set resized to (n_modules, ny, nx).
  ad::Tensor<T> fused_features(int i, const ad::Tensor<T>& proj, const ad::Tensor<T>& img_bp,
                               const ad::Tensor<T>& resized) const;
  ad::Tensor<T> slice_forward(int i, const ad::Tensor<T>& proj, const ad::Tensor<T>& img_bp,
                              const ad::Tensor<T>& resized) const;
  ad::Tensor<T> resize_projections(const ad::Tensor<T>& proj) const;

  int n_tokens() const { return n_tokens_; }
  static std::string group_prefix(const std::string& prefix, int slice);

 private:
  ModelConfig config_;
  int n_tokens_ = 0;
  std::shared_ptr<const std::vector<std::int32_t>> token_index_;
  std::shared_ptr<const std::vector<std::int32_t>> pos_index_;
  std::shared_ptr<const std::vector<std::int32_t>> module_index_;
  std::vector<SliceGroup<T>> groups_;
};

/// 3-level 3-D encoder-decoder with skip concatenations and nearest-neighbour
/// upsampling. (C, D, H, W) -> (1, D, H, W).
template <typename T>
class UNet3D {
 public:
  UNet3D(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix,
         int in_channels);
  ad::Tensor<T> forward(const ad::Tensor<T>& x) const;

 private:
  struct Conv {
    ad::Tensor<T> w, b;
    int stride = 1;
  };
  Conv add_conv(ParamStore<T>& store, const std::string& name, int in, int out, int stride);
  ad::Tensor<T> apply(const Conv& c, const ad::Tensor<T>& x, bool activate) const;

  T slope_;
  Conv e1_, e2_, b1_, b2_, d1_, d0_, out_;
};

/// Image-domain refiner: cnn1 on [IMG_p, IMG_bp, IMG_mlem], cnn2 on
/// [cnn1 output, IMG_p, IMG_mlem], output relu(IMG_mlem + cnn2).
template <typename T>
class INet {
 public:
  INet(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix = "inet");
  /// All inputs (nz, ny, nx); output (nz, ny, nx).
  ad::Tensor<T> forward(const ad::Tensor<T>& img_p, const ad::Tensor<T>& img_bp,
                        const ad::Tensor<T>& img_mlem) const;

 private:
  ModelConfig config_;
  UNet3D<T> cnn1_;
  UNet3D<T> cnn2_;
};

/// Five 3x3x3 convolutions (three with stride 2), leaky ReLU, global mean.
template <typename T>
class Critic final : public CriticFn<T> {
 public:
  Critic(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix = "critic");

  /// x: (nz, ny, nx) -> shape {1}.
  ad::Tensor<T> score(const ad::Tensor<T>& x) const override;
  /// d score / d x as a graph that is differentiable in the critic weights.
  ad::Tensor<T> input_gradient(const ad::Tensor<T>& x) const override;

  /// Activation pattern of the forward pass at x: per-layer input shapes and
  /// leaky-ReLU slopes (1 or the negative slope).
  struct Linearization {
    std::vector<ad::Shape> in_shapes;
    std::vector<ad::Tensor<T>> masks;
    ad::Shape out_shape;
  };
  Linearization linearize(const ad::Tensor<T>& x) const;
  /// Input gradient with the activation pattern held fixed; a polynomial in
  /// the weights.
  ad::Tensor<T> input_gradient(const Linearization& lin) const;

 private:
  struct Layer {
    ad::Tensor<T> w, b;
    int stride = 1;
  };
  ModelConfig config_;
  T slope_;
  std::vector<Layer> layers_;
};

template <typename T>
struct GeneratorInput {
  ad::Tensor<T> proj;      ///< (n_modules, nv, nu), one-angle projections
  ad::Tensor<T> img_bp;    ///< (nz, ny, nx)
  ad::Tensor<T> img_mlem;  ///< (nz, ny, nx)
};

template <typename T>
struct GeneratorOutput {
  ad::Tensor<T> img_p;
  ad::Tensor<T> final;
};

/// Generator (P-net + I-net) and critic sharing one parameter store under the
/// prefixes "pnet.", "inet." and "critic.".
template <typename T>
class TIPNetModel {
 public:
  explicit TIPNetModel(const ModelConfig& config);
  TIPNetModel(const TIPNetModel&) = delete;
  TIPNetModel& operator=(const TIPNetModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return *params_; }
  const ParamStore<T>& params() const { return *params_; }

  GeneratorOutput<T> generate(const GeneratorInput<T>& input) const;

  const PNet<T>& pnet() const { return *pnet_; }
  const INet<T>& inet() const { return *inet_; }
  const Critic<T>& critic() const { return *critic_; }

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore<T>> params_;
  std::unique_ptr<PNet<T>> pnet_;
  std::unique_ptr<INet<T>> inet_;
  std::unique_ptr<Critic<T>> critic_;
};

}  // namespace tipnet
