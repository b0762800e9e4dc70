#include "tipnet/tipnet.hpp"

#include <cmath>
#include <cstdio>

#include "tipnet/error.hpp"

namespace tipnet {

using namespace ad;

void TransformerConfig::validate(int nu, int nv) const {
  if (patch_size < 1 || embed_dim < 1 || n_heads < 1 || n_layers < 0 || mlp_ratio < 1 ||
      head_rank < 1) {
    throw ConfigError("transformer: sizes must be positive");
  }
  if (embed_dim % n_heads != 0) throw ConfigError("transformer: embed_dim must be divisible by n_heads");
  if (nu % patch_size != 0 || nv % patch_size != 0) {
    throw ConfigError("transformer: patch_size must divide the detector bins");
  }
}

void ModelConfig::validate() const {
  if (nx < 1 || ny < 1 || nz < 1) throw ConfigError("model: grid dims must be >= 1");
  if (n_modules < 1 || nu < 1 || nv < 1) throw ConfigError("model: detector dims must be >= 1");
  transformer.validate(nu, nv);
  if (slice_cnn.empty() || unet.size() != 3 || critic.size() != 4) {
    throw ConfigError("model: slice_cnn needs >= 1 width, unet 3 widths, critic 4 widths");
  }
  for (const auto* v : {&slice_cnn, &unet, &critic}) {
    for (int c : *v) {
      if (c < 1) throw ConfigError("model: channel widths must be >= 1");
    }
  }
  if (!(leaky_slope >= 0.0) || !(critic_slope >= 0.0)) {
    throw ConfigError("model: leaky slopes must be >= 0");
  }
}

ModelConfig ModelConfig::for_setup(const ScaleSetup& setup) {
  ModelConfig c;
  c.nx = setup.grid.nx;
  c.ny = setup.grid.ny;
  c.nz = setup.grid.nz;
  c.n_modules = setup.geometry.n_modules;
  c.nu = setup.geometry.nu;
  c.nv = setup.geometry.nv;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"nx", c.nx},
          {"ny", c.ny},
          {"nz", c.nz},
          {"n_modules", c.n_modules},
          {"nu", c.nu},
          {"nv", c.nv},
          {"transformer",
           {{"patch_size", c.transformer.patch_size},
            {"embed_dim", c.transformer.embed_dim},
            {"n_heads", c.transformer.n_heads},
            {"n_layers", c.transformer.n_layers},
            {"mlp_ratio", c.transformer.mlp_ratio},
            {"head_rank", c.transformer.head_rank}}},
          {"slice_cnn", c.slice_cnn},
          {"unet", c.unet},
          {"critic", c.critic},
          {"leaky_slope", c.leaky_slope},
          {"critic_slope", c.critic_slope}};
}

namespace {

template <typename V>
void read_into(const nlohmann::json& j, const std::string& key, V& out) {
  try {
    out = j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("model config: invalid value for '" + key + "'");
  }
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "nx") read_into(value, key, c.nx);
    else if (key == "ny") read_into(value, key, c.ny);
    else if (key == "nz") read_into(value, key, c.nz);
    else if (key == "n_modules") read_into(value, key, c.n_modules);
    else if (key == "nu") read_into(value, key, c.nu);
    else if (key == "nv") read_into(value, key, c.nv);
    else if (key == "slice_cnn") read_into(value, key, c.slice_cnn);
    else if (key == "unet") read_into(value, key, c.unet);
    else if (key == "critic") read_into(value, key, c.critic);
    else if (key == "leaky_slope") read_into(value, key, c.leaky_slope);
    else if (key == "critic_slope") read_into(value, key, c.critic_slope);
    else if (key == "transformer") {
      if (!value.is_object()) throw ConfigError("model config: 'transformer' must be an object");
      for (const auto& [tk, tv] : value.items()) {
        auto& t = c.transformer;
        if (tk == "patch_size") read_into(tv, tk, t.patch_size);
        else if (tk == "embed_dim") read_into(tv, tk, t.embed_dim);
        else if (tk == "n_heads") read_into(tv, tk, t.n_heads);
        else if (tk == "n_layers") read_into(tv, tk, t.n_layers);
        else if (tk == "mlp_ratio") read_into(tv, tk, t.mlp_ratio);
        else if (tk == "head_rank") read_into(tv, tk, t.head_rank);
        else throw ConfigError("unknown transformer config key '" + tk + "'");
      }
    } else {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// --------------------------------------------------------------------- helpers

namespace {

template <typename T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, int in, int out) {
  return {store.add(name + ".w", {in, out}, ParamKind::Weight, in, out),
          store.add(name + ".b", {out}, ParamKind::Bias)};
}

}  // namespace

// ------------------------------------------------------------------------ PNet

template <typename T>
std::string PNet<T>::group_prefix(const std::string& prefix, int slice) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), ".s%03d", slice);
  return prefix + buf;
}

template <typename T>
PNet<T>::PNet(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix)
    : config_(config) {
  config_.validate();
  const auto& tc = config_.transformer;
  const int p = tc.patch_size;
  const int pu = config_.nu / p;
  const int pv = config_.nv / p;
  const int per_module = pu * pv;
  n_tokens_ = config_.n_modules * per_module;
  const int patch_dim = p * p;
  const int e = tc.embed_dim;

  // Token t = (module m, patch row pr, patch col pc); its features are the
  // p x p bins of that patch in row-major order.
  auto tokens = std::make_shared<std::vector<std::int32_t>>();
  auto pos = std::make_shared<std::vector<std::int32_t>>();
  auto mod = std::make_shared<std::vector<std::int32_t>>();
  for (int m = 0; m < config_.n_modules; ++m) {
    for (int pr = 0; pr < pv; ++pr) {
      for (int pc = 0; pc < pu; ++pc) {
        for (int r = 0; r < p; ++r) {
          for (int c = 0; c < p; ++c) {
            const int v = pr * p + r;
            const int u = pc * p + c;
            tokens->push_back((m * config_.nv + v) * config_.nu + u);
          }
        }
        for (int k = 0; k < e; ++k) {
          pos->push_back((pr * pu + pc) * e + k);
          mod->push_back(m * e + k);
        }
      }
    }
  }
  token_index_ = tokens;
  pos_index_ = pos;
  module_index_ = mod;

  const int hidden = e * tc.mlp_ratio;
  const int pixels = config_.nx * config_.ny;
  for (int s = 0; s < config_.nz; ++s) {
    const std::string g = group_prefix(prefix, s);
    SliceGroup<T> grp;
    grp.patch_embed = make_linear(store, g + ".embed", patch_dim, e);
    grp.pos_embed = store.add(g + ".pos_embed", {per_module, e}, ParamKind::Weight, per_module, e);
    grp.module_embed =
        store.add(g + ".module_embed", {config_.n_modules, e}, ParamKind::Weight, config_.n_modules, e);
    for (int l = 0; l < tc.n_layers; ++l) {
      const std::string lp = g + ".layer" + std::to_string(l);
      typename SliceGroup<T>::Layer layer;
      layer.ln1_g = store.add(lp + ".ln1.g", {e}, ParamKind::Gain);
      layer.ln1_b = store.add(lp + ".ln1.b", {e}, ParamKind::Bias);
      layer.wq = make_linear(store, lp + ".attn.q", e, e);
      layer.wk = make_linear(store, lp + ".attn.k", e, e);
      layer.wv = make_linear(store, lp + ".attn.v", e, e);
      layer.wo = make_linear(store, lp + ".attn.o", e, e);
      layer.ln2_g = store.add(lp + ".ln2.g", {e}, ParamKind::Gain);
      layer.ln2_b = store.add(lp + ".ln2.b", {e}, ParamKind::Bias);
      layer.fc1 = make_linear(store, lp + ".mlp.fc1", e, hidden);
      layer.fc2 = make_linear(store, lp + ".mlp.fc2", hidden, e);
      grp.layers.push_back(std::move(layer));
    }
    grp.lnf_g = store.add(g + ".lnf.g", {e}, ParamKind::Gain);
    grp.lnf_b = store.add(g + ".lnf.b", {e}, ParamKind::Bias);
    grp.head_mix =
        store.add(g + ".head.mix", {tc.head_rank, n_tokens_}, ParamKind::Weight, n_tokens_, tc.head_rank);
    grp.head_out = make_linear(store, g + ".head.out", tc.head_rank * e, pixels);
    int in = config_.fused_channels();
    std::vector<int> widths = config_.slice_cnn;
    widths.push_back(1);
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const int out = widths[k];
      const std::string cp = g + ".cnn" + std::to_string(k);
      grp.cnn_w.push_back(store.add(cp + ".w", {out, in, 3, 3}, ParamKind::Weight, in * 9, out * 9));
      grp.cnn_b.push_back(store.add(cp + ".b", {out}, ParamKind::Bias));
      in = out;
    }
    groups_.push_back(std::move(grp));
  }
}

template <typename T>
ad::Tensor<T> PNet<T>::transformer_slice(int i, const ad::Tensor<T>& proj) const {
  const auto& g = groups_.at(static_cast<std::size_t>(i));
  const auto& tc = config_.transformer;
  const int e = tc.embed_dim;
  const int hd = e / tc.n_heads;
  const int patch_dim = tc.patch_size * tc.patch_size;

  const auto tokens = gather(proj, token_index_, {n_tokens_, patch_dim});
  auto x = add(add(g.patch_embed(tokens), gather(g.pos_embed, pos_index_, {n_tokens_, e})),
               gather(g.module_embed, module_index_, {n_tokens_, e}));
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  for (const auto& layer : g.layers) {
    const auto h = layer_norm(x, layer.ln1_g, layer.ln1_b);
    const auto q = layer.wq(h);
    const auto k = layer.wk(h);
    const auto v = layer.wv(h);
    std::vector<ad::Tensor<T>> heads;
    for (int hh = 0; hh < tc.n_heads; ++hh) {
      const auto qh = narrow(q, 1, hh * hd, hd);
      const auto kh = narrow(k, 1, hh * hd, hd);
      const auto vh = narrow(v, 1, hh * hd, hd);
      const auto attn = softmax(mul_scalar(matmul(qh, kh, false, true), scale));
      heads.push_back(matmul(attn, vh));
    }
    const auto merged = heads.size() == 1 ? heads.front() : concat(heads, 1);
    x = add(x, layer.wo(merged));
    const auto h2 = layer_norm(x, layer.ln2_g, layer.ln2_b);
    x = add(x, layer.fc2(relu(layer.fc1(h2))));
  }
  x = layer_norm(x, g.lnf_g, g.lnf_b);
  const auto mixed = matmul(g.head_mix, x);  // (rank, E)
  const auto flat = reshape(mixed, {1, tc.head_rank * e});
  return reshape(g.head_out(flat), {1, config_.ny, config_.nx});
}

template <typename T>
ad::Tensor<T> PNet<T>::resize_projections(const ad::Tensor<T>& proj) const {
  return interpolate2d(proj, config_.ny, config_.nx);
}

template <typename T>
ad::Tensor<T> PNet<T>::fused_features(int i, const ad::Tensor<T>& proj,
                                      const ad::Tensor<T>& img_bp,
                                      const ad::Tensor<T>& resized) const {
  return concat<T>({transformer_slice(i, proj), narrow(img_bp, 0, i, 1), resized}, 0);
}

template <typename T>
ad::Tensor<T> PNet<T>::slice_forward(int i, const ad::Tensor<T>& proj,
                                     const ad::Tensor<T>& img_bp,
                                     const ad::Tensor<T>& resized) const {
  const auto& g = groups_.at(static_cast<std::size_t>(i));
  auto h = fused_features(i, proj, img_bp, resized);
  const T slope = static_cast<T>(config_.leaky_slope);
  for (std::size_t k = 0; k < g.cnn_w.size(); ++k) {
    h = conv2d(h, g.cnn_w[k], g.cnn_b[k], 1);
    if (k + 1 < g.cnn_w.size()) h = leaky_relu(h, slope);
  }
  return h;
}

template <typename T>
ad::Tensor<T> PNet<T>::forward(const ad::Tensor<T>& proj, const ad::Tensor<T>& img_bp) const {
  if (proj.shape() != ad::Shape{config_.n_modules, config_.nv, config_.nu}) {
    throw ShapeError("pnet: projections " + ad::to_string(proj.shape()) + " do not match (" +
                     std::to_string(config_.n_modules) + ", " + std::to_string(config_.nv) +
                     ", " + std::to_string(config_.nu) + ")");
  }
  if (img_bp.shape() != ad::Shape{config_.nz, config_.ny, config_.nx}) {
    throw ShapeError("pnet: IMG_bp shape " + ad::to_string(img_bp.shape()) + " does not match the grid");
  }
  const auto resized = resize_projections(proj);
  std::vector<ad::Tensor<T>> slices;
  slices.reserve(static_cast<std::size_t>(config_.nz));
  for (int i = 0; i < config_.nz; ++i) slices.push_back(slice_forward(i, proj, img_bp, resized));
  return concat(slices, 0);
}

// ---------------------------------------------------------------------- UNet3D

template <typename T>
typename UNet3D<T>::Conv UNet3D<T>::add_conv(ParamStore<T>& store, const std::string& name,
                                             int in, int out, int stride) {
  return {store.add(name + ".w", {out, in, 3, 3, 3}, ParamKind::Weight, in * 27, out * 27),
          store.add(name + ".b", {out}, ParamKind::Bias), stride};
}

template <typename T>
UNet3D<T>::UNet3D(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix,
                  int in_channels)
    : slope_(static_cast<T>(config.leaky_slope)) {
  const int w0 = config.unet[0], w1 = config.unet[1], w2 = config.unet[2];
  e1_ = add_conv(store, prefix + ".enc1", in_channels, w0, 1);
  e2_ = add_conv(store, prefix + ".enc2", w0, w1, 2);
  b1_ = add_conv(store, prefix + ".bottom1", w1, w2, 2);
  b2_ = add_conv(store, prefix + ".bottom2", w2, w2, 1);
  d1_ = add_conv(store, prefix + ".dec1", w2 + w1, w1, 1);
  d0_ = add_conv(store, prefix + ".dec0", w1 + w0, w0, 1);
  out_ = add_conv(store, prefix + ".out", w0, 1, 1);
}

template <typename T>
ad::Tensor<T> UNet3D<T>::apply(const Conv& c, const ad::Tensor<T>& x, bool activate) const {
  auto y = conv3d(x, c.w, c.b, c.stride, 1);
  return activate ? leaky_relu(y, slope_) : y;
}

template <typename T>
ad::Tensor<T> UNet3D<T>::forward(const ad::Tensor<T>& x) const {
  const auto e1 = apply(e1_, x, true);
  const auto e2 = apply(e2_, e1, true);
  const auto b = apply(b2_, apply(b1_, e2, true), true);
  const auto u1 = upsample_nearest3d(b, e2.dim(1), e2.dim(2), e2.dim(3));
  const auto d1 = apply(d1_, concat<T>({u1, e2}, 0), true);
  const auto u0 = upsample_nearest3d(d1, e1.dim(1), e1.dim(2), e1.dim(3));
  const auto d0 = apply(d0_, concat<T>({u0, e1}, 0), true);
  return apply(out_, d0, false);
}

// ------------------------------------------------------------------------ INet

template <typename T>
INet<T>::INet(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix)
    : config_(config),
      cnn1_(config, store, prefix + ".cnn1", 3),
      cnn2_(config, store, prefix + ".cnn2", 3) {}

template <typename T>
ad::Tensor<T> INet<T>::forward(const ad::Tensor<T>& img_p, const ad::Tensor<T>& img_bp,
                               const ad::Tensor<T>& img_mlem) const {
  const ad::Shape vol{config_.nz, config_.ny, config_.nx};
  if (img_p.shape() != vol || img_bp.shape() != vol || img_mlem.shape() != vol) {
    throw ShapeError("inet: input volumes must all have shape " + ad::to_string(vol));
  }
  const ad::Shape chan{1, config_.nz, config_.ny, config_.nx};
  const auto p = reshape(img_p, chan);
  const auto bp = reshape(img_bp, chan);
  const auto ml = reshape(img_mlem, chan);
  const auto c1 = cnn1_.forward(concat<T>({p, bp, ml}, 0));
  const auto c2 = cnn2_.forward(concat<T>({c1, p, ml}, 0));
  return relu(add(img_mlem, reshape(c2, vol)));
}

// ---------------------------------------------------------------------- Critic

template <typename T>
Critic<T>::Critic(const ModelConfig& config, ParamStore<T>& store, const std::string& prefix)
    : config_(config), slope_(static_cast<T>(config.critic_slope)) {
  std::vector<int> widths = config.critic;
  widths.push_back(1);
  int in = 1;
  for (std::size_t k = 0; k < widths.size(); ++k) {
    const int out = widths[k];
    const std::string name = prefix + ".conv" + std::to_string(k);
    layers_.push_back({store.add(name + ".w", {out, in, 3, 3, 3}, ParamKind::Weight, in * 27, out * 27),
                       store.add(name + ".b", {out}, ParamKind::Bias), k < 3 ? 2 : 1});
    in = out;
  }
}

template <typename T>
ad::Tensor<T> Critic<T>::score(const ad::Tensor<T>& x) const {
  const ad::Shape vol{config_.nz, config_.ny, config_.nx};
  if (x.shape() != vol) throw ShapeError("critic: input " + ad::to_string(x.shape()) + " does not match the grid");
  auto h = reshape(x, {1, config_.nz, config_.ny, config_.nx});
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    h = conv3d(h, layers_[k].w, layers_[k].b, layers_[k].stride, 1);
    if (k + 1 < layers_.size()) h = leaky_relu(h, slope_);
  }
  return mean(h);
}

template <typename T>
typename Critic<T>::Linearization Critic<T>::linearize(const ad::Tensor<T>& x) const {
  const ad::Shape vol{config_.nz, config_.ny, config_.nx};
  if (x.shape() != vol) throw ShapeError("critic: input " + ad::to_string(x.shape()) + " does not match the grid");
  Linearization lin;
  ad::NoGradGuard no_grad;
  auto hv = ad::Tensor<T>::constant({1, config_.nz, config_.ny, config_.nx},
                                    std::vector<T>(x.values().begin(), x.values().end()));
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    lin.in_shapes.push_back(hv.shape());
    auto a = conv3d(hv, layers_[k].w.detach(), layers_[k].b.detach(), layers_[k].stride, 1);
    if (k + 1 < layers_.size()) {
      std::vector<T> m(a.size());
      const auto av = a.values();
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = av[i] > T(0) ? T(1) : slope_;
      lin.masks.push_back(ad::Tensor<T>::constant(a.shape(), std::move(m)));
      hv = leaky_relu(a, slope_);
    } else {
      lin.out_shape = a.shape();
    }
  }
  return lin;
}

template <typename T>
ad::Tensor<T> Critic<T>::input_gradient(const Linearization& lin) const {
  if (lin.in_shapes.size() != layers_.size() || lin.masks.size() + 1 != layers_.size()) {
    throw ShapeError("critic: linearization does not match the layer count");
  }
  // Reverse sweep built from differentiable ops: the leaky-ReLU derivative is
  // piecewise constant, so only the convolution transposes carry weight
  // dependence.
  const std::size_t n_out = ad::numel(lin.out_shape);
  auto g = ad::Tensor<T>::constant(lin.out_shape, static_cast<T>(1.0 / static_cast<double>(n_out)));
  for (std::size_t k = layers_.size(); k-- > 0;) {
    g = conv3d_input_grad(g, layers_[k].w, layers_[k].stride, 1, lin.in_shapes[k]);
    if (k > 0) g = mul(g, lin.masks[k - 1]);
  }
  return reshape(g, {config_.nz, config_.ny, config_.nx});
}

template <typename T>
ad::Tensor<T> Critic<T>::input_gradient(const ad::Tensor<T>& x) const {
  return input_gradient(linearize(x));
}

// ----------------------------------------------------------------- TIPNetModel

template <typename T>
TIPNetModel<T>::TIPNetModel(const ModelConfig& config)
    : config_(config), params_(std::make_unique<ParamStore<T>>()) {
  config_.validate();
  pnet_ = std::make_unique<PNet<T>>(config_, *params_, "pnet");
  inet_ = std::make_unique<INet<T>>(config_, *params_, "inet");
  critic_ = std::make_unique<Critic<T>>(config_, *params_, "critic");
}

template <typename T>
GeneratorOutput<T> TIPNetModel<T>::generate(const GeneratorInput<T>& in) const {
  GeneratorOutput<T> out;
  out.img_p = pnet_->forward(in.proj, in.img_bp);
  out.final = inet_->forward(out.img_p, in.img_bp, in.img_mlem);
  return out;
}

template class PNet<float>;
template class PNet<double>;
template class UNet3D<float>;
template class UNet3D<double>;
template class INet<float>;
template class INet<double>;
template class Critic<float>;
template class Critic<double>;
template class TIPNetModel<float>;
template class TIPNetModel<double>;

}  // namespace tipnet
