#include "tipnet/losses.hpp"

#include <algorithm>

#include "tipnet/error.hpp"

namespace tipnet {

void LossWeights::validate() const {
  for (double v : {lambda_a, lambda_b, lambda_c, lambda_d, lambda_gp}) {
    if (!(v >= 0.0)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"lambda_a", w.lambda_a},
          {"lambda_b", w.lambda_b},
          {"lambda_c", w.lambda_c},
          {"lambda_d", w.lambda_d},
          {"lambda_gp", w.lambda_gp}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j, LossWeights w) {
  if (!j.is_object()) throw ConfigError("loss weights must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw ConfigError("loss weight '" + key + "' must be a number");
    const double v = value.get<double>();
    if (key == "lambda_a") w.lambda_a = v;
    else if (key == "lambda_b") w.lambda_b = v;
    else if (key == "lambda_c") w.lambda_c = v;
    else if (key == "lambda_d") w.lambda_d = v;
    else if (key == "lambda_gp") w.lambda_gp = v;
    else throw ConfigError("unknown loss weight key '" + key + "'");
  }
  w.validate();
  return w;
}

namespace {

template <typename T>
using Mat = std::shared_ptr<const std::vector<T>>;

template <typename T>
Mat<T> derivative_matrix(int n) {
  auto m = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * n, T(0));
  for (int i = 0; i < n; ++i) {
    if (i + 1 < n) (*m)[static_cast<std::size_t>(i) * n + i + 1] = T(1);
    if (i > 0) (*m)[static_cast<std::size_t>(i) * n + i - 1] = T(-1);
  }
  return m;
}

template <typename T>
Mat<T> smoothing_matrix(int n) {
  auto m = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * n, T(0));
  for (int i = 0; i < n; ++i) {
    (*m)[static_cast<std::size_t>(i) * n + i] = T(2);
    if (i + 1 < n) (*m)[static_cast<std::size_t>(i) * n + i + 1] = T(1);
    if (i > 0) (*m)[static_cast<std::size_t>(i) * n + i - 1] = T(1);
  }
  return m;
}

template <typename T>
Mat<T> gaussian_matrix(int n, const SSIMOptions& o) {
  const auto d = gaussian_filter_matrix(n, o.window, o.sigma);
  return std::make_shared<const std::vector<T>>(d.begin(), d.end());
}

void require_volume(const char* op, const ad::Shape& s) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": expected (nz, ny, nx), got " + ad::to_string(s));
}

template <typename T>
double max_value(const ad::Tensor<T>& t) {
  double peak = 0.0;
  for (T v : t.values()) peak = std::max(peak, static_cast<double>(v));
  return peak;
}

}  // namespace

template <typename T>
ad::Tensor<T> sobel_magnitude(const ad::Tensor<T>& x, T eps) {
  require_volume("sobel", x.shape());
  const int nz = x.dim(0), ny = x.dim(1), nx = x.dim(2);
  if (nz < 3 || ny < 3 || nx < 3) {
    throw ShapeError("sobel: every axis needs at least 3 voxels, got " + ad::to_string(x.shape()));
  }
  const auto dz = derivative_matrix<T>(nz), dy = derivative_matrix<T>(ny),
             dx = derivative_matrix<T>(nx);
  const auto sz = smoothing_matrix<T>(nz), sy = smoothing_matrix<T>(ny),
             sx = smoothing_matrix<T>(nx);
  const auto a = axis_filter(x, 0, sz);  // smoothed along z
  const auto gx = axis_filter(axis_filter(a, 1, sy), 2, dx);
  const auto gy = axis_filter(axis_filter(a, 1, dy), 2, sx);
  const auto gz = axis_filter(axis_filter(axis_filter(x, 0, dz), 1, sy), 2, sx);
  auto s = add(add(square(gx), square(gy)), square(gz));
  if (eps != T(0)) s = add_scalar(s, eps);
  return sqrt(s);
}

VolumeGrid sobel_edges(const VolumeGrid& x) {
  ad::NoGradGuard guard;
  const auto t = sobel_magnitude<double>(to_tensor<double>(x), 0.0);
  return to_volume(t, x.grid());
}

template <typename T>
ad::Tensor<T> mae(const ad::Tensor<T>& x, const ad::Tensor<T>& y) {
  return mean(abs(sub(x, y)));
}

template <typename T>
ad::Tensor<T> ssim_tensor(const ad::Tensor<T>& x, const ad::Tensor<T>& y, double peak,
                          const SSIMOptions& o) {
  require_volume("ssim", x.shape());
  if (x.shape() != y.shape()) throw ShapeError("ssim: shape mismatch");
  if (!(peak > 0.0)) throw DataError("ssim: peak must be positive");
  const auto gz = gaussian_matrix<T>(x.dim(0), o);
  const auto gy = gaussian_matrix<T>(x.dim(1), o);
  const auto gx = gaussian_matrix<T>(x.dim(2), o);
  auto blur = [&](const ad::Tensor<T>& v) {
    return axis_filter(axis_filter(axis_filter(v, 0, gz), 1, gy), 2, gx);
  };
  const T c1 = static_cast<T>((o.k1 * peak) * (o.k1 * peak));
  const T c2 = static_cast<T>((o.k2 * peak) * (o.k2 * peak));
  const auto mx = blur(x);
  const auto my = blur(y);
  const auto mx2 = square(mx);
  const auto my2 = square(my);
  const auto mxy = mul(mx, my);
  const auto vx = sub(blur(square(x)), mx2);
  const auto vy = sub(blur(square(y)), my2);
  const auto cov = sub(blur(mul(x, y)), mxy);
  const auto num = mul(add_scalar(mul_scalar(mxy, T(2)), c1), add_scalar(mul_scalar(cov, T(2)), c2));
  const auto den = mul(add_scalar(add(mx2, my2), c1), add_scalar(add(vx, vy), c2));
  return mean(div(num, den));
}

template <typename T>
CompositeTerms<T> composite_terms(const ad::Tensor<T>& x, const ad::Tensor<T>& y,
                                  const LossWeights& w) {
  if (x.shape() != y.shape()) {
    throw ShapeError("composite loss: shape mismatch " + ad::to_string(x.shape()) + " vs " +
                     ad::to_string(y.shape()));
  }
  double peak = max_value(y);
  if (!(peak > 0.0)) peak = 1.0;
  CompositeTerms<T> t;
  t.mae = mae(x, y);
  t.ssim = ssim_tensor(x, y, peak);
  t.edge = mae(sobel_magnitude(x), sobel_magnitude(y));
  const auto one_minus_ssim = add_scalar(mul_scalar(t.ssim, T(-1)), T(1));
  t.total = add(add(t.mae, mul_scalar(one_minus_ssim, static_cast<T>(w.lambda_c))),
                mul_scalar(t.edge, static_cast<T>(w.lambda_d)));
  return t;
}

template <typename T>
GeneratorTerms<T> generator_objective(std::span<const ad::Tensor<T>> final_out,
                                      std::span<const ad::Tensor<T>> pnet_out,
                                      std::span<const ad::Tensor<T>> target,
                                      const CriticFn<T>& critic, const LossWeights& w) {
  if (final_out.empty()) throw DataError("generator objective: empty batch");
  if (pnet_out.size() != final_out.size() || target.size() != final_out.size()) {
    throw DataError("generator objective: batch components have different sizes");
  }
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(final_out.size()));
  ad::Tensor<T> main, pnet, adv;
  for (std::size_t b = 0; b < final_out.size(); ++b) {
    if (!pnet_out[b].defined()) throw DataError("generator objective: missing IMG_p");
    const auto lm = composite_loss(final_out[b], target[b], w);
    const auto lp = composite_loss(pnet_out[b], target[b], w);
    const auto d = critic.score(final_out[b]);
    main = main.defined() ? add(main, lm) : lm;
    pnet = pnet.defined() ? add(pnet, lp) : lp;
    adv = adv.defined() ? add(adv, d) : d;
  }
  GeneratorTerms<T> t;
  t.main = mul_scalar(main, inv_b);
  t.pnet = mul_scalar(pnet, inv_b);
  t.adversarial = mul_scalar(adv, inv_b);
  t.total = sub(add(t.main, mul_scalar(t.pnet, static_cast<T>(w.lambda_a))),
                mul_scalar(t.adversarial, static_cast<T>(w.lambda_b)));
  return t;
}

template <typename T>
CriticTerms<T> critic_objective(std::span<const ad::Tensor<T>> real,
                                std::span<const ad::Tensor<T>> fake, const CriticFn<T>& critic,
                                const LossWeights& w, std::span<const double> u) {
  if (real.empty()) throw DataError("critic objective: empty batch");
  if (fake.size() != real.size() || u.size() != real.size()) {
    throw DataError("critic objective: real, fake and u must have the same length");
  }
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(real.size()));
  ad::Tensor<T> wass, pen;
  for (std::size_t b = 0; b < real.size(); ++b) {
    if (real[b].shape() != fake[b].shape()) throw ShapeError("critic objective: shape mismatch");
    const auto d = sub(critic.score(fake[b]), critic.score(real[b]));
    std::vector<T> mix(real[b].size());
    const auto rv = real[b].values();
    const auto fv = fake[b].values();
    const T ub = static_cast<T>(u[b]);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = ub * rv[i] + (T(1) - ub) * fv[i];
    const auto x_hat = ad::Tensor<T>::constant(real[b].shape(), std::move(mix));
    const auto g = critic.input_gradient(x_hat);
    // The tiny offset keeps the norm differentiable at a zero gradient.
    const auto norm = sqrt(add_scalar(sum(square(g)), T(1e-16)));
    const auto p = square(add_scalar(norm, T(-1)));
    wass = wass.defined() ? add(wass, d) : d;
    pen = pen.defined() ? add(pen, p) : p;
  }
  CriticTerms<T> t;
  t.wasserstein = mul_scalar(wass, inv_b);
  t.penalty = mul_scalar(pen, inv_b);
  t.total = add(t.wasserstein, mul_scalar(t.penalty, static_cast<T>(w.lambda_gp)));
  return t;
}

template <typename T>
CriticTerms<T> critic_objective(std::span<const ad::Tensor<T>> real,
                                std::span<const ad::Tensor<T>> fake, const CriticFn<T>& critic,
                                const LossWeights& w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::vector<double> u(real.size());
  for (auto& v : u) v = dist(rng);
  return critic_objective(real, fake, critic, w, std::span<const double>(u));
}

template <typename T>
ad::Tensor<T> to_tensor(const VolumeGrid& v, bool requires_grad) {
  std::vector<T> values(v.values().begin(), v.values().end());
  ad::Shape shape{v.nz(), v.ny(), v.nx()};
  return requires_grad ? ad::Tensor<T>::variable(std::move(shape), std::move(values))
                       : ad::Tensor<T>::constant(std::move(shape), std::move(values));
}

namespace {

template <typename T>
VolumeGrid volume_from(const ad::Tensor<T>& t, const GridSpec& grid) {
  if (t.size() != grid.voxel_count()) {
    throw ShapeError("tensor of shape " + ad::to_string(t.shape()) + " does not fit the grid");
  }
  return VolumeGrid(grid, std::vector<float>(t.values().begin(), t.values().end()));
}

}  // namespace

VolumeGrid to_volume(const ad::Tensor<float>& t, const GridSpec& grid) { return volume_from(t, grid); }
VolumeGrid to_volume(const ad::Tensor<double>& t, const GridSpec& grid) { return volume_from(t, grid); }

#define TIPNET_LOSSES_INSTANTIATE(T)                                                           \
  template ad::Tensor<T> sobel_magnitude(const ad::Tensor<T>&, T);                             \
  template ad::Tensor<T> mae(const ad::Tensor<T>&, const ad::Tensor<T>&);                      \
  template ad::Tensor<T> ssim_tensor(const ad::Tensor<T>&, const ad::Tensor<T>&, double,       \
                                     const SSIMOptions&);                                      \
  template CompositeTerms<T> composite_terms(const ad::Tensor<T>&, const ad::Tensor<T>&,       \
                                             const LossWeights&);                              \
  template GeneratorTerms<T> generator_objective(                                              \
      std::span<const ad::Tensor<T>>, std::span<const ad::Tensor<T>>,                          \
      std::span<const ad::Tensor<T>>, const CriticFn<T>&, const LossWeights&);                 \
  template CriticTerms<T> critic_objective(std::span<const ad::Tensor<T>>,                     \
                                           std::span<const ad::Tensor<T>>, const CriticFn<T>&, \
                                           const LossWeights&, std::span<const double>);       \
  template CriticTerms<T> critic_objective(std::span<const ad::Tensor<T>>,                     \
                                           std::span<const ad::Tensor<T>>, const CriticFn<T>&, \
                                           const LossWeights&, std::mt19937_64&);              \
  template ad::Tensor<T> to_tensor(const VolumeGrid&, bool);

TIPNET_LOSSES_INSTANTIATE(float)
TIPNET_LOSSES_INSTANTIATE(double)

#undef TIPNET_LOSSES_INSTANTIATE

}  // namespace tipnet
