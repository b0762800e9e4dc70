#include "tipnet/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <memory>
#include <random>
#include <type_traits>

#include "tipnet/autodiff.hpp"
#include "tipnet/error.hpp"
#include "tipnet/losses.hpp"
#include "tipnet/mlem.hpp"
#include "tipnet/tipnet.hpp"
#include "tipnet/training.hpp"

namespace tipnet {

AdjointReport adjoint_suite(const SystemMatrix& s, int pairs, std::uint64_t seed) {
  if (pairs < 1) throw ConfigError("adjoint suite: pairs must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  AdjointReport r;
  r.pairs = pairs;
  std::vector<double> x(static_cast<std::size_t>(s.cols())), y(static_cast<std::size_t>(s.rows()));
  std::vector<double> sx(y.size()), sty(x.size());
  for (int p = 0; p < pairs; ++p) {
    for (auto& v : x) v = uni(rng);
    for (auto& v : y) v = uni(rng);
    s.multiply(x, sx);
    s.multiply_transpose(y, sty);
    long double lhs = 0.0L, rhs = 0.0L;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += static_cast<long double>(sx[i]) * y[i];
    for (std::size_t j = 0; j < x.size(); ++j) rhs += static_cast<long double>(x[j]) * sty[j];
    const double denom = std::max({std::fabs(static_cast<double>(lhs)), std::fabs(static_cast<double>(rhs)), 1e-300});
    const double res = std::fabs(static_cast<double>(lhs - rhs)) / denom;
    r.residuals.push_back(res);
    r.max_residual = std::max(r.max_residual, res);
  }
  return r;
}

MonotonicityReport mlem_monotonicity(const DatasetOperators& ops, int phantoms, int iterations,
                                     double counts_per_angle, std::uint64_t seed) {
  if (phantoms < 1 || iterations < 1) throw ConfigError("monotonicity: counts must be >= 1");
  MonotonicityReport r;
  r.phantoms = phantoms;
  r.iterations = iterations;
  r.worst_relative_drop = -std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(seed);
  MLEMConfig cfg;
  cfg.n_iters = iterations;
  for (int p = 0; p < phantoms; ++p) {
    const auto spec = random_phantom_spec(rng, ops.setup.grid, p % 2 == 1);
    const auto phantom = generate_phantom(spec, ops.setup.grid);
    const auto y = simulate_acquisition(phantom.activity, ops.s_one, {counts_per_angle, rng()});
    const std::vector<double> yd(y.values().begin(), y.values().end());
    const double eps = mlem_epsilon(cfg, yd);
    std::vector<double> trace;
    mlem_iterate(ops.s_one, yd, cfg, [&](int, std::span<const double> x) {
      for (double v : x) {
        if (!(v >= 0.0)) r.nonnegative = false;
      }
      trace.push_back(poisson_loglik(ops.s_one, x, yd, eps));
    });
    for (std::size_t k = 1; k < trace.size(); ++k) {
      const double drop = (trace[k - 1] - trace[k]) / std::max(std::fabs(trace[k - 1]), 1e-300);
      r.worst_relative_drop = std::max(r.worst_relative_drop, drop);
    }
    r.loglik.push_back(std::move(trace));
  }
  return r;
}

double gradient_tolerance(const std::string& dtype) { return dtype == "float64" ? 1e-5 : 1e-3; }

namespace {

using ad::Shape;
using ad::Tensor;

template <typename T>
struct Suite {
  std::mt19937_64 rng;
  std::string dtype;
  ad::GradCheckOptions opts;
  std::vector<GradientCase>* out;

  Tensor<T> var(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::uniform_real_distribution<double> uni(lo, hi);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(uni(rng));
    return Tensor<T>::variable(std::move(shape), std::move(v));
  }
  /// Values in [lo, hi] with random sign, keeping kinks out of reach.
  Tensor<T> var_away_from_zero(Shape shape, double lo, double hi) {
    auto t = var(std::move(shape), lo, hi);
    std::bernoulli_distribution coin(0.5);
    for (auto& x : t.mutable_values()) {
      if (coin(rng)) x = -x;
    }
    return t;
  }
  Tensor<T> weights_like(const Shape& shape) {
    auto t = var(shape);
    return t.detach();
  }
  /// <r, f(inputs)> with a fixed random r, so every output coordinate counts.
  void check(const std::string& name, std::function<Tensor<T>(const std::vector<Tensor<T>>&)> f,
             std::vector<Tensor<T>> inputs, std::size_t max_coords = 0) {
    Tensor<T> r;
    {
      ad::NoGradGuard ng;
      r = weights_like(f(inputs).shape());
    }
    ad::ScalarFn<T> scalar = [f, r](const std::vector<Tensor<T>>& in) { return ad::sum(ad::mul(f(in), r)); };
    auto o = opts;
    o.max_coords_per_input = max_coords;
    o.seed = rng();
    const auto res = ad::grad_check<T>(scalar, std::move(inputs), o);
    out->push_back({name, dtype, res.max_rel_error, res.coords_checked});
  }
  /// As check, but at 32 bits the finite differences run on ref, a 64-bit
  /// mirror of f, over ref_inputs. At 64 bits ref is ignored.
  void check_pair(const std::string& name, std::function<Tensor<T>(const std::vector<Tensor<T>>&)> f,
                  std::function<Tensor<double>(const std::vector<Tensor<double>>&)> ref,
                  std::vector<Tensor<T>> inputs, std::vector<Tensor<double>> ref_inputs, std::size_t max_coords) {
    if constexpr (std::is_same_v<T, double>) {
      check(name, f, std::move(inputs), max_coords);
    } else {
      Tensor<T> r;
      {
        ad::NoGradGuard ng;
        r = weights_like(f(inputs).shape());
      }
      const auto r64 = widen(r);
      ad::ScalarFn<T> scalar = [f, r](const std::vector<Tensor<T>>& in) { return ad::sum(ad::mul(f(in), r)); };
      ad::ScalarFn<double> scalar64 = [ref, r64](const std::vector<Tensor<double>>& in) {
        return ad::sum(ad::mul(ref(in), r64));
      };
      auto o = opts;
      o.max_coords_per_input = max_coords;
      o.seed = rng();
      const auto res = ad::grad_check(scalar, std::move(inputs), scalar64, std::move(ref_inputs), o);
      out->push_back({name, dtype, res.max_rel_error, res.coords_checked});
    }
  }
  static Tensor<double> widen(const Tensor<T>& t, bool variable = false) {
    std::vector<double> v(t.values().begin(), t.values().end());
    return variable ? Tensor<double>::variable(t.shape(), std::move(v)) : Tensor<double>::constant(t.shape(), std::move(v));
  }
};

template <typename T>
void primitive_checks(Suite<T>& s) {
  using V = std::vector<Tensor<T>>;
  s.check("add", [](const V& a) { return ad::add(a[0], a[1]); }, {s.var({3, 4}), s.var({3, 4})});
  s.check("sub", [](const V& a) { return ad::sub(a[0], a[1]); }, {s.var({3, 4}), s.var({3, 4})});
  s.check("mul", [](const V& a) { return ad::mul(a[0], a[1]); }, {s.var({3, 4}), s.var({3, 4})});
  s.check("div", [](const V& a) { return ad::div(a[0], a[1]); }, {s.var({3, 4}), s.var({3, 4}, 0.5, 1.5)});
  s.check("add_scalar", [](const V& a) { return ad::add_scalar(a[0], T(0.7)); }, {s.var({5})});
  s.check("mul_scalar", [](const V& a) { return ad::mul_scalar(a[0], T(-1.3)); }, {s.var({5})});
  s.check("add_rowvec", [](const V& a) { return ad::add_rowvec(a[0], a[1]); }, {s.var({2, 3, 4}), s.var({4})});
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      const Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
      const Shape sb = tb ? Shape{5, 4} : Shape{4, 5};
      s.check("matmul_t" + std::to_string(ta) + std::to_string(tb),
              [ta, tb](const V& a) { return ad::matmul(a[0], a[1], ta != 0, tb != 0); },
              {s.var(sa), s.var(sb)});
    }
  }
  s.check("relu", [](const V& a) { return ad::relu(a[0]); }, {s.var_away_from_zero({12}, 0.1, 1.0)});
  s.check("leaky_relu", [](const V& a) { return ad::leaky_relu(a[0], T(0.2)); },
          {s.var_away_from_zero({12}, 0.1, 1.0)});
  s.check("abs", [](const V& a) { return ad::abs(a[0]); }, {s.var_away_from_zero({12}, 0.1, 1.0)});
  s.check("sqrt", [](const V& a) { return ad::sqrt(a[0]); }, {s.var({12}, 0.5, 2.0)});
  s.check("square", [](const V& a) { return ad::square(a[0]); }, {s.var({12})});
  s.check("softmax", [](const V& a) { return ad::softmax(a[0]); }, {s.var({3, 6})});
  s.check("layer_norm", [](const V& a) { return ad::layer_norm(a[0], a[1], a[2]); },
          {s.var({3, 6}), s.var({6}), s.var({6})});
  s.check("sum", [](const V& a) { return ad::sum(a[0]); }, {s.var({3, 4})});
  s.check("mean", [](const V& a) { return ad::mean(a[0]); }, {s.var({3, 4})});
  s.check("concat", [](const V& a) { return ad::concat<T>({a[0], a[1]}, 1); }, {s.var({2, 3, 2}), s.var({2, 1, 2})});
  s.check("narrow", [](const V& a) { return ad::narrow(a[0], 1, 1, 2); }, {s.var({2, 4, 3})});
  s.check("reshape", [](const V& a) { return ad::reshape(a[0], {4, 3}); }, {s.var({2, 6})});
  auto index = std::make_shared<std::vector<std::int32_t>>(std::vector<std::int32_t>{0, 3, 3, 5, 1, 0, 2});
  s.check("gather", [index](const V& a) { return ad::gather(a[0], index, {7}); }, {s.var({6})});
  s.check("conv2d", [](const V& a) { return ad::conv2d(a[0], a[1], a[2], 1); },
          {s.var({2, 5, 6}), s.var({3, 2, 3, 3}), s.var({3})});
  s.check("conv3d", [](const V& a) { return ad::conv3d(a[0], a[1], a[2], 1, 1); },
          {s.var({2, 4, 5, 3}), s.var({2, 2, 3, 3, 3}), s.var({2})});
  s.check("conv3d_stride2", [](const V& a) { return ad::conv3d(a[0], a[1], a[2], 2, 1); },
          {s.var({2, 5, 4, 6}), s.var({3, 2, 3, 3, 3}), s.var({3})});
  s.check("conv3d_input_grad",
          [](const V& a) { return ad::conv3d_input_grad(a[0], a[1], 2, 1, {2, 5, 4, 6}); },
          {s.var({3, 3, 2, 3}), s.var({3, 2, 3, 3, 3})});
  s.check("interpolate2d", [](const V& a) { return ad::interpolate2d(a[0], 7, 5); }, {s.var({2, 4, 3})});
  s.check("upsample_nearest3d", [](const V& a) { return ad::upsample_nearest3d(a[0], 4, 5, 6); },
          {s.var({2, 2, 3, 3})});
  std::shared_ptr<const std::vector<T>> m = std::make_shared<std::vector<T>>(std::vector<T>{T(1), T(2), T(0), T(-1), T(0), T(1), T(0), T(-2), T(1)});
  s.check("axis_filter", [m](const V& a) { return ad::axis_filter(a[0], 1, m); }, {s.var({2, 3, 4})});
}

template <typename T>
void model_checks(Suite<T>& s, std::size_t coords) {
  using V = std::vector<Tensor<T>>;
  using V64 = std::vector<Tensor<double>>;
  const auto cfg = ModelConfig::for_scale(Scale::Desk);
  const Shape vol{cfg.nz, cfg.ny, cfg.nx};

  // Composite loss against a fixed target; x stays positive and away from y.
  {
    auto y = s.var(vol, 0.5, 2.0).detach();
    auto x = s.var(vol, 0.2, 3.0);
    const auto y64 = Suite<T>::widen(y);
    LossWeights w;
    s.check_pair("composite_loss", [y, w](const V& a) { return composite_loss(a[0], y, w); },
                 [y64, w](const V64& a) { return composite_loss(a[0], y64, w); }, {x},
                 {Suite<T>::widen(x, true)}, coords);
  }

  TIPNetModel<T> model(cfg);
  initialize_model(model, s.rng());
  // Give the zeroed last layer values so gradients reach every group.
  for (auto& p : model.params().params()) {
    if (p.name.rfind("inet.cnn2.out.", 0) == 0) {
      std::uniform_real_distribution<double> uni(-0.05, 0.05);
      for (auto& v : p.tensor.mutable_values()) v = static_cast<T>(uni(s.rng));
    }
  }
  std::unique_ptr<TIPNetModel<double>> mirror_owner;
  TIPNetModel<double>* mirror = nullptr;
  if constexpr (std::is_same_v<T, double>) {
    mirror = &model;
  } else {
    mirror_owner = std::make_unique<TIPNetModel<double>>(cfg);
    mirror_owner->params().copy_values_from(model.params());
    mirror = mirror_owner.get();
  }
  auto mirror_params = [&](const std::vector<std::string>& names) {
    V64 out;
    for (const auto& n : names) out.push_back(mirror->params().find(n)->tensor);
    return out;
  };

  // Critic: input gradient against finite differences of the score, and the
  // parameter derivative of a functional of the input gradient.
  {
    const auto& critic = model.critic();
    const auto& critic64 = mirror->critic();
    auto x = s.var(vol, 0.0, 2.0);
    {
      // score's own backward pass is the reference; input_gradient must match it.
      auto ig = critic.input_gradient(x.detach()).detach();
      auto xs = x.detach();
      Tensor<T> score_grad;
      {
        auto xv = Tensor<T>::variable(vol, std::vector<T>(xs.values().begin(), xs.values().end()));
        critic.score(xv).backward();
        score_grad = Tensor<T>::constant(vol, std::vector<T>(xv.grad().begin(), xv.grad().end()));
      }
      double max_abs = 0.0, scale = 1e-30;
      for (std::size_t i = 0; i < ig.size(); ++i) {
        max_abs = std::max(max_abs, std::fabs(static_cast<double>(ig.values()[i]) - score_grad.values()[i]));
        scale = std::max(scale, std::fabs(static_cast<double>(score_grad.values()[i])));
      }
      s.out->push_back({"critic_input_gradient_vs_backward", s.dtype, max_abs / scale, ig.size()});
      s.check_pair("critic_score", [&critic](const V& a) { return critic.score(a[0]); },
                   [&critic64](const V64& a) { return critic64.score(a[0]); }, {x},
                   {Suite<T>::widen(x, true)}, coords);
    }
    std::vector<Tensor<T>> params;
    std::vector<std::string> names;
    for (auto& p : model.params().params()) {
      if (p.name.rfind("critic.", 0) == 0 && p.kind == ParamKind::Weight) {
        params.push_back(p.tensor);
        names.push_back(p.name);
      }
    }
    auto xd = x.detach();
    auto xd64 = Suite<T>::widen(xd);
    s.check_pair("critic_double_backward",
                 [&critic, xd](const V&) { return ad::square(critic.input_gradient(xd)); },
                 [&critic64, xd64](const V64&) { return ad::square(critic64.input_gradient(xd64)); }, params,
                 mirror_params(names), coords);
  }

  // Full generator pass on random inputs; every parameter group is probed.
  {
    GeneratorInput<T> in;
    in.proj = s.var({cfg.n_modules, cfg.nv, cfg.nu}, 0.0, 2.0).detach();
    in.img_bp = s.var(vol, 0.0, 2.0).detach();
    in.img_mlem = s.var(vol, 0.5, 2.0).detach();
    const GeneratorInput<double> in64{Suite<T>::widen(in.proj), Suite<T>::widen(in.img_bp),
                                      Suite<T>::widen(in.img_mlem)};
    std::vector<std::string> prefixes = {"pnet.s000.embed.w", "pnet.s007.layer0.attn.q.w",
                                         "pnet.s015.head.out.w", "pnet.s003.cnn0.w",
                                         "inet.cnn1.enc1.w", "inet.cnn1.bottom2.w",
                                         "inet.cnn2.dec0.w", "inet.cnn2.out.w"};
    std::vector<Tensor<T>> params;
    for (const auto& name : prefixes) {
      const auto* p = model.params().find(name);
      if (!p) throw ConfigError("gradient suite: missing parameter " + name);
      params.push_back(p->tensor);
    }
    const auto& m = model;
    const auto& m64 = *mirror;
    s.check_pair("generator",
                 [&m, in](const V&) {
                   const auto o = m.generate(in);
                   return ad::concat<T>({o.final, o.img_p}, 0);
                 },
                 [&m64, in64](const V64&) {
                   const auto o = m64.generate(in64);
                   return ad::concat<double>({o.final, o.img_p}, 0);
                 },
                 params, mirror_params(prefixes), coords);
  }
}

template <typename T>
void run_suite(const std::string& dtype, double step, double model_step, const GradientSuiteOptions& o,
               std::vector<GradientCase>& out) {
  Suite<T> s{std::mt19937_64(o.seed), dtype, {}, &out};
  s.opts.step = step;
  primitive_checks(s);
  s.opts.step = model_step;
  if (o.model) model_checks(s, o.model_coords);
}

}  // namespace

std::vector<GradientCase> gradient_suite(const GradientSuiteOptions& o) {
  std::vector<GradientCase> out;
  // A volume-sized 32-bit forward pass is too noisy for differencing, so the
  // 32-bit model checks difference a 64-bit mirror with the same weights.
  if (o.float32) run_suite<float>("float32", 1e-2, 1e-6, o, out);
  if (o.float64) run_suite<double>("float64", 1e-6, 1e-6, o, out);
  return out;
}

nlohmann::json to_json(const AdjointReport& r) {
  return {{"pairs", r.pairs}, {"max_residual", r.max_residual}, {"residuals", r.residuals}};
}

nlohmann::json to_json(const MonotonicityReport& r) {
  return {{"phantoms", r.phantoms},
          {"iterations", r.iterations},
          {"worst_relative_drop", r.worst_relative_drop},
          {"nonnegative", r.nonnegative},
          {"loglik", r.loglik}};
}

nlohmann::json to_json(const GradientCase& c) {
  return {{"name", c.name}, {"dtype", c.dtype}, {"max_rel_error", c.max_rel_error}, {"coords", c.coords}};
}

}  // namespace tipnet
