#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>

#include "doctest.h"
#include "tipnet/autodiff.hpp"
#include "tipnet/error.hpp"

using namespace tipnet;
using namespace tipnet::ad;

namespace {

template <typename T = double>
Tensor<T> rand_var(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::variable(std::move(shape), std::move(v));
}

/// Magnitudes in [lo, hi] with random sign.
Tensor<double> signed_var(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  auto t = rand_var(rng, std::move(shape), lo, hi);
  std::bernoulli_distribution coin(0.5);
  for (auto& x : t.mutable_values()) x = coin(rng) ? x : -x;
  return t;
}

/// Weighted sum with fixed random weights so every output coordinate matters.
ScalarFn<double> weighted(std::function<Tensor<double>(const std::vector<Tensor<double>>&)> op,
                          std::mt19937_64& rng) {
  auto weights = std::make_shared<std::vector<double>>();
  auto seed = rng();
  return [op, weights, seed](const std::vector<Tensor<double>>& in) {
    auto out = op(in);
    if (weights->size() != out.size()) {
      std::mt19937_64 r(seed);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      weights->resize(out.size());
      for (auto& w : *weights) w = u(r);
    }
    return sum(mul(out, Tensor<double>::constant(out.shape(), *weights)));
  };
}

double check(const ScalarFn<double>& f, std::vector<Tensor<double>> inputs) {
  GradCheckOptions o;
  o.step = 1e-6;
  return grad_check(f, std::move(inputs), o).max_rel_error;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(1);
  auto x = rand_var<float>(rng, {7, 13}, -20.0, 20.0);
  auto s = softmax(x);
  for (int r = 0; r < 7; ++r) {
    double acc = 0.0;
    for (int c = 0; c < 13; ++c) acc += s.values()[r * 13 + c];
    CHECK(std::abs(acc - 1.0) <= 1e-6);
  }
}

TEST_CASE("conv2d of ones with a ones kernel") {
  auto x = Tensor<double>::constant({1, 5, 5}, 1.0);
  auto w = Tensor<double>::constant({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, Tensor<double>{}, 1);
  REQUIRE(y.shape() == Shape{1, 5, 5});
  CHECK(y.values()[2 * 5 + 2] == 9.0);
  CHECK(y.values()[0] == 4.0);       // corner sees a 2 x 2 window
  CHECK(y.values()[2] == 6.0);       // edge sees a 2 x 3 window
}

TEST_CASE("conv3d matches a direct sum") {
  std::mt19937_64 rng(4);
  auto x = rand_var(rng, {2, 4, 5, 3});
  auto w = rand_var(rng, {3, 2, 3, 3, 3});
  auto b = rand_var(rng, {3});
  for (int stride : {1, 2}) {
    auto y = conv3d(x, w, b, stride, 1);
    const int D = 4, H = 5, W = 3;
    const int Do = (D + 2 - 3) / stride + 1, Ho = (H + 2 - 3) / stride + 1, Wo = (W + 2 - 3) / stride + 1;
    REQUIRE(y.shape() == Shape{3, Do, Ho, Wo});
    for (int o = 0; o < 3; ++o)
      for (int d = 0; d < Do; ++d)
        for (int h = 0; h < Ho; ++h)
          for (int ww = 0; ww < Wo; ++ww) {
            double acc = b.values()[o];
            for (int c = 0; c < 2; ++c)
              for (int kd = 0; kd < 3; ++kd)
                for (int kh = 0; kh < 3; ++kh)
                  for (int kw = 0; kw < 3; ++kw) {
                    const int zd = d * stride + kd - 1, zh = h * stride + kh - 1, zw = ww * stride + kw - 1;
                    if (zd < 0 || zd >= D || zh < 0 || zh >= H || zw < 0 || zw >= W) continue;
                    acc += x.values()[((c * D + zd) * H + zh) * W + zw] *
                           w.values()[(((o * 2 + c) * 3 + kd) * 3 + kh) * 3 + kw];
                  }
            CHECK(y.values()[((o * Do + d) * Ho + h) * Wo + ww] == doctest::Approx(acc).epsilon(1e-12));
          }
  }
}

TEST_CASE("bilinear resize of a constant image is constant") {
  auto x = Tensor<float>::constant({2, 5, 7}, 3.25f);
  for (auto [h, w] : {std::pair{9, 3}, std::pair{5, 7}, std::pair{1, 1}, std::pair{16, 16}}) {
    auto y = interpolate2d(x, h, w);
    REQUIRE(y.shape() == Shape{2, h, w});
    for (float v : y.values()) CHECK(v == doctest::Approx(3.25f).epsilon(1e-6));
  }
}

TEST_CASE("gradient of sum is all ones") {
  std::mt19937_64 rng(2);
  auto x = rand_var(rng, {3, 4});
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("gradient of elementwise product") {
  std::mt19937_64 rng(3);
  auto x = rand_var(rng, {10});
  auto y = rand_var(rng, {10});
  sum(mul(x, y)).backward();
  for (int i = 0; i < 10; ++i) {
    CHECK(x.grad()[i] == y.values()[i]);
    CHECK(y.grad()[i] == x.values()[i]);
  }
}

TEST_CASE("shared subgraph accumulates gradients") {
  std::mt19937_64 rng(6);
  auto x = rand_var(rng, {6});
  // x feeds two branches that rejoin.
  auto h = mul_scalar(x, 2.0);
  sum(add(mul(h, h), sqrt(add_scalar(square(h), 1.0)))).backward();
  std::vector<double> shared(x.grad().begin(), x.grad().end());

  // Same function with the shared node duplicated as three separate inputs.
  auto copy = [&] { return Tensor<double>::variable({6}, std::vector<double>(x.values().begin(), x.values().end())); };
  auto a = copy(), b = copy(), c = copy();
  auto ha = mul_scalar(a, 2.0), hb = mul_scalar(b, 2.0), hc = mul_scalar(c, 2.0);
  sum(add(mul(ha, hb), sqrt(add_scalar(square(hc), 1.0)))).backward();
  for (int i = 0; i < 6; ++i) {
    CHECK(shared[i] == doctest::Approx(a.grad()[i] + b.grad()[i] + c.grad()[i]).epsilon(1e-12));
    // Closed form: 8x + 4x / sqrt(4x^2 + 1).
    const double xi = x.values()[i];
    CHECK(shared[i] == doctest::Approx(8.0 * xi + 4.0 * xi / std::sqrt(4.0 * xi * xi + 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("detached and no-grad values do not propagate") {
  std::mt19937_64 rng(7);
  auto x = rand_var(rng, {4});
  auto y = add(mul(x, x.detach()), x);
  sum(y).backward();
  for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(x.values()[i] + 1.0));
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    auto z = mul(x, x);
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("grad_check is exact for linear functions") {
  std::mt19937_64 rng(9);
  auto x = rand_var(rng, {5, 4});
  auto w = Tensor<double>::constant({5, 4}, 0.0);
  for (auto& v : w.mutable_values()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
  ScalarFn<double> f = [w](const std::vector<Tensor<double>>& in) { return sum(mul(in[0], w)); };
  CHECK(check(f, {x}) <= 1e-10);
}

TEST_CASE("grad_check on relu away from the kink") {
  std::mt19937_64 rng(10);
  auto x = signed_var(rng, {40}, 0.01, 2.0);
  ScalarFn<double> f = [](const std::vector<Tensor<double>>& in) { return sum(square(relu(in[0]))); };
  CHECK(check(f, {x}) <= 1e-6);
}

TEST_CASE("three-layer composition matches finite differences") {
  std::mt19937_64 rng(11);
  auto x = rand_var(rng, {4, 6});
  auto w1 = rand_var(rng, {6, 8});
  auto w2 = rand_var(rng, {8, 5});
  auto w3 = rand_var(rng, {5, 1});
  ScalarFn<double> f = [](const std::vector<Tensor<double>>& in) {
    auto h = leaky_relu(matmul(in[0], in[1]), 0.1);
    h = softmax(matmul(h, in[2]));
    return mean(square(matmul(h, in[3])));
  };
  CHECK(check(f, {x, w1, w2, w3}) <= 1e-6);
}

TEST_CASE("every primitive passes grad_check over 20 random seeds") {
  struct Case {
    std::string name;
    std::function<std::pair<ScalarFn<double>, std::vector<Tensor<double>>>(std::mt19937_64&)> make;
  };
  auto dims = [](std::mt19937_64& r, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(r); };
  using Ins = std::vector<Tensor<double>>;
  std::vector<Case> cases = {
      {"add_sub_mul_div",
       [&](auto& r) {
         Shape s{dims(r, 1, 4), dims(r, 1, 5)};
         Ins in{rand_var(r, s), rand_var(r, s), signed_var(r, s, 0.5, 2.0)};
         return std::pair{weighted([](const Ins& i) { return div(sub(mul(i[0], i[1]), i[1]), i[2]); }, r), in};
       }},
      {"scalar_ops",
       [&](auto& r) {
         Ins in{rand_var(r, {dims(r, 1, 9)})};
         return std::pair{weighted([](const Ins& i) { return add_scalar(mul_scalar(i[0], -1.7), 0.3); }, r), in};
       }},
      {"add_rowvec",
       [&](auto& r) {
         const int n = dims(r, 1, 6);
         Ins in{rand_var(r, {dims(r, 1, 4), n}), rand_var(r, {n})};
         return std::pair{weighted([](const Ins& i) { return add_rowvec(i[0], i[1]); }, r), in};
       }},
      {"matmul",
       [&](auto& r) {
         const int m = dims(r, 1, 5), k = dims(r, 1, 5), n = dims(r, 1, 5);
         const bool ta = r() % 2, tb = r() % 2;
         Ins in{rand_var(r, ta ? Shape{k, m} : Shape{m, k}), rand_var(r, tb ? Shape{n, k} : Shape{k, n})};
         return std::pair{weighted([ta, tb](const Ins& i) { return matmul(i[0], i[1], ta, tb); }, r), in};
       }},
      {"relu_leaky_abs",
       [&](auto& r) {
         Ins in{signed_var(r, {dims(r, 2, 12)}, 0.05, 1.5)};
         return std::pair{weighted([](const Ins& i) { return add(add(relu(i[0]), leaky_relu(i[0], 0.2)), abs(i[0])); }, r), in};
       }},
      {"sqrt_square",
       [&](auto& r) {
         Ins in{rand_var(r, {dims(r, 1, 8)}, 0.2, 3.0)};
         return std::pair{weighted([](const Ins& i) { return add(sqrt(i[0]), square(i[0])); }, r), in};
       }},
      {"softmax",
       [&](auto& r) {
         Ins in{rand_var(r, {dims(r, 1, 4), dims(r, 2, 7)}, -2.0, 2.0)};
         return std::pair{weighted([](const Ins& i) { return softmax(i[0]); }, r), in};
       }},
      {"layer_norm",
       [&](auto& r) {
         const int n = dims(r, 2, 7);
         Ins in{rand_var(r, {dims(r, 1, 4), n}), rand_var(r, {n}), rand_var(r, {n})};
         return std::pair{weighted([](const Ins& i) { return layer_norm(i[0], i[1], i[2]); }, r), in};
       }},
      {"sum_mean",
       [&](auto& r) {
         Ins in{rand_var(r, {dims(r, 1, 5), dims(r, 1, 5)})};
         return std::pair{weighted([](const Ins& i) { return add(mul_scalar(sum(i[0]), 0.5), mean(square(i[0]))); }, r), in};
       }},
      {"concat_narrow_reshape",
       [&](auto& r) {
         const int a = dims(r, 1, 3), b = dims(r, 1, 3), n = dims(r, 2, 4);
         Ins in{rand_var(r, {a, n}), rand_var(r, {b, n})};
         return std::pair{weighted([a, b, n](const Ins& i) {
           auto c = concat(std::vector<Tensor<double>>{i[0], i[1]}, 0);
           return reshape(narrow(c, 1, 1, n - 1), Shape{(a + b) * (n - 1)});
         }, r), in};
       }},
      {"gather",
       [&](auto& r) {
         const int n = dims(r, 2, 8);
         auto idx = std::make_shared<std::vector<std::int32_t>>();
         for (int k = 0; k < 2 * n; ++k) idx->push_back(static_cast<std::int32_t>(r() % n));
         Ins in{rand_var(r, {n})};
         return std::pair{weighted([idx, n](const Ins& i) { return gather(i[0], idx, Shape{2 * n}); }, r), in};
       }},
      {"conv2d",
       [&](auto& r) {
         const int c = dims(r, 1, 2), o = dims(r, 1, 2);
         Ins in{rand_var(r, {c, dims(r, 2, 5), dims(r, 2, 5)}), rand_var(r, {o, c, 3, 3}), rand_var(r, {o})};
         return std::pair{weighted([](const Ins& i) { return conv2d(i[0], i[1], i[2], 1); }, r), in};
       }},
      {"conv3d",
       [&](auto& r) {
         const int c = dims(r, 1, 2), o = dims(r, 1, 2), stride = dims(r, 1, 2);
         Ins in{rand_var(r, {c, dims(r, 2, 4), dims(r, 2, 4), dims(r, 2, 4)}), rand_var(r, {o, c, 3, 3, 3}),
                rand_var(r, {o})};
         return std::pair{weighted([stride](const Ins& i) { return conv3d(i[0], i[1], i[2], stride, 1); }, r), in};
       }},
      {"conv3d_input_grad",
       [&](auto& r) {
         const int c = dims(r, 1, 2), o = dims(r, 1, 2), stride = dims(r, 1, 2);
         const Shape xs{c, dims(r, 2, 4), dims(r, 2, 4), dims(r, 2, 4)};
         auto probe = conv3d(Tensor<double>::constant(xs, 0.0), Tensor<double>::constant({o, c, 3, 3, 3}, 0.0),
                             Tensor<double>{}, stride, 1);
         Ins in{rand_var(r, probe.shape()), rand_var(r, {o, c, 3, 3, 3})};
         return std::pair{weighted([stride, xs](const Ins& i) { return conv3d_input_grad(i[0], i[1], stride, 1, xs); }, r), in};
       }},
      {"interpolate2d",
       [&](auto& r) {
         const int oh = dims(r, 1, 6), ow = dims(r, 1, 6);
         Ins in{rand_var(r, {dims(r, 1, 2), dims(r, 2, 5), dims(r, 2, 5)})};
         return std::pair{weighted([oh, ow](const Ins& i) { return interpolate2d(i[0], oh, ow); }, r), in};
       }},
      {"upsample_nearest3d",
       [&](auto& r) {
         const int d = dims(r, 1, 3), h = dims(r, 1, 3), w = dims(r, 1, 3);
         Ins in{rand_var(r, {dims(r, 1, 2), d, h, w})};
         return std::pair{weighted([d, h, w](const Ins& i) { return upsample_nearest3d(i[0], 2 * d, 2 * h + 1, 2 * w); }, r), in};
       }},
      {"axis_filter",
       [&](auto& r) {
         const int n = dims(r, 2, 5), axis = dims(r, 0, 2);
         Shape s{dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)};
         s[axis] = n;
         auto m = std::make_shared<std::vector<double>>(n * n);
         for (auto& v : *m) v = std::uniform_real_distribution<double>(-1, 1)(r);
         Ins in{rand_var(r, s)};
         std::shared_ptr<const std::vector<double>> mc = m;
         return std::pair{weighted([axis, mc](const Ins& i) { return axis_filter(i[0], axis, mc); }, r), in};
       }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      auto [f, inputs] = c.make(rng);
      worst = std::max(worst, check(f, inputs));
    }
    INFO(c.name);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("shape mismatches are rejected") {
  auto a = Tensor<double>::constant({2, 3}, 1.0);
  auto b = Tensor<double>::constant({3, 2}, 1.0);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeError);
}

}  // TEST_SUITE
