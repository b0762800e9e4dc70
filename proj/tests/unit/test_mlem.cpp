#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tipnet/error.hpp"
#include "tipnet/mlem.hpp"
#include "tipnet/phantom.hpp"
#include "tipnet/selftest.hpp"

using namespace tipnet;

namespace {

SystemMatrix dense_matrix(int rows, int cols, const std::vector<double>& w) {
  std::vector<std::int64_t> ptr{0};
  std::vector<std::int32_t> idx;
  std::vector<double> vals;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (w[r * cols + c] != 0.0) {
        idx.push_back(c);
        vals.push_back(w[r * cols + c]);
      }
    }
    ptr.push_back(static_cast<std::int64_t>(idx.size()));
  }
  return SystemMatrix(rows, cols, ptr, idx, vals);
}

const DatasetOperators& desk_ops() {
  static const DatasetOperators ops = build_dataset_operators(Scale::Desk);
  return ops;
}

double nrmse(std::span<const double> x, std::span<const double> ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - ref[i]) * (x[i] - ref[i]);
    den += ref[i] * ref[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_SUITE("mlem") {

TEST_CASE("scalar system converges in one iteration") {
  MLEMConfig cfg;
  cfg.n_iters = 1;
  cfg.epsilon = 0.0;
  for (double a : {0.3, 1.0, 2.5, 17.0}) {
    for (double y : {0.0, 1.0, 7.0, 1234.5}) {
      for (double x0 : {1.0, 0.01, 42.0}) {
        cfg.initial_value = x0;
        const auto s = dense_matrix(1, 1, {a});
        const std::vector<double> yy{y};
        const auto x = mlem_iterate(s, yy, cfg);
        CHECK(std::abs(x[0] - y / a) <= 1e-12 * std::max(1.0, y / a));
      }
    }
  }
}

TEST_CASE("zero data gives a zero estimate after one iteration") {
  MLEMConfig cfg;
  cfg.n_iters = 1;
  const auto& ops = desk_ops();
  const ProjectionSet y(19, 16, 16, {"a0"});
  const auto x = mlem_reconstruct(ops.s_one, y, cfg);
  for (float v : x.values()) CHECK(v == 0.0f);

  // With an explicit epsilon the residue stays at the epsilon scale.
  cfg.epsilon = 1e-6;
  const auto xe = mlem_reconstruct(ops.s_one, y, cfg);
  for (float v : xe.values()) CHECK(v <= 1e-6 * cfg.initial_value);
}

TEST_CASE("noiseless point source NRMSE decreases over 20 iterations") {
  const auto& ops = desk_ops();
  const auto& g = ops.setup.grid;
  std::vector<double> truth(g.voxel_count(), 0.0);
  truth[g.index(12, 12, 8)] = 100.0;
  std::vector<double> y(static_cast<std::size_t>(ops.s_one.rows()));
  ops.s_one.multiply(truth, y);
  MLEMConfig cfg;
  cfg.n_iters = 20;
  std::vector<double> errs;
  mlem_iterate(ops.s_one, y, cfg, [&](int, std::span<const double> x) { errs.push_back(nrmse(x, truth)); });
  REQUIRE(errs.size() == 20);
  for (std::size_t k = 1; k < errs.size(); ++k) CHECK(errs[k] < errs[k - 1]);
}

TEST_CASE("log-likelihood special values") {
  const auto s = dense_matrix(1, 1, {1.0});
  const std::vector<double> zero{0.0};
  CHECK(poisson_loglik(s, zero, zero, 0.0) == 0.0);
  const std::vector<double> x{2.0}, y{3.0};
  CHECK(poisson_loglik(s, x, y, 0.0) == doctest::Approx(3.0 * std::log(2.0) - 2.0).epsilon(1e-14));
  CHECK(poisson_loglik(s, x, y, 0.0) == doctest::Approx(0.0794415).epsilon(1e-5));
}

TEST_CASE("log-likelihood never decreases and estimates stay nonnegative") {
  const auto r = mlem_monotonicity(desk_ops(), 2, 30, 5e5, 21);
  CHECK(r.phantoms == 2);
  CHECK(r.iterations == 30);
  CHECK(r.nonnegative);
  CHECK(r.worst_relative_drop <= 1e-9);
  for (const auto& trace : r.loglik) {
    REQUIRE(trace.size() == 30);
    for (std::size_t k = 1; k < trace.size(); ++k) {
      CHECK(trace[k] >= trace[k - 1] - 1e-9 * std::abs(trace[k - 1]));
    }
  }
}

TEST_CASE("monotone on random dense toy systems") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 3 + trial % 5, cols = 2 + trial % 4;
    std::vector<double> w(rows * cols);
    for (double& v : w) v = u(rng) < 0.3 ? 0.0 : u(rng);
    const auto s = dense_matrix(rows, cols, w);
    std::vector<double> y(rows);
    std::poisson_distribution<int> counts(20.0);
    for (double& v : y) v = counts(rng);
    MLEMConfig cfg;
    cfg.n_iters = 40;
    const double eps = mlem_epsilon(cfg, y);
    double prev = -INFINITY;
    bool ok = true, nonneg = true;
    mlem_iterate(s, y, cfg, [&](int, std::span<const double> x) {
      const double l = poisson_loglik(s, x, y, eps);
      ok = ok && l >= prev - 1e-9 * std::abs(prev);
      prev = l;
      for (double v : x) nonneg = nonneg && v >= 0.0;
    });
    CHECK(ok);
    CHECK(nonneg);
  }
}

TEST_CASE("total expected counts match the data on noiseless full-rank systems") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> w(6 * 4);
  for (double& v : w) v = u(rng);
  const auto s = dense_matrix(6, 4, w);
  const std::vector<double> truth{1.0, 3.0, 0.5, 2.0};
  std::vector<double> y(6);
  s.multiply(truth, y);
  MLEMConfig cfg;
  cfg.n_iters = 500;
  cfg.epsilon = 0.0;
  const auto x = mlem_iterate(s, y, cfg);
  std::vector<double> yhat(6);
  s.multiply(x, yhat);
  const double sum_y = std::accumulate(y.begin(), y.end(), 0.0);
  const double sum_hat = std::accumulate(yhat.begin(), yhat.end(), 0.0);
  CHECK(std::abs(sum_hat - sum_y) <= 1e-9 * sum_y);
}

TEST_CASE("observer sees every iteration") {
  const auto s = dense_matrix(2, 2, {1.0, 0.5, 0.25, 1.0});
  MLEMConfig cfg;
  cfg.n_iters = 7;
  std::vector<int> seen;
  mlem_iterate(s, std::vector<double>{3.0, 4.0}, cfg, [&](int it, std::span<const double>) { seen.push_back(it); });
  CHECK(seen == std::vector<int>{1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("zero-sensitivity voxels stay at zero") {
  // Column 1 has no entries.
  const auto s = dense_matrix(2, 2, {1.0, 0.0, 2.0, 0.0});
  MLEMConfig cfg;
  cfg.n_iters = 3;
  const auto x = mlem_iterate(s, std::vector<double>{1.0, 2.0}, cfg);
  CHECK(x[1] == 0.0);
  CHECK(x[0] > 0.0);
}

TEST_CASE("all-zero sensitivity is a reconstruction error") {
  const auto s = dense_matrix(2, 2, {0.0, 0.0, 0.0, 0.0});
  CHECK_THROWS_AS(mlem_iterate(s, std::vector<double>{1.0, 2.0}, MLEMConfig{}), ReconstructionError);
}

TEST_CASE("invalid configuration is rejected") {
  MLEMConfig cfg;
  cfg.n_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epsilon = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.initial_value = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("default epsilon scales with the peak count") {
  const std::vector<double> y{1.0, 40.0, 3.0};
  CHECK(mlem_epsilon(MLEMConfig{}, y) == doctest::Approx(4e-7));
  MLEMConfig cfg;
  cfg.epsilon = 0.5;
  CHECK(mlem_epsilon(cfg, y) == 0.5);
}

}  // TEST_SUITE
