#include "tipnet/mlem.hpp"

#include <algorithm>
#include <cmath>

#include "tipnet/error.hpp"

namespace tipnet {

void MLEMConfig::validate() const {
  if (n_iters < 1) throw ConfigError("mlem: n_iters must be >= 1");
  if (epsilon && !(*epsilon >= 0.0)) throw ConfigError("mlem: epsilon must be >= 0");
  if (!(initial_value > 0.0)) throw ConfigError("mlem: initial_value must be positive");
}

double mlem_epsilon(const MLEMConfig& config, std::span<const double> y) {
  if (config.epsilon) return *config.epsilon;
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, v);
  return 1e-8 * peak;
}

std::vector<double> mlem_iterate(const SystemMatrix& s, std::span<const double> y,
                                 const MLEMConfig& config, const MLEMObserver& observer) {
  config.validate();
  if (static_cast<std::int64_t>(y.size()) != s.rows()) {
    throw ShapeError("mlem: projection length " + std::to_string(y.size()) +
                     " does not match matrix rows " + std::to_string(s.rows()));
  }
  for (double v : y) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ReconstructionError("mlem: projections must be finite and nonnegative");
    }
  }
  const double eps = mlem_epsilon(config, y);
  const std::vector<double> sensitivity = s.column_sums();
  if (std::none_of(sensitivity.begin(), sensitivity.end(), [](double v) { return v > 0.0; })) {
    throw ReconstructionError("mlem: sensitivity image is identically zero");
  }

  const auto n_cols = static_cast<std::size_t>(s.cols());
  std::vector<double> x(n_cols);
  for (std::size_t j = 0; j < n_cols; ++j) {
    x[j] = sensitivity[j] > 0.0 ? config.initial_value : 0.0;
  }
  std::vector<double> estimate(static_cast<std::size_t>(s.rows()));
  std::vector<double> correction(n_cols);

  for (int it = 1; it <= config.n_iters; ++it) {
    s.multiply(x, estimate);
    for (std::size_t i = 0; i < estimate.size(); ++i) {
      const double denom = estimate[i] + eps;
      estimate[i] = denom > 0.0 ? y[i] / denom : 0.0;
    }
    s.multiply_transpose(estimate, correction);
    for (std::size_t j = 0; j < n_cols; ++j) {
      x[j] = sensitivity[j] > 0.0 ? x[j] / sensitivity[j] * correction[j] : 0.0;
    }
    if (observer) observer(it, x);
  }
  return x;
}

VolumeGrid mlem_reconstruct(const SystemMatrix& s, const ProjectionSet& y,
                            const MLEMConfig& config, const MLEMObserver& observer) {
  if (static_cast<std::int64_t>(y.size()) != s.rows()) {
    throw ShapeError("mlem: projection set does not match the system matrix");
  }
  std::vector<double> yd(y.values().begin(), y.values().end());
  const auto x = mlem_iterate(s, yd, config, observer);
  std::vector<float> xf(x.begin(), x.end());
  return VolumeGrid(s.grid, std::move(xf));
}

double poisson_loglik(const SystemMatrix& s, std::span<const double> x,
                      std::span<const double> y, double epsilon) {
  if (static_cast<std::int64_t>(x.size()) != s.cols() ||
      static_cast<std::int64_t>(y.size()) != s.rows()) {
    throw ShapeError("poisson_loglik: dimension mismatch");
  }
  std::vector<double> yhat(y.size());
  s.multiply(x, yhat);
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double mean = yhat[i] + epsilon;
    if (y[i] > 0.0) total += y[i] * std::log(mean);
    total -= yhat[i];
  }
  return total;
}

double poisson_loglik(const SystemMatrix& s, const VolumeGrid& x, const ProjectionSet& y,
                      double epsilon) {
  std::vector<double> xd(x.values().begin(), x.values().end());
  std::vector<double> yd(y.values().begin(), y.values().end());
  return poisson_loglik(s, xd, yd, epsilon);
}

}  // namespace tipnet
