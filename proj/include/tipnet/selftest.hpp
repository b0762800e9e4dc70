#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/geometry.hpp"
#include "tipnet/phantom.hpp"

namespace tipnet {

struct AdjointReport {
  int pairs = 0;
  /// max |<Sx, y> - <x, S^T y>| / max(|<Sx, y>|, |<x, S^T y>|)
  double max_residual = 0.0;
  std::vector<double> residuals;
};

/// Random nonnegative (x, y) pairs against `s`.
AdjointReport adjoint_suite(const SystemMatrix& s, int pairs, std::uint64_t seed);

struct MonotonicityReport {
  int phantoms = 0;
  int iterations = 0;
  /// Largest (L_k - L_{k+1}) / |L_k| over all phantoms and iterations;
  /// negative when every step increased the likelihood.
  double worst_relative_drop = 0.0;
  bool nonnegative = true;
  /// Log-likelihood after each iteration, one row per phantom.
  std::vector<std::vector<double>> loglik;
};

/// Noisy one-angle acquisitions of random phantoms reconstructed with the
/// operators' stationary system matrix.
MonotonicityReport mlem_monotonicity(const DatasetOperators& ops, int phantoms, int iterations,
                                     double counts_per_angle, std::uint64_t seed);

struct GradientCase {
  std::string name;
  std::string dtype;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
};

struct GradientSuiteOptions {
  bool float32 = true;
  bool float64 = true;
  /// Adds the desk-scale generator and critic checks.
  bool model = true;
  /// Coordinates probed per input of the model checks.
  std::size_t model_coords = 6;
  std::uint64_t seed = 7;
};

/// Central-difference checks of every autodiff primitive, the critic input
/// gradient and its parameter derivative, the composite loss and the full
/// generator pass.
std::vector<GradientCase> gradient_suite(const GradientSuiteOptions& options = {});

/// Relative-error ceiling per dtype: 1e-3 for float32, 1e-5 for float64.
double gradient_tolerance(const std::string& dtype);

nlohmann::json to_json(const AdjointReport& r);
nlohmann::json to_json(const MonotonicityReport& r);
nlohmann::json to_json(const GradientCase& c);

}  // namespace tipnet
