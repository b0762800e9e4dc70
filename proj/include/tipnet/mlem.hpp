#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "tipnet/geometry.hpp"
#include "tipnet/volume.hpp"

namespace tipnet {

struct MLEMConfig {
  int n_iters = 50;
  /// Denominator stabilizer. When unset, 1e-8 * max(y) is used.
  std::optional<double> epsilon;
  double initial_value = 1.0;

  void validate() const;
};

/// Called after every iteration with the 1-based iteration number and the
/// current estimate (double precision, before conversion to float).
using MLEMObserver = std::function<void(int iteration, std::span<const double> estimate)>;

/// Multiplicative EM update
///   x_j <- x_j / s_j * sum_i a_ij y_i / (sum_k a_ik x_k + eps),  s_j = sum_i a_ij.
/// Voxels with zero sensitivity are held at 0. Throws ReconstructionError if
/// every voxel has zero sensitivity.
VolumeGrid mlem_reconstruct(const SystemMatrix& s, const ProjectionSet& y,
                            const MLEMConfig& config, const MLEMObserver& observer = {});

/// Raw-array variant used by tests and the scalar closed-form check.
std::vector<double> mlem_iterate(const SystemMatrix& s, std::span<const double> y,
                                 const MLEMConfig& config, const MLEMObserver& observer = {});

/// Epsilon actually used for a projection vector under `config`.
double mlem_epsilon(const MLEMConfig& config, std::span<const double> y);

/// sum_i [ y_i ln(yhat_i + eps) - yhat_i ] with yhat = S x.
double poisson_loglik(const SystemMatrix& s, std::span<const double> x,
                      std::span<const double> y, double epsilon);
double poisson_loglik(const SystemMatrix& s, const VolumeGrid& x, const ProjectionSet& y,
                      double epsilon);

}  // namespace tipnet
