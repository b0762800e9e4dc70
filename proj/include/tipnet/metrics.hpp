#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/volume.hpp"

namespace tipnet {

struct SSIMOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Row-major n x n matrix applying a 1-D Gaussian window of `window` taps
/// along one axis. Taps falling outside [0, n) are dropped and each row is
/// renormalized to sum to 1.
std::vector<double> gaussian_filter_matrix(int n, int window, double sigma);

/// Mean of the local SSIM map under a separable 3-D Gaussian window with
/// C1 = (k1 peak)^2, C2 = (k2 peak)^2. Symmetric in x and y.
double ssim(const VolumeGrid& x, const VolumeGrid& y, double peak,
            const SSIMOptions& options = {});
/// SSIM with peak = max(reference).
double ssim_to_reference(const VolumeGrid& x, const VolumeGrid& reference,
                         const SSIMOptions& options = {});

double rmse(const VolumeGrid& x, const VolumeGrid& y);
/// 20 log10(peak) - 20 log10(rmse); +infinity when the volumes are identical.
double psnr(const VolumeGrid& x, const VolumeGrid& y, double peak);

/// mean(x | myocardium) / max(mean(x | blood pool), 1e-8).
double mbp_ratio(const VolumeGrid& x, const LabeledMasks& masks);

/// Threshold surrogate for perfusion defect extent: myocardial values are
/// divided by the mean of their top decile and the percentage below 0.5 is
/// returned.
double defect_size(const VolumeGrid& x, const std::vector<std::uint8_t>& myocardium);

/// Width at half of (max - min) above the profile minimum, with linear
/// interpolation on both flanks. Throws DataError for a flat profile.
double fwhm(std::span<const double> profile, double spacing_mm);

struct SubjectMetrics {
  std::string subject;
  bool has_defect = false;
  double ssim = 0.0;
  double rmse = 0.0;
  double psnr = 0.0;
  double mbp = 0.0;
  double defect_size = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation (0 for a single entry)
  std::size_t n = 0;
};

Aggregate aggregate(std::span<const double> values);

struct MethodMetrics {
  std::string method;
  std::vector<SubjectMetrics> subjects;

  Aggregate summary(double SubjectMetrics::*field, bool defect_only = false) const;
};

/// Per-subject and aggregate metrics for several methods against a common
/// reference.
struct MetricReport {
  std::string reference;
  std::vector<MethodMetrics> methods;

  const MethodMetrics* find(const std::string& method) const;
  nlohmann::json to_json() const;
  /// One row per method: mean and std of every metric.
  std::string to_csv() const;
};

/// Computes every per-subject metric of `x` against `reference` (peak taken
/// from the reference).
SubjectMetrics evaluate_subject(const std::string& subject, const VolumeGrid& x,
                                const VolumeGrid& reference, const LabeledMasks& masks);

}  // namespace tipnet
