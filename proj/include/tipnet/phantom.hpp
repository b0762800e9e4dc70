#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/geometry.hpp"
#include "tipnet/mlem.hpp"
#include "tipnet/volume.hpp"

namespace tipnet {

/// Angular sector of the LV wall with reduced uptake. Angles are measured
/// about the long axis; axial fractions run from apex (0) to base (1).
struct DefectSpec {
  double angle_start_deg = 0.0;
  double angle_extent_deg = 90.0;
  double axial_start = 0.0;
  double axial_end = 1.0;
  double severity = 1.0;  ///< 0 keeps myocardial uptake, 1 drops it to background
};

/// Left ventricle as a truncated ellipsoidal shell inside an elliptical
/// cylinder of background activity.
struct PhantomSpec {
  Vec3 lv_center;
  double long_semi_axis_mm = 44.0;
  double short_semi_axis_mm = 28.0;
  double wall_thickness_mm = 10.0;
  /// Direction of the apex from the LV center.
  double axis_azimuth_deg = 0.0;
  double axis_elevation_deg = 0.0;
  /// The shell keeps points with long-axis coordinate >= -base_fraction * a.
  double base_fraction = 0.2;
  double myocardium_uptake = 4.0;
  double blood_pool_uptake = 1.0;
  double background_uptake = 0.4;
  std::array<double, 2> body_semi_axes_mm{66.0, 54.0};
  std::optional<DefectSpec> defect;

  void validate() const;
};

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

/// Random LV shape, pose and uptakes around the grid center.
PhantomSpec random_phantom_spec(std::mt19937_64& rng, const GridSpec& grid, bool with_defect);

struct Phantom {
  VolumeGrid activity;
  LabeledMasks masks;
};

/// Voxels are classified by their centers. Defect voxels take
/// background + (myocardium - background) * (1 - severity).
/// Throws DataError if the shell leaves the grid.
Phantom generate_phantom(const PhantomSpec& spec, const GridSpec& grid);

struct AcquisitionSpec {
  double counts_per_angle = 5e5;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Expected counts S x scaled so the first angular block sums to
/// counts_per_angle (the same factor is applied to every block), followed by
/// independent Poisson draws. A zero volume yields zero counts; a nonzero
/// volume with a zero projection raises DataError.
ProjectionSet simulate_acquisition(const VolumeGrid& x_true, const SystemMatrix& s,
                                   const AcquisitionSpec& acq);
ProjectionSet simulate_acquisition(const VolumeGrid& x_true, const ScannerGeometry& geometry,
                                   const AngleSet& angles, const AcquisitionSpec& acq);

/// Everything one subject contributes to training and evaluation.
struct Sample {
  std::string id;
  bool has_defect = false;
  PhantomSpec spec;
  VolumeGrid truth;
  LabeledMasks masks;
  ProjectionSet proj_one;   ///< stationary acquisition
  ProjectionSet proj_four;  ///< four angular positions (first equals proj_one)
  VolumeGrid img_mlem;      ///< one-angle MLEM
  VolumeGrid img_bp;        ///< back projection of proj_one
  VolumeGrid img_four;      ///< four-angle MLEM reference
};

struct DatasetConfig {
  int n_subjects = 64;
  Scale scale = Scale::Desk;
  double counts_per_angle = 5e5;
  MLEMConfig mlem;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const DatasetConfig& c);

/// Operators shared by every subject of a dataset.
struct DatasetOperators {
  ScaleSetup setup;
  SystemMatrix s_one;
  SystemMatrix s_four;
};

DatasetOperators build_dataset_operators(Scale scale);

/// Odd-numbered subjects carry a defect, so exactly half do for even n.
std::vector<Sample> generate_samples(const DatasetConfig& config,
                                     const DatasetOperators& ops);
Sample generate_sample(const DatasetConfig& config, const DatasetOperators& ops, int index);

/// Writes one directory per subject plus `manifest.json`; returns the
/// manifest. Regeneration with the same config is byte-identical.
nlohmann::json make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir);
void write_sample(const Sample& sample, const std::filesystem::path& dir);
/// Reads a dataset directory (or its manifest path).
std::vector<Sample> load_dataset(const std::filesystem::path& path);

}  // namespace tipnet
