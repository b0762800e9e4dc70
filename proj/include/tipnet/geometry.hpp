#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tipnet/volume.hpp"

namespace tipnet {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) { return (1.0 / norm(a)) * a; }

/// Pinhole camera: an ideal point aperture in front of a flat pixelated
/// detector. Bin (iu, iv) is centered at
/// detector_center + (iu - (nu-1)/2) * pitch * u_axis + (iv - (nv-1)/2) * pitch * v_axis.
struct DetectorModule {
  Vec3 aperture;
  Vec3 detector_center;
  Vec3 normal;  ///< unit vector from the detector toward the aperture
  Vec3 u_axis;
  Vec3 v_axis;
  int nu = 1;
  int nv = 1;
  double pitch = 1.0;

  Vec3 bin_point(double u, double v) const;
};

struct ScannerGeometry {
  std::vector<DetectorModule> modules;
  Vec3 fov_center;
  double fov_radius = 0.0;
  /// Sub-rays per bin along each detector axis (samples per bin = n^2).
  int rays_per_bin_axis = 1;

  int n_modules() const { return static_cast<int>(modules.size()); }
  int nu() const { return modules.empty() ? 0 : modules.front().nu; }
  int nv() const { return modules.empty() ? 0 : modules.front().nv; }
};

/// One ring of modules at a fixed elevation, spread evenly over the arc.
struct ModuleRow {
  int count = 1;
  double elevation_deg = 0.0;
};

/// Defaults describe the full-size scanner (19 modules of 32 x 32 bins).
struct GeometryConfig {
  int n_modules = 19;
  /// Rows must sum to n_modules; empty means a single row at elevation 0.
  std::vector<ModuleRow> rows{{5, 25.0}, {9, 0.0}, {5, -25.0}};
  double arc_span_deg = 180.0;
  double arc_center_deg = 0.0;
  double focal_distance_mm = 320.0;     ///< aperture to FOV center
  double detector_distance_mm = 63.0;   ///< aperture to detector plane
  int nu = 32;
  int nv = 32;
  double pitch_mm = 2.46;
  Vec3 fov_center;
  double fov_radius_mm = 140.0;
  /// Sub-rays per bin along each detector axis (samples per bin = n^2).
  int rays_per_bin_axis = 3;

  /// Reduced CPU-friendly scanner: same module layout, 16 x 16 bins.
  static GeometryConfig desk();
  static GeometryConfig paper() { return {}; }

  void validate() const;
};

/// Rigid motion applied to the whole module set for one angular position:
/// rotation about the z axis through the (displaced) FOV center, then the
/// displacement.
struct AngleEntry {
  std::string id;
  double rotation_deg = 0.0;
  Vec3 fov_displacement;
};

using AngleSet = std::vector<AngleEntry>;

/// Stationary acquisition: a single identity entry.
AngleSet stationary_angle_set();
/// Four positions interleaving the middle-row module spacing.
AngleSet four_angle_set(double step_deg);

/// Grid, scanner and angular sampling for one working scale.
enum class Scale { Desk, Paper };

struct ScaleSetup {
  GeometryConfig geometry;
  GridSpec grid;
  /// Rotation between successive positions of the four-angle set.
  double four_angle_step_deg = 5.625;
};

/// Desk: 24 x 24 x 16 grid of 6 mm voxels, 16 x 16 bins.
/// Paper: 70 x 70 x 50 grid of 4 mm voxels, 32 x 32 bins.
ScaleSetup scale_setup(Scale scale);
Scale parse_scale(const std::string& name);
const char* to_string(Scale scale);

ScannerGeometry build_geometry(const GeometryConfig& config);
ScannerGeometry apply_angle(const ScannerGeometry& geometry, const AngleEntry& entry);

/// Sparse nonnegative operator from voxels to detector bins, compressed by
/// row. Rows are ordered angle-major, then module, then v, then u.
class SystemMatrix {
 public:
  SystemMatrix() = default;
  SystemMatrix(std::int64_t n_rows, std::int64_t n_cols, std::vector<std::int64_t> row_ptr,
               std::vector<std::int32_t> cols, std::vector<double> weights);

  std::int64_t rows() const { return n_rows_; }
  std::int64_t cols() const { return n_cols_; }
  std::size_t nnz() const { return weights_.size(); }

  std::span<const std::int64_t> row_ptr() const { return row_ptr_; }
  std::span<const std::int32_t> col_indices() const { return cols_; }
  std::span<const double> weights() const { return weights_; }

  /// y = S x.
  void multiply(std::span<const double> x, std::span<double> y) const;
  /// x = S^T y.
  void multiply_transpose(std::span<const double> y, std::span<double> x) const;

  /// Column sums S^T 1 (sensitivity image).
  std::vector<double> column_sums() const;
  /// Columns without any nonzero entry.
  std::vector<std::int64_t> dead_columns() const;

  /// Entry lookup (linear in the row length); mainly for tests.
  double at(std::int64_t row, std::int64_t col) const;

  // Layout metadata carried for projection containers.
  int n_modules = 0;
  int nu = 0;
  int nv = 0;
  std::vector<std::string> angle_ids;
  GridSpec grid;

 private:
  std::int64_t n_rows_ = 0;
  std::int64_t n_cols_ = 0;
  std::vector<std::int64_t> row_ptr_{0};
  std::vector<std::int32_t> cols_;
  std::vector<double> weights_;
};

/// Ray-driven pinhole model: every bin casts rays_per_bin_axis^2 sub-rays
/// from points on the bin through the aperture, traversed voxel by voxel.
/// Entry weight = intersection length * (f / r)^2 / n_subrays, where r is the
/// aperture distance of the segment midpoint and f the aperture distance of
/// the FOV center.
/// Throws GeometryError if an aperture lies inside the voxel grid.
SystemMatrix build_system_matrix(const ScannerGeometry& geometry, const AngleSet& angles,
                                 const GridSpec& grid);

/// Stack matrices with identical column spaces into one joint operator.
SystemMatrix stack_rows(std::span<const SystemMatrix> blocks);

ProjectionSet forward_project(const SystemMatrix& s, const VolumeGrid& x);
VolumeGrid back_project(const SystemMatrix& s, const ProjectionSet& y);

/// Optional binary cache: JSON header line + little-endian CSR arrays.
void write_system_matrix(const std::filesystem::path& path, const SystemMatrix& s);
SystemMatrix read_system_matrix(const std::filesystem::path& path);

}  // namespace tipnet
