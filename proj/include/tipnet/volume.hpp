#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tipnet {

/// Regular voxel lattice. Voxel (i, j, k) has its center at
/// center + ((i - (nx-1)/2) * sx, (j - (ny-1)/2) * sy, (k - (nz-1)/2) * sz).
/// Linear index is x-fastest: i + nx * (j + ny * k).
struct GridSpec {
  int nx = 1;
  int ny = 1;
  int nz = 1;
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  std::array<double, 3> center{0.0, 0.0, 0.0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(ny) * k);
  }
  std::array<double, 3> voxel_center(int i, int j, int k) const;
  /// Lower corner of the grid's bounding box in mm.
  std::array<double, 3> lower_corner() const;
  std::array<double, 3> upper_corner() const;

  void validate() const;
  bool same_shape(const GridSpec& other) const {
    return nx == other.nx && ny == other.ny && nz == other.nz;
  }
};

/// Scalar activity image on a GridSpec lattice.
class VolumeGrid {
 public:
  VolumeGrid() = default;
  explicit VolumeGrid(const GridSpec& grid, float fill = 0.0f);
  VolumeGrid(const GridSpec& grid, std::vector<float> values);

  const GridSpec& grid() const { return grid_; }
  int nx() const { return grid_.nx; }
  int ny() const { return grid_.ny; }
  int nz() const { return grid_.nz; }
  std::size_t size() const { return values_.size(); }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  float at(int i, int j, int k) const { return values_[grid_.index(i, j, k)]; }
  float& at(int i, int j, int k) { return values_[grid_.index(i, j, k)]; }

  /// Throws NumericalError on non-finite values, or on negative values when
  /// `nonnegative` is set.
  void validate(bool nonnegative = true) const;

 private:
  GridSpec grid_{};
  std::vector<float> values_;
};

/// Detector readings for one or more angular positions. Layout is
/// u-fastest, then v, then module, then angle, matching system-matrix rows.
class ProjectionSet {
 public:
  ProjectionSet() = default;
  ProjectionSet(int n_modules, int nu, int nv, std::vector<std::string> angle_ids,
                float fill = 0.0f);
  ProjectionSet(int n_modules, int nu, int nv, std::vector<std::string> angle_ids,
                std::vector<float> values);

  int n_modules() const { return n_modules_; }
  int nu() const { return nu_; }
  int nv() const { return nv_; }
  int n_angles() const { return static_cast<int>(angle_ids_.size()); }
  const std::vector<std::string>& angle_ids() const { return angle_ids_; }
  std::size_t bins_per_angle() const {
    return static_cast<std::size_t>(n_modules_) * nu_ * nv_;
  }
  std::size_t size() const { return values_.size(); }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  std::size_t index(int angle, int module, int v, int u) const {
    return ((static_cast<std::size_t>(angle) * n_modules_ + module) * nv_ + v) * nu_ + u;
  }

  /// Copy of the readings for a single angular position.
  ProjectionSet angle(int a) const;

  void validate() const;

 private:
  int n_modules_ = 0;
  int nu_ = 0;
  int nv_ = 0;
  std::vector<std::string> angle_ids_;
  std::vector<float> values_;
};

/// Voxel labels shipped alongside phantoms. Stored on disk as a label volume:
/// 0 = none, 1 = myocardium, 2 = blood pool, 3 = myocardium inside a defect.
struct LabeledMasks {
  GridSpec grid;
  std::vector<std::uint8_t> myocardium;
  std::vector<std::uint8_t> blood_pool;
  std::vector<std::uint8_t> defect;

  explicit LabeledMasks(const GridSpec& g = {});

  std::size_t count(const std::vector<std::uint8_t>& mask) const;
  bool has_defect() const { return count(defect) > 0; }

  VolumeGrid to_label_volume() const;
  static LabeledMasks from_label_volume(const VolumeGrid& labels);

  /// Throws DataError when myocardium and blood pool overlap or the defect
  /// leaves the myocardium.
  void validate() const;
};

// On-disk formats: a JSON header (`<stem>.vol.json` / `<stem>.proj.json`)
// next to a raw little-endian float32 payload (`<stem>.vol.f32` /
// `<stem>.proj.f32`). `path` may be given with or without the `.json` suffix.

void write_volume(const std::filesystem::path& path, const VolumeGrid& volume);
VolumeGrid read_volume(const std::filesystem::path& path);

void write_projections(const std::filesystem::path& path, const ProjectionSet& projections);
ProjectionSet read_projections(const std::filesystem::path& path);

/// Resolved header/payload file names for a volume or projection path.
struct FilePair {
  std::filesystem::path header;
  std::filesystem::path payload;
};
FilePair volume_files(const std::filesystem::path& path);
FilePair projection_files(const std::filesystem::path& path);

// Little-endian float32 helpers shared by the checkpoint and matrix-cache
// writers.
void write_f32_le(std::ostream& out, std::span<const float> values);
void read_f32_le(std::istream& in, std::span<float> values);

}  // namespace tipnet
