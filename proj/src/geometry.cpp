#include "tipnet/geometry.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "tipnet/error.hpp"
#include "tipnet/log.hpp"

namespace tipnet {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

Vec3 rotate_z(Vec3 p, double cos_t, double sin_t) {
  return {cos_t * p.x - sin_t * p.y, sin_t * p.x + cos_t * p.y, p.z};
}

}  // namespace

Vec3 DetectorModule::bin_point(double u, double v) const {
  return detector_center + ((u - 0.5 * (nu - 1)) * pitch) * u_axis +
         ((v - 0.5 * (nv - 1)) * pitch) * v_axis;
}

void GeometryConfig::validate() const {
  if (n_modules < 1) throw ConfigError("geometry: n_modules must be >= 1");
  if (nu < 1 || nv < 1) throw ConfigError("geometry: detector bins must be >= 1");
  if (!(pitch_mm > 0.0)) throw ConfigError("geometry: pitch must be positive");
  if (!(focal_distance_mm > 0.0)) throw ConfigError("geometry: focal distance must be positive");
  if (!(detector_distance_mm > 0.0)) {
    throw ConfigError("geometry: detector distance must be positive");
  }
  if (rays_per_bin_axis < 1) throw ConfigError("geometry: rays_per_bin_axis must be >= 1");
  if (!(fov_radius_mm > 0.0)) throw ConfigError("geometry: fov radius must be positive");
  if (!rows.empty()) {
    int total = 0;
    for (const auto& r : rows) {
      if (r.count < 1) throw ConfigError("geometry: module row count must be >= 1");
      total += r.count;
    }
    if (total != n_modules) {
      throw ConfigError("geometry: module rows hold " + std::to_string(total) +
                        " modules but n_modules is " + std::to_string(n_modules));
    }
  }
}

GeometryConfig GeometryConfig::desk() {
  GeometryConfig c;
  c.focal_distance_mm = 220.0;
  c.detector_distance_mm = 80.0;
  c.nu = 16;
  c.nv = 16;
  c.pitch_mm = 4.92;
  c.fov_radius_mm = 95.0;
  return c;
}

ScaleSetup scale_setup(Scale scale) {
  ScaleSetup s;
  if (scale == Scale::Desk) {
    s.geometry = GeometryConfig::desk();
    s.grid = GridSpec{24, 24, 16, {6.0, 6.0, 6.0}, {0.0, 0.0, 0.0}};
  } else {
    s.geometry = GeometryConfig::paper();
    s.grid = GridSpec{70, 70, 50, {4.0, 4.0, 4.0}, {0.0, 0.0, 0.0}};
  }
  // Four positions interleave the middle-row spacing (180 deg over 8 gaps).
  s.four_angle_step_deg = s.geometry.arc_span_deg / 8.0 / 4.0;
  return s;
}

Scale parse_scale(const std::string& name) {
  if (name == "desk") return Scale::Desk;
  if (name == "paper") return Scale::Paper;
  throw ConfigError("unknown scale '" + name + "' (expected desk or paper)");
}

const char* to_string(Scale scale) { return scale == Scale::Desk ? "desk" : "paper"; }

AngleSet stationary_angle_set() { return {AngleEntry{"a0", 0.0, {}}}; }

AngleSet four_angle_set(double step_deg) {
  AngleSet set;
  for (int i = 0; i < 4; ++i) set.push_back({"a" + std::to_string(i), i * step_deg, {}});
  return set;
}

ScannerGeometry build_geometry(const GeometryConfig& config) {
  config.validate();
  std::vector<ModuleRow> rows = config.rows;
  if (rows.empty()) rows.push_back({config.n_modules, 0.0});

  ScannerGeometry geometry;
  geometry.fov_center = config.fov_center;
  geometry.fov_radius = config.fov_radius_mm;
  geometry.rays_per_bin_axis = config.rays_per_bin_axis;
  for (const auto& row : rows) {
    const double elevation = row.elevation_deg * kDegToRad;
    for (int k = 0; k < row.count; ++k) {
      const double azimuth_deg =
          row.count == 1
              ? config.arc_center_deg
              : config.arc_center_deg - 0.5 * config.arc_span_deg +
                    config.arc_span_deg * static_cast<double>(k) / (row.count - 1);
      const double azimuth = azimuth_deg * kDegToRad;
      // Outward unit vector from the FOV center to the aperture.
      const Vec3 outward{std::cos(elevation) * std::cos(azimuth),
                         std::cos(elevation) * std::sin(azimuth), std::sin(elevation)};
      DetectorModule m;
      m.aperture = config.fov_center + config.focal_distance_mm * outward;
      m.detector_center = m.aperture + config.detector_distance_mm * outward;
      m.normal = -1.0 * outward;
      m.u_axis = Vec3{-std::sin(azimuth), std::cos(azimuth), 0.0};
      m.v_axis = normalized(cross(outward, m.u_axis));
      m.nu = config.nu;
      m.nv = config.nv;
      m.pitch = config.pitch_mm;
      geometry.modules.push_back(m);
    }
  }
  return geometry;
}

ScannerGeometry apply_angle(const ScannerGeometry& geometry, const AngleEntry& entry) {
  const double t = entry.rotation_deg * kDegToRad;
  const double c = std::cos(t);
  const double s = std::sin(t);
  const Vec3 pivot = geometry.fov_center;
  const Vec3 shift = entry.fov_displacement;
  auto move_point = [&](Vec3 p) { return pivot + shift + rotate_z(p - pivot, c, s); };

  ScannerGeometry out = geometry;
  out.fov_center = pivot + shift;
  for (auto& m : out.modules) {
    m.aperture = move_point(m.aperture);
    m.detector_center = move_point(m.detector_center);
    m.normal = rotate_z(m.normal, c, s);
    m.u_axis = rotate_z(m.u_axis, c, s);
    m.v_axis = rotate_z(m.v_axis, c, s);
  }
  return out;
}

// ------------------------------------------------------------ SystemMatrix

SystemMatrix::SystemMatrix(std::int64_t n_rows, std::int64_t n_cols,
                           std::vector<std::int64_t> row_ptr, std::vector<std::int32_t> cols,
                           std::vector<double> weights)
    : n_rows_(n_rows),
      n_cols_(n_cols),
      row_ptr_(std::move(row_ptr)),
      cols_(std::move(cols)),
      weights_(std::move(weights)) {
  if (static_cast<std::int64_t>(row_ptr_.size()) != n_rows_ + 1) {
    throw ShapeError("system matrix row_ptr length must be rows + 1");
  }
  if (cols_.size() != weights_.size() ||
      row_ptr_.back() != static_cast<std::int64_t>(weights_.size())) {
    throw ShapeError("system matrix entry arrays are inconsistent");
  }
}

void SystemMatrix::multiply(std::span<const double> x, std::span<double> y) const {
  if (static_cast<std::int64_t>(x.size()) != n_cols_ ||
      static_cast<std::int64_t>(y.size()) != n_rows_) {
    throw ShapeError("system matrix multiply: dimension mismatch");
  }
  for (std::int64_t r = 0; r < n_rows_; ++r) {
    double acc = 0.0;
    for (auto k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) acc += weights_[k] * x[cols_[k]];
    y[r] = acc;
  }
}

void SystemMatrix::multiply_transpose(std::span<const double> y, std::span<double> x) const {
  if (static_cast<std::int64_t>(x.size()) != n_cols_ ||
      static_cast<std::int64_t>(y.size()) != n_rows_) {
    throw ShapeError("system matrix transpose multiply: dimension mismatch");
  }
  std::fill(x.begin(), x.end(), 0.0);
  for (std::int64_t r = 0; r < n_rows_; ++r) {
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (auto k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) x[cols_[k]] += weights_[k] * yr;
  }
}

std::vector<double> SystemMatrix::column_sums() const {
  std::vector<double> sums(static_cast<std::size_t>(n_cols_), 0.0);
  for (std::size_t k = 0; k < weights_.size(); ++k) sums[cols_[k]] += weights_[k];
  return sums;
}

std::vector<std::int64_t> SystemMatrix::dead_columns() const {
  std::vector<char> seen(static_cast<std::size_t>(n_cols_), 0);
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    if (weights_[k] > 0.0) seen[cols_[k]] = 1;
  }
  std::vector<std::int64_t> dead;
  for (std::int64_t c = 0; c < n_cols_; ++c) {
    if (!seen[c]) dead.push_back(c);
  }
  return dead;
}

double SystemMatrix::at(std::int64_t row, std::int64_t col) const {
  for (auto k = row_ptr_[row]; k < row_ptr_[row + 1]; ++k) {
    if (cols_[k] == col) return weights_[k];
  }
  return 0.0;
}

// ------------------------------------------------------- ray traversal

namespace {

struct Segment {
  std::int32_t voxel;
  double length;
  double t_mid;
};

/// Incremental voxel walk of the half-line origin + t * dir, t >= 0, dir unit.
template <typename Emit>
void traverse(const GridSpec& grid, const std::array<double, 3>& lo,
              const std::array<double, 3>& hi, Vec3 origin, Vec3 dir, Emit&& emit) {
  const std::array<double, 3> o{origin.x, origin.y, origin.z};
  const std::array<double, 3> d{dir.x, dir.y, dir.z};
  const std::array<int, 3> n{grid.nx, grid.ny, grid.nz};

  double t_enter = 0.0;
  double t_exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return;
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a];
    double t1 = (hi[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    t_enter = std::max(t_enter, t0);
    t_exit = std::min(t_exit, t1);
  }
  if (!(t_enter < t_exit)) return;

  std::array<int, 3> idx{};
  std::array<int, 3> step{};
  std::array<double, 3> t_max{};
  std::array<double, 3> t_delta{};
  const double t_probe = 0.5 * (t_enter + std::min(t_exit, t_enter + 1e-6));
  for (int a = 0; a < 3; ++a) {
    const double s = grid.voxel_size[a];
    const double p = o[a] + t_probe * d[a];
    idx[a] = std::clamp(static_cast<int>(std::floor((p - lo[a]) / s)), 0, n[a] - 1);
    if (d[a] > 0.0) {
      step[a] = 1;
      t_max[a] = (lo[a] + (idx[a] + 1) * s - o[a]) / d[a];
      t_delta[a] = s / d[a];
    } else if (d[a] < 0.0) {
      step[a] = -1;
      t_max[a] = (lo[a] + idx[a] * s - o[a]) / d[a];
      t_delta[a] = -s / d[a];
    } else {
      step[a] = 0;
      t_max[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }

  double t = t_enter;
  while (t < t_exit) {
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    const double t_next = std::min(t_max[axis], t_exit);
    if (t_next > t) {
      const auto voxel = static_cast<std::int32_t>(grid.index(idx[0], idx[1], idx[2]));
      emit(Segment{voxel, t_next - t, 0.5 * (t + t_next)});
    }
    t = t_next;
    idx[axis] += step[axis];
    if (idx[axis] < 0 || idx[axis] >= n[axis]) break;
    t_max[axis] += t_delta[axis];
  }
}

bool inside_box(Vec3 p, const std::array<double, 3>& lo, const std::array<double, 3>& hi) {
  return p.x >= lo[0] && p.x <= hi[0] && p.y >= lo[1] && p.y <= hi[1] && p.z >= lo[2] &&
         p.z <= hi[2];
}

}  // namespace

SystemMatrix build_system_matrix(const ScannerGeometry& geometry, const AngleSet& angles,
                                 const GridSpec& grid) {
  grid.validate();
  if (geometry.modules.empty()) throw GeometryError("geometry has no detector modules");
  if (angles.empty()) throw GeometryError("angle set is empty");
  const int n_modules = geometry.n_modules();
  const int nu = geometry.nu();
  const int nv = geometry.nv();
  for (const auto& m : geometry.modules) {
    if (m.nu != nu || m.nv != nv) throw GeometryError("modules must share bin counts");
  }
  const int sub = std::max(1, geometry.rays_per_bin_axis);
  const double sub_weight = 1.0 / (sub * sub);

  const auto lo = grid.lower_corner();
  const auto hi = grid.upper_corner();
  const std::int64_t rows_per_angle = static_cast<std::int64_t>(n_modules) * nu * nv;
  const std::int64_t n_rows = rows_per_angle * static_cast<std::int64_t>(angles.size());
  const auto n_cols = static_cast<std::int64_t>(grid.voxel_count());
  if (n_cols > std::numeric_limits<std::int32_t>::max()) {
    throw GeometryError("grid too large for 32-bit column indices");
  }

  std::vector<std::int64_t> row_ptr;
  row_ptr.reserve(static_cast<std::size_t>(n_rows) + 1);
  row_ptr.push_back(0);
  std::vector<std::int32_t> cols;
  std::vector<double> weights;
  std::vector<std::pair<std::int32_t, double>> row_entries;

  for (const auto& entry : angles) {
    const ScannerGeometry moved = apply_angle(geometry, entry);
    for (const auto& m : moved.modules) {
      if (inside_box(m.aperture, lo, hi)) {
        throw GeometryError("aperture lies inside the voxel grid (angle " + entry.id + ")");
      }
    }
    for (const auto& m : moved.modules) {
      const double focal = norm(m.aperture - moved.fov_center);
      for (int iv = 0; iv < nv; ++iv) {
        for (int iu = 0; iu < nu; ++iu) {
          row_entries.clear();
          for (int sv = 0; sv < sub; ++sv) {
            for (int su = 0; su < sub; ++su) {
              const double u = iu + (su + 0.5) / sub - 0.5;
              const double v = iv + (sv + 0.5) / sub - 0.5;
              const Vec3 p = m.bin_point(u, v);
              const Vec3 toward = m.aperture - p;
              const double len = norm(toward);
              if (!(len > 0.0)) throw GeometryError("bin point coincides with aperture");
              const Vec3 dir = (1.0 / len) * toward;
              traverse(grid, lo, hi, m.aperture, dir, [&](const Segment& seg) {
                const double falloff = focal / seg.t_mid;
                row_entries.emplace_back(seg.voxel,
                                         seg.length * falloff * falloff * sub_weight);
              });
            }
          }
          std::stable_sort(row_entries.begin(), row_entries.end(),
                           [](const auto& a, const auto& b) { return a.first < b.first; });
          for (std::size_t k = 0; k < row_entries.size();) {
            const auto col = row_entries[k].first;
            double w = 0.0;
            for (; k < row_entries.size() && row_entries[k].first == col; ++k) {
              w += row_entries[k].second;
            }
            if (w > 0.0) {
              cols.push_back(col);
              weights.push_back(w);
            }
          }
          row_ptr.push_back(static_cast<std::int64_t>(weights.size()));
        }
      }
    }
  }

  SystemMatrix s(n_rows, n_cols, std::move(row_ptr), std::move(cols), std::move(weights));
  s.n_modules = n_modules;
  s.nu = nu;
  s.nv = nv;
  s.grid = grid;
  for (const auto& entry : angles) s.angle_ids.push_back(entry.id);

  const auto dead = s.dead_columns();
  if (!dead.empty()) {
    std::ostringstream msg;
    msg << dead.size() << " of " << n_cols << " voxels are not seen by any detector bin:";
    const std::size_t shown = std::min<std::size_t>(dead.size(), 16);
    for (std::size_t i = 0; i < shown; ++i) msg << ' ' << dead[i];
    if (shown < dead.size()) msg << " ...";
    log::warn(msg.str());
  }
  return s;
}

SystemMatrix stack_rows(std::span<const SystemMatrix> blocks) {
  if (blocks.empty()) throw ShapeError("stack_rows needs at least one block");
  const auto& first = blocks.front();
  std::int64_t rows = 0;
  std::vector<std::int64_t> row_ptr{0};
  std::vector<std::int32_t> cols;
  std::vector<double> weights;
  std::vector<std::string> ids;
  for (const auto& b : blocks) {
    if (b.cols() != first.cols() || b.n_modules != first.n_modules || b.nu != first.nu ||
        b.nv != first.nv) {
      throw ShapeError("stack_rows: blocks have different layouts");
    }
    const auto offset = static_cast<std::int64_t>(weights.size());
    for (std::int64_t r = 0; r < b.rows(); ++r) row_ptr.push_back(offset + b.row_ptr()[r + 1]);
    cols.insert(cols.end(), b.col_indices().begin(), b.col_indices().end());
    weights.insert(weights.end(), b.weights().begin(), b.weights().end());
    ids.insert(ids.end(), b.angle_ids.begin(), b.angle_ids.end());
    rows += b.rows();
  }
  SystemMatrix s(rows, first.cols(), std::move(row_ptr), std::move(cols), std::move(weights));
  s.n_modules = first.n_modules;
  s.nu = first.nu;
  s.nv = first.nv;
  s.grid = first.grid;
  s.angle_ids = std::move(ids);
  return s;
}

ProjectionSet forward_project(const SystemMatrix& s, const VolumeGrid& x) {
  if (static_cast<std::int64_t>(x.size()) != s.cols()) {
    throw ShapeError("forward_project: volume has " + std::to_string(x.size()) +
                     " voxels, matrix has " + std::to_string(s.cols()) + " columns");
  }
  std::vector<double> xd(x.values().begin(), x.values().end());
  std::vector<double> yd(static_cast<std::size_t>(s.rows()));
  s.multiply(xd, yd);
  std::vector<float> y(yd.begin(), yd.end());
  return ProjectionSet(s.n_modules, s.nu, s.nv, s.angle_ids, std::move(y));
}

VolumeGrid back_project(const SystemMatrix& s, const ProjectionSet& y) {
  if (static_cast<std::int64_t>(y.size()) != s.rows()) {
    throw ShapeError("back_project: projections have " + std::to_string(y.size()) +
                     " bins, matrix has " + std::to_string(s.rows()) + " rows");
  }
  std::vector<double> yd(y.values().begin(), y.values().end());
  std::vector<double> xd(static_cast<std::size_t>(s.cols()));
  s.multiply_transpose(yd, xd);
  std::vector<float> x(xd.begin(), xd.end());
  return VolumeGrid(s.grid, std::move(x));
}

// ------------------------------------------------------------ matrix cache

namespace {

template <typename V>
void write_le(std::ostream& out, const std::vector<V>& values) {
  static_assert(std::endian::native == std::endian::little,
                "matrix cache writer assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(V)));
}

template <typename V>
std::vector<V> read_le(std::istream& in, std::size_t count, const char* field) {
  std::vector<V> values(count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(count * sizeof(V)));
  if (!in) throw FormatError(field, "truncated system-matrix cache");
  return values;
}

}  // namespace

void write_system_matrix(const std::filesystem::path& path, const SystemMatrix& s) {
  if (path.empty()) throw IoError("empty system-matrix cache path");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::json h;
  h["format"] = "tipnet-system-matrix";
  h["version"] = 1;
  h["rows"] = s.rows();
  h["cols"] = s.cols();
  h["nnz"] = s.nnz();
  h["n_modules"] = s.n_modules;
  h["nu"] = s.nu;
  h["nv"] = s.nv;
  h["angle_ids"] = s.angle_ids;
  h["grid"] = {{"dims", {s.grid.nx, s.grid.ny, s.grid.nz}},
               {"voxel_size_mm", s.grid.voxel_size},
               {"center_mm", s.grid.center}};
  h["arrays"] = "row_ptr:int64-le, cols:int32-le, weights:float64-le";
  out << h.dump() << '\n';
  write_le(out, std::vector<std::int64_t>(s.row_ptr().begin(), s.row_ptr().end()));
  write_le(out, std::vector<std::int32_t>(s.col_indices().begin(), s.col_indices().end()));
  write_le(out, std::vector<double>(s.weights().begin(), s.weights().end()));
  if (!out) throw IoError("failed writing " + path.string());
}

SystemMatrix read_system_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("header", e.what());
  }
  if (h.value("format", "") != "tipnet-system-matrix") {
    throw FormatError("format", "not a system-matrix cache");
  }
  const auto rows = h.at("rows").get<std::int64_t>();
  const auto cols = h.at("cols").get<std::int64_t>();
  const auto nnz = h.at("nnz").get<std::size_t>();
  auto row_ptr = read_le<std::int64_t>(in, static_cast<std::size_t>(rows) + 1, "row_ptr");
  auto col_idx = read_le<std::int32_t>(in, nnz, "cols");
  auto weights = read_le<double>(in, nnz, "weights");
  SystemMatrix s(rows, cols, std::move(row_ptr), std::move(col_idx), std::move(weights));
  s.n_modules = h.at("n_modules").get<int>();
  s.nu = h.at("nu").get<int>();
  s.nv = h.at("nv").get<int>();
  s.angle_ids = h.at("angle_ids").get<std::vector<std::string>>();
  const auto dims = h.at("grid").at("dims").get<std::vector<int>>();
  s.grid.nx = dims.at(0);
  s.grid.ny = dims.at(1);
  s.grid.nz = dims.at(2);
  s.grid.voxel_size = h.at("grid").at("voxel_size_mm").get<std::array<double, 3>>();
  s.grid.center = h.at("grid").at("center_mm").get<std::array<double, 3>>();
  if (static_cast<std::int64_t>(s.grid.voxel_count()) != cols) {
    throw FormatError("grid", "grid size does not match column count");
  }
  return s;
}

}  // namespace tipnet
