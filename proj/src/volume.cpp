#include "tipnet/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tipnet/error.hpp"

namespace tipnet {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
    case ErrorKind::Geometry: return "geometry";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Reconstruction: return "reconstruction";
    case ErrorKind::Data: return "data";
  }
  return "unknown";
}

// ---------------------------------------------------------------- GridSpec

std::array<double, 3> GridSpec::voxel_center(int i, int j, int k) const {
  return {center[0] + (i - 0.5 * (nx - 1)) * voxel_size[0],
          center[1] + (j - 0.5 * (ny - 1)) * voxel_size[1],
          center[2] + (k - 0.5 * (nz - 1)) * voxel_size[2]};
}

std::array<double, 3> GridSpec::lower_corner() const {
  return {center[0] - 0.5 * nx * voxel_size[0], center[1] - 0.5 * ny * voxel_size[1],
          center[2] - 0.5 * nz * voxel_size[2]};
}

std::array<double, 3> GridSpec::upper_corner() const {
  return {center[0] + 0.5 * nx * voxel_size[0], center[1] + 0.5 * ny * voxel_size[1],
          center[2] + 0.5 * nz * voxel_size[2]};
}

void GridSpec::validate() const {
  if (nx < 1 || ny < 1 || nz < 1) {
    throw ConfigError("grid dimensions must be >= 1, got " + std::to_string(nx) + "x" +
                      std::to_string(ny) + "x" + std::to_string(nz));
  }
  for (double s : voxel_size) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("voxel size must be positive");
  }
}

// -------------------------------------------------------------- VolumeGrid

VolumeGrid::VolumeGrid(const GridSpec& grid, float fill) : grid_(grid) {
  grid_.validate();
  values_.assign(grid_.voxel_count(), fill);
}

VolumeGrid::VolumeGrid(const GridSpec& grid, std::vector<float> values)
    : grid_(grid), values_(std::move(values)) {
  grid_.validate();
  if (values_.size() != grid_.voxel_count()) {
    throw ShapeError("volume payload has " + std::to_string(values_.size()) +
                     " values, grid needs " + std::to_string(grid_.voxel_count()));
  }
}

void VolumeGrid::validate(bool nonnegative) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const float v = values_[i];
    if (!std::isfinite(v)) {
      throw NumericalError("volume value at index " + std::to_string(i) + " is not finite");
    }
    if (nonnegative && v < 0.0f) {
      throw NumericalError("volume value at index " + std::to_string(i) + " is negative");
    }
  }
}

// ----------------------------------------------------------- ProjectionSet

namespace {

std::size_t projection_count(int n_modules, int nu, int nv, std::size_t n_angles) {
  if (n_modules < 1 || nu < 1 || nv < 1) {
    throw ShapeError("projection dimensions must be >= 1");
  }
  if (n_angles < 1) throw ShapeError("projection set needs at least one angle id");
  return n_angles * static_cast<std::size_t>(n_modules) * nu * nv;
}

}  // namespace

ProjectionSet::ProjectionSet(int n_modules, int nu, int nv,
                             std::vector<std::string> angle_ids, float fill)
    : n_modules_(n_modules), nu_(nu), nv_(nv), angle_ids_(std::move(angle_ids)) {
  values_.assign(projection_count(n_modules_, nu_, nv_, angle_ids_.size()), fill);
}

ProjectionSet::ProjectionSet(int n_modules, int nu, int nv,
                             std::vector<std::string> angle_ids, std::vector<float> values)
    : n_modules_(n_modules),
      nu_(nu),
      nv_(nv),
      angle_ids_(std::move(angle_ids)),
      values_(std::move(values)) {
  const auto expected = projection_count(n_modules_, nu_, nv_, angle_ids_.size());
  if (values_.size() != expected) {
    throw ShapeError("projection payload has " + std::to_string(values_.size()) +
                     " values, header needs " + std::to_string(expected));
  }
}

ProjectionSet ProjectionSet::angle(int a) const {
  if (a < 0 || a >= n_angles()) throw ShapeError("angle index out of range");
  const auto n = bins_per_angle();
  std::vector<float> out(values_.begin() + static_cast<std::ptrdiff_t>(a * n),
                         values_.begin() + static_cast<std::ptrdiff_t>((a + 1) * n));
  return ProjectionSet(n_modules_, nu_, nv_, {angle_ids_[a]}, std::move(out));
}

void ProjectionSet::validate() const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i]) || values_[i] < 0.0f) {
      throw NumericalError("projection value at index " + std::to_string(i) +
                           " is negative or not finite");
    }
  }
}

// ------------------------------------------------------------ LabeledMasks

LabeledMasks::LabeledMasks(const GridSpec& g)
    : grid(g),
      myocardium(g.voxel_count(), 0),
      blood_pool(g.voxel_count(), 0),
      defect(g.voxel_count(), 0) {}

std::size_t LabeledMasks::count(const std::vector<std::uint8_t>& mask) const {
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  return n;
}

VolumeGrid LabeledMasks::to_label_volume() const {
  VolumeGrid labels(grid, 0.0f);
  auto out = labels.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (defect[i]) {
      out[i] = 3.0f;
    } else if (myocardium[i]) {
      out[i] = 1.0f;
    } else if (blood_pool[i]) {
      out[i] = 2.0f;
    }
  }
  return labels;
}

LabeledMasks LabeledMasks::from_label_volume(const VolumeGrid& labels) {
  LabeledMasks masks(labels.grid());
  auto in = labels.values();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const int label = static_cast<int>(std::lround(in[i]));
    switch (label) {
      case 0: break;
      case 1: masks.myocardium[i] = 1; break;
      case 2: masks.blood_pool[i] = 1; break;
      case 3:
        masks.myocardium[i] = 1;
        masks.defect[i] = 1;
        break;
      default:
        throw FormatError("labels", "unknown label " + std::to_string(label) + " at index " +
                                        std::to_string(i));
    }
  }
  return masks;
}

void LabeledMasks::validate() const {
  const auto n = grid.voxel_count();
  if (myocardium.size() != n || blood_pool.size() != n || defect.size() != n) {
    throw ShapeError("mask sizes do not match grid");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (myocardium[i] && blood_pool[i]) {
      throw DataError("myocardium and blood pool overlap at voxel " + std::to_string(i));
    }
    if (defect[i] && !myocardium[i]) {
      throw DataError("defect voxel " + std::to_string(i) + " lies outside the myocardium");
    }
  }
}

// ------------------------------------------------------------- file pairs

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

FilePair resolve_pair(const fs::path& path, const std::string& kind) {
  if (path.empty()) throw IoError("empty " + kind + " path");
  std::string s = path.string();
  const std::string json_suffix = "." + kind + ".json";
  const std::string f32_suffix = "." + kind + ".f32";
  std::string stem;
  if (ends_with(s, json_suffix)) {
    stem = s.substr(0, s.size() - json_suffix.size());
  } else if (ends_with(s, f32_suffix)) {
    stem = s.substr(0, s.size() - f32_suffix.size());
  } else {
    stem = s;
  }
  return {fs::path(stem + json_suffix), fs::path(stem + f32_suffix)};
}

json read_header(const fs::path& header) {
  std::ifstream in(header);
  if (!in) throw IoError("cannot open " + header.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("header", header.string() + ": " + e.what());
  }
}

void write_header(const fs::path& header, const json& j) {
  if (header.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(header.parent_path(), ec);
  }
  std::ofstream out(header);
  if (!out) throw IoError("cannot write " + header.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + header.string());
}

template <typename V>
V require(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(key, "missing header field");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(key, e.what());
  }
}

std::vector<float> read_payload(const fs::path& payload, std::size_t count,
                                const char* field) {
  std::ifstream in(payload, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + payload.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(float)) {
    throw FormatError(field, "payload " + payload.string() + " has " + std::to_string(bytes) +
                                 " bytes, header declares " +
                                 std::to_string(count * sizeof(float)));
  }
  in.seekg(0);
  std::vector<float> values(count);
  read_f32_le(in, values);
  return values;
}

void write_payload(const fs::path& payload, std::span<const float> values) {
  std::ofstream out(payload, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + payload.string());
  write_f32_le(out, values);
  if (!out) throw IoError("failed writing " + payload.string());
}

}  // namespace

FilePair volume_files(const fs::path& path) { return resolve_pair(path, "vol"); }
FilePair projection_files(const fs::path& path) { return resolve_pair(path, "proj"); }

void write_f32_le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) |
             (bits >> 24);
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

void read_f32_le(std::istream& in, std::span<float> values) {
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size_bytes()));
  if (!in) throw IoError("short read on float32 payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (float& v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits >> 8) & 0xff00u) |
             (bits >> 24);
      v = std::bit_cast<float>(bits);
    }
  }
}

// ---------------------------------------------------------------- volumes

void write_volume(const fs::path& path, const VolumeGrid& volume) {
  const auto files = volume_files(path);
  const auto& g = volume.grid();
  json j;
  j["format"] = "tipnet-volume";
  j["version"] = 1;
  j["dims"] = {g.nx, g.ny, g.nz};
  j["voxel_size_mm"] = g.voxel_size;
  j["center_mm"] = g.center;
  j["dtype"] = "float32-le";
  j["order"] = "x-fastest";
  j["payload"] = files.payload.filename().string();
  write_header(files.header, j);
  write_payload(files.payload, volume.values());
}

VolumeGrid read_volume(const fs::path& path) {
  const auto files = volume_files(path);
  const json j = read_header(files.header);
  if (require<std::string>(j, "format") != "tipnet-volume") {
    throw FormatError("format", "not a tipnet volume header");
  }
  if (require<std::string>(j, "dtype") != "float32-le") {
    throw FormatError("dtype", "unsupported dtype");
  }
  const auto dims = require<std::vector<int>>(j, "dims");
  if (dims.size() != 3 || dims[0] < 1 || dims[1] < 1 || dims[2] < 1) {
    throw FormatError("dims", "expected three positive dimensions");
  }
  GridSpec g;
  g.nx = dims[0];
  g.ny = dims[1];
  g.nz = dims[2];
  g.voxel_size = require<std::array<double, 3>>(j, "voxel_size_mm");
  if (j.contains("center_mm")) g.center = require<std::array<double, 3>>(j, "center_mm");
  try {
    g.validate();
  } catch (const ConfigError& e) {
    throw FormatError("voxel_size_mm", e.what());
  }
  const fs::path payload = files.header.parent_path() / require<std::string>(j, "payload");
  auto values = read_payload(payload, g.voxel_count(), "payload");
  return VolumeGrid(g, std::move(values));
}

// ------------------------------------------------------------ projections

void write_projections(const fs::path& path, const ProjectionSet& p) {
  const auto files = projection_files(path);
  json j;
  j["format"] = "tipnet-projections";
  j["version"] = 1;
  j["n_modules"] = p.n_modules();
  j["nu"] = p.nu();
  j["nv"] = p.nv();
  j["angle_ids"] = p.angle_ids();
  j["dtype"] = "float32-le";
  j["order"] = "u-fastest, then v, module, angle";
  j["payload"] = files.payload.filename().string();
  write_header(files.header, j);
  write_payload(files.payload, p.values());
}

ProjectionSet read_projections(const fs::path& path) {
  const auto files = projection_files(path);
  const json j = read_header(files.header);
  if (require<std::string>(j, "format") != "tipnet-projections") {
    throw FormatError("format", "not a tipnet projection header");
  }
  if (require<std::string>(j, "dtype") != "float32-le") {
    throw FormatError("dtype", "unsupported dtype");
  }
  const int n_modules = require<int>(j, "n_modules");
  const int nu = require<int>(j, "nu");
  const int nv = require<int>(j, "nv");
  auto angle_ids = require<std::vector<std::string>>(j, "angle_ids");
  if (n_modules < 1) throw FormatError("n_modules", "must be >= 1");
  if (nu < 1) throw FormatError("nu", "must be >= 1");
  if (nv < 1) throw FormatError("nv", "must be >= 1");
  if (angle_ids.empty()) throw FormatError("angle_ids", "must list at least one angle");
  const std::size_t count = angle_ids.size() * static_cast<std::size_t>(n_modules) * nu * nv;
  const fs::path payload = files.header.parent_path() / require<std::string>(j, "payload");
  auto values = read_payload(payload, count, "payload");
  return ProjectionSet(n_modules, nu, nv, std::move(angle_ids), std::move(values));
}

}  // namespace tipnet
