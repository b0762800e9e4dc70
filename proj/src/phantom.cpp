#include "tipnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "tipnet/error.hpp"
#include "tipnet/log.hpp"

namespace tipnet {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Frame {
  Vec3 axis;  // toward the apex
  Vec3 e1;
  Vec3 e2;
};

Frame lv_frame(const PhantomSpec& s) {
  const double az = s.axis_azimuth_deg * kDeg;
  const double el = s.axis_elevation_deg * kDeg;
  Frame f;
  f.axis = {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
  const Vec3 ref = std::abs(f.axis.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  f.e1 = normalized(cross(ref, f.axis));
  f.e2 = cross(f.axis, f.e1);
  return f;
}

double ellipsoid(double t, double s1, double s2, double a, double b) {
  return (t * t) / (a * a) + (s1 * s1 + s2 * s2) / (b * b);
}

}  // namespace

void PhantomSpec::validate() const {
  if (!(myocardium_uptake >= 0.0) || !(blood_pool_uptake >= 0.0) || !(background_uptake >= 0.0)) {
    throw ConfigError("phantom: uptakes must be >= 0");
  }
  if (!(long_semi_axis_mm > 0.0) || !(short_semi_axis_mm > 0.0)) {
    throw ConfigError("phantom: semi-axes must be positive");
  }
  if (!(wall_thickness_mm > 0.0) || wall_thickness_mm >= short_semi_axis_mm ||
      wall_thickness_mm >= long_semi_axis_mm) {
    throw ConfigError("phantom: wall thickness must be positive and below the semi-axes");
  }
  if (!(base_fraction >= 0.0 && base_fraction < 1.0)) {
    throw ConfigError("phantom: base_fraction must lie in [0, 1)");
  }
  if (!(body_semi_axes_mm[0] > 0.0) || !(body_semi_axes_mm[1] > 0.0)) {
    throw ConfigError("phantom: body semi-axes must be positive");
  }
  if (defect) {
    const auto& d = *defect;
    if (!(d.severity >= 0.0 && d.severity <= 1.0)) throw ConfigError("phantom: severity must lie in [0, 1]");
    if (!(d.angle_extent_deg >= 0.0 && d.angle_extent_deg <= 360.0)) {
      throw ConfigError("phantom: defect angular extent must lie in [0, 360]");
    }
    if (!(d.axial_start >= 0.0 && d.axial_start <= d.axial_end && d.axial_end <= 1.0)) {
      throw ConfigError("phantom: defect axial range must satisfy 0 <= start <= end <= 1");
    }
  }
}

nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json j = {{"lv_center_mm", {s.lv_center.x, s.lv_center.y, s.lv_center.z}},
                      {"long_semi_axis_mm", s.long_semi_axis_mm},
                      {"short_semi_axis_mm", s.short_semi_axis_mm},
                      {"wall_thickness_mm", s.wall_thickness_mm},
                      {"axis_azimuth_deg", s.axis_azimuth_deg},
                      {"axis_elevation_deg", s.axis_elevation_deg},
                      {"base_fraction", s.base_fraction},
                      {"myocardium_uptake", s.myocardium_uptake},
                      {"blood_pool_uptake", s.blood_pool_uptake},
                      {"background_uptake", s.background_uptake},
                      {"body_semi_axes_mm", s.body_semi_axes_mm},
                      {"defect", nullptr}};
  if (s.defect) {
    j["defect"] = {{"angle_start_deg", s.defect->angle_start_deg},
                   {"angle_extent_deg", s.defect->angle_extent_deg},
                   {"axial_start", s.defect->axial_start},
                   {"axial_end", s.defect->axial_end},
                   {"severity", s.defect->severity}};
  }
  return j;
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    const auto c = j.at("lv_center_mm").get<std::array<double, 3>>();
    s.lv_center = {c[0], c[1], c[2]};
    s.long_semi_axis_mm = j.at("long_semi_axis_mm").get<double>();
    s.short_semi_axis_mm = j.at("short_semi_axis_mm").get<double>();
    s.wall_thickness_mm = j.at("wall_thickness_mm").get<double>();
    s.axis_azimuth_deg = j.at("axis_azimuth_deg").get<double>();
    s.axis_elevation_deg = j.at("axis_elevation_deg").get<double>();
    s.base_fraction = j.at("base_fraction").get<double>();
    s.myocardium_uptake = j.at("myocardium_uptake").get<double>();
    s.blood_pool_uptake = j.at("blood_pool_uptake").get<double>();
    s.background_uptake = j.at("background_uptake").get<double>();
    s.body_semi_axes_mm = j.at("body_semi_axes_mm").get<std::array<double, 2>>();
    if (j.contains("defect") && !j.at("defect").is_null()) {
      const auto& d = j.at("defect");
      s.defect = DefectSpec{d.at("angle_start_deg").get<double>(), d.at("angle_extent_deg").get<double>(),
                            d.at("axial_start").get<double>(), d.at("axial_end").get<double>(),
                            d.at("severity").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("phantom", std::string("invalid phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

PhantomSpec random_phantom_spec(std::mt19937_64& rng, const GridSpec& grid, bool with_defect) {
  auto uni = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  PhantomSpec s;
  const double jitter = grid.voxel_size[0];
  s.lv_center = {grid.center[0] + uni(-jitter, jitter), grid.center[1] + uni(-jitter, jitter),
                 grid.center[2] + uni(-jitter, jitter)};
  s.long_semi_axis_mm = uni(38.0, 46.0);
  s.short_semi_axis_mm = uni(25.0, 31.0);
  s.wall_thickness_mm = uni(9.0, 12.0);
  s.axis_azimuth_deg = uni(-40.0, 40.0);
  s.axis_elevation_deg = uni(-20.0, 20.0);
  s.base_fraction = uni(0.1, 0.3);
  s.myocardium_uptake = uni(3.0, 5.0);
  s.blood_pool_uptake = uni(0.8, 1.2);
  s.background_uptake = uni(0.3, 0.5);
  const double half_x = 0.5 * grid.nx * grid.voxel_size[0];
  const double half_y = 0.5 * grid.ny * grid.voxel_size[1];
  s.body_semi_axes_mm = {uni(0.85, 0.95) * half_x, uni(0.70, 0.80) * half_y};
  if (with_defect) {
    DefectSpec d;
    d.angle_start_deg = uni(0.0, 360.0);
    d.angle_extent_deg = uni(60.0, 120.0);
    d.axial_start = uni(0.0, 0.3);
    d.axial_end = uni(0.6, 1.0);
    d.severity = uni(0.5, 1.0);
    s.defect = d;
  }
  return s;
}

Phantom generate_phantom(const PhantomSpec& spec, const GridSpec& grid) {
  spec.validate();
  grid.validate();
  const Frame f = lv_frame(spec);
  const double a = spec.long_semi_axis_mm;
  const double b = spec.short_semi_axis_mm;
  const double w = spec.wall_thickness_mm;
  const double t_base = -spec.base_fraction * a;

  // Half-extent of the outer ellipsoid along each world axis.
  const Vec3 axes[3] = {f.axis, f.e1, f.e2};
  const double semi[3] = {a, b, b};
  const auto lo = grid.lower_corner();
  const auto hi = grid.upper_corner();
  const double c[3] = {spec.lv_center.x, spec.lv_center.y, spec.lv_center.z};
  for (int k = 0; k < 3; ++k) {
    double ext2 = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double comp = (k == 0 ? axes[i].x : k == 1 ? axes[i].y : axes[i].z) * semi[i];
      ext2 += comp * comp;
    }
    const double ext = std::sqrt(ext2);
    if (c[k] - ext < lo[k] || c[k] + ext > hi[k]) {
      throw DataError("phantom: LV shell extends outside the grid along axis " + std::to_string(k));
    }
  }

  Phantom p{VolumeGrid(grid, 0.0f), LabeledMasks(grid)};
  const double myo = spec.myocardium_uptake;
  const double bg = spec.background_uptake;
  const double defect_uptake = spec.defect ? bg + (myo - bg) * (1.0 - spec.defect->severity) : myo;
  for (int k = 0; k < grid.nz; ++k) {
    for (int j = 0; j < grid.ny; ++j) {
      for (int i = 0; i < grid.nx; ++i) {
        const auto pc = grid.voxel_center(i, j, k);
        const std::size_t idx = grid.index(i, j, k);
        const double bx = (pc[0] - grid.center[0]) / spec.body_semi_axes_mm[0];
        const double by = (pc[1] - grid.center[1]) / spec.body_semi_axes_mm[1];
        double value = (bx * bx + by * by <= 1.0) ? bg : 0.0;

        const Vec3 d = Vec3{pc[0], pc[1], pc[2]} - spec.lv_center;
        const double t = dot(d, f.axis);
        const double s1 = dot(d, f.e1);
        const double s2 = dot(d, f.e2);
        if (t >= t_base) {
          const bool in_outer = ellipsoid(t, s1, s2, a, b) <= 1.0;
          const bool in_inner = ellipsoid(t, s1, s2, a - w, b - w) <= 1.0;
          if (in_inner) {
            value = spec.blood_pool_uptake;
            p.masks.blood_pool[idx] = 1;
          } else if (in_outer) {
            value = myo;
            p.masks.myocardium[idx] = 1;
            if (spec.defect) {
              const auto& df = *spec.defect;
              double phi = std::atan2(s2, s1) / kDeg;
              double rel = std::fmod(phi - df.angle_start_deg, 360.0);
              if (rel < 0.0) rel += 360.0;
              const double axial = (a - t) / (a - t_base);
              if (rel < df.angle_extent_deg && axial >= df.axial_start && axial <= df.axial_end) {
                value = defect_uptake;
                p.masks.defect[idx] = 1;
              }
            }
          }
        }
        p.activity.values()[idx] = static_cast<float>(value);
      }
    }
  }
  return p;
}

void AcquisitionSpec::validate() const {
  if (!(counts_per_angle > 0.0)) throw ConfigError("acquisition: counts_per_angle must be > 0");
}

ProjectionSet simulate_acquisition(const VolumeGrid& x_true, const SystemMatrix& s,
                                   const AcquisitionSpec& acq) {
  acq.validate();
  ProjectionSet expected = forward_project(s, x_true);
  const std::size_t block = expected.bins_per_angle();
  double first = 0.0;
  for (std::size_t i = 0; i < block; ++i) first += expected.values()[i];
  const bool zero_volume =
      std::all_of(x_true.values().begin(), x_true.values().end(), [](float v) { return v == 0.0f; });
  if (zero_volume) return ProjectionSet(expected.n_modules(), expected.nu(), expected.nv(), expected.angle_ids());
  if (!(first > 0.0)) {
    throw DataError("acquisition: the activity has a zero projection but counts were requested");
  }
  const double scale = acq.counts_per_angle / first;
  std::mt19937_64 rng(acq.seed);
  auto values = expected.values();
  for (auto& v : values) {
    const double mean = static_cast<double>(v) * scale;
    if (mean > 0.0) {
      std::poisson_distribution<std::int64_t> draw(mean);
      v = static_cast<float>(draw(rng));
    } else {
      v = 0.0f;
    }
  }
  return expected;
}

ProjectionSet simulate_acquisition(const VolumeGrid& x_true, const ScannerGeometry& geometry,
                                   const AngleSet& angles, const AcquisitionSpec& acq) {
  return simulate_acquisition(x_true, build_system_matrix(geometry, angles, x_true.grid()), acq);
}

// --------------------------------------------------------------------- dataset

void DatasetConfig::validate() const {
  if (n_subjects < 1) throw ConfigError("dataset: n_subjects must be >= 1");
  if (!(counts_per_angle > 0.0)) throw ConfigError("dataset: counts_per_angle must be > 0");
  mlem.validate();
}

nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json mlem = {{"n_iters", c.mlem.n_iters}, {"initial_value", c.mlem.initial_value}};
  mlem["epsilon"] = c.mlem.epsilon ? nlohmann::json(*c.mlem.epsilon) : nlohmann::json(nullptr);
  return {{"n_subjects", c.n_subjects},
          {"scale", to_string(c.scale)},
          {"counts_per_angle", c.counts_per_angle},
          {"mlem", mlem},
          {"seed", c.seed}};
}

DatasetOperators build_dataset_operators(Scale scale) {
  DatasetOperators ops;
  ops.setup = scale_setup(scale);
  const auto geometry = build_geometry(ops.setup.geometry);
  ops.s_one = build_system_matrix(geometry, stationary_angle_set(), ops.setup.grid);
  ops.s_four = build_system_matrix(geometry, four_angle_set(ops.setup.four_angle_step_deg), ops.setup.grid);
  return ops;
}

namespace {

std::string subject_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%03d", index);
  return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, int index, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), stream};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

Sample generate_sample(const DatasetConfig& config, const DatasetOperators& ops, int index) {
  const GridSpec& grid = ops.setup.grid;
  Sample s;
  s.id = subject_id(index);
  s.has_defect = (index % 2) == 1;
  std::mt19937_64 shape_rng(derive_seed(config.seed, index, 0));
  // Redraw the rare defect sectors that miss every wall voxel.
  Phantom phantom;
  for (int attempt = 0;; ++attempt) {
    s.spec = random_phantom_spec(shape_rng, grid, s.has_defect);
    phantom = generate_phantom(s.spec, grid);
    if (phantom.masks.has_defect() == s.has_defect) break;
    if (attempt == 20) throw DataError("dataset: could not place a defect for " + s.id);
  }
  s.truth = std::move(phantom.activity);
  s.masks = std::move(phantom.masks);

  AcquisitionSpec acq{config.counts_per_angle, derive_seed(config.seed, index, 1)};
  s.proj_four = simulate_acquisition(s.truth, ops.s_four, acq);
  s.proj_one = s.proj_four.angle(0);
  s.img_mlem = mlem_reconstruct(ops.s_one, s.proj_one, config.mlem);
  s.img_bp = back_project(ops.s_one, s.proj_one);
  s.img_four = mlem_reconstruct(ops.s_four, s.proj_four, config.mlem);
  return s;
}

std::vector<Sample> generate_samples(const DatasetConfig& config, const DatasetOperators& ops) {
  config.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(config.n_subjects));
  for (int i = 0; i < config.n_subjects; ++i) out.push_back(generate_sample(config, ops, i));
  return out;
}

void write_sample(const Sample& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_volume(dir / "truth", s.truth);
  write_volume(dir / "labels", s.masks.to_label_volume());
  write_projections(dir / "proj_one", s.proj_one);
  write_projections(dir / "proj_four", s.proj_four);
  write_volume(dir / "mlem_one", s.img_mlem);
  write_volume(dir / "bp_one", s.img_bp);
  write_volume(dir / "mlem_four", s.img_four);
  std::ofstream spec(dir / "spec.json");
  if (!spec) throw IoError("cannot write " + (dir / "spec.json").string());
  spec << to_json(s.spec).dump(2) << '\n';
}

nlohmann::json make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  const auto ops = build_dataset_operators(config.scale);
  nlohmann::json manifest;
  manifest["format"] = "tipnet-dataset";
  manifest["version"] = 1;
  manifest["config"] = to_json(config);
  manifest["subjects"] = nlohmann::json::array();
  for (int i = 0; i < config.n_subjects; ++i) {
    const Sample s = generate_sample(config, ops, i);
    write_sample(s, out_dir / s.id);
    manifest["subjects"].push_back({{"id", s.id},
                                    {"dir", s.id},
                                    {"has_defect", s.has_defect},
                                    {"defect_voxels", s.masks.count(s.masks.defect)},
                                    {"myocardium_voxels", s.masks.count(s.masks.myocardium)},
                                    {"files",
                                     {{"truth", "truth.vol.json"},
                                      {"labels", "labels.vol.json"},
                                      {"proj_one", "proj_one.proj.json"},
                                      {"proj_four", "proj_four.proj.json"},
                                      {"img_mlem", "mlem_one.vol.json"},
                                      {"img_bp", "bp_one.vol.json"},
                                      {"img_four", "mlem_four.vol.json"},
                                      {"spec", "spec.json"}}},
                                    {"spec", to_json(s.spec)}});
    log::info("dataset: wrote " + s.id);
  }
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  return manifest;
}

std::vector<Sample> load_dataset(const std::filesystem::path& path) {
  const auto manifest_path =
      std::filesystem::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read dataset manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", std::string("invalid dataset manifest: ") + e.what());
  }
  const auto root = manifest_path.parent_path();
  std::vector<Sample> out;
  for (const auto& entry : manifest.at("subjects")) {
    const auto dir = root / entry.at("dir").get<std::string>();
    Sample s;
    s.id = entry.at("id").get<std::string>();
    s.has_defect = entry.at("has_defect").get<bool>();
    s.spec = phantom_spec_from_json(entry.at("spec"));
    s.truth = read_volume(dir / "truth");
    s.masks = LabeledMasks::from_label_volume(read_volume(dir / "labels"));
    s.proj_one = read_projections(dir / "proj_one");
    s.proj_four = read_projections(dir / "proj_four");
    s.img_mlem = read_volume(dir / "mlem_one");
    s.img_bp = read_volume(dir / "bp_one");
    s.img_four = read_volume(dir / "mlem_four");
    if (s.has_defect != s.masks.has_defect()) {
      throw DataError("dataset: defect flag of " + s.id + " disagrees with its label volume");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tipnet
