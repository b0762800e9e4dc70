#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "tipnet/error.hpp"
#include "tipnet/metrics.hpp"
#include "tipnet/mlem.hpp"
#include "tipnet/phantom.hpp"

using namespace tipnet;
using testutil::TempDir;

namespace {

const DatasetOperators& desk_ops() {
  static const DatasetOperators ops = build_dataset_operators(Scale::Desk);
  return ops;
}

PhantomSpec centered_spec(const GridSpec& g) {
  std::mt19937_64 rng(3);
  auto spec = random_phantom_spec(rng, g, false);
  spec.defect.reset();
  return spec;
}

double nrmse(std::span<const double> x, const VolumeGrid& truth) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = truth.values()[i];
    num += (x[i] - t) * (x[i] - t);
    den += t * t;
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("defect severity scales uptake between myocardium and background") {
  const auto& g = desk_ops().setup.grid;
  auto spec = centered_spec(g);
  DefectSpec d;
  d.angle_extent_deg = 120.0;
  for (double severity : {0.0, 0.5, 1.0}) {
    d.severity = severity;
    spec.defect = d;
    const auto p = generate_phantom(spec, g);
    REQUIRE(p.masks.has_defect());
    const double want = spec.background_uptake + (spec.myocardium_uptake - spec.background_uptake) * (1.0 - severity);
    for (std::size_t i = 0; i < p.activity.size(); ++i) {
      if (p.masks.defect[i]) CHECK(p.activity.values()[i] == doctest::Approx(want).epsilon(1e-6));
      else if (p.masks.myocardium[i]) CHECK(p.activity.values()[i] == doctest::Approx(spec.myocardium_uptake));
    }
  }
}

TEST_CASE("ground-truth MBP ratio is the uptake ratio") {
  const auto& g = desk_ops().setup.grid;
  auto spec = centered_spec(g);
  spec.myocardium_uptake = 4.0;
  spec.blood_pool_uptake = 1.0;
  const auto p = generate_phantom(spec, g);
  CHECK(mbp_ratio(p.activity, p.masks) == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("masks partition the phantom") {
  const auto& g = desk_ops().setup.grid;
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = generate_phantom(random_phantom_spec(rng, g, trial % 2 == 1), g);
    CHECK_NOTHROW(p.masks.validate());
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
      CHECK_FALSE((p.masks.myocardium[i] && p.masks.blood_pool[i]));
      if (p.masks.defect[i]) CHECK(p.masks.myocardium[i]);
    }
  }
}

TEST_CASE("invalid specs and shells outside the grid are rejected") {
  const auto& g = desk_ops().setup.grid;
  auto spec = centered_spec(g);
  spec.wall_thickness_mm = spec.short_semi_axis_mm + 1.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = centered_spec(g);
  spec.defect = DefectSpec{};
  spec.defect->severity = 1.5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = centered_spec(g);
  spec.lv_center = {1000.0, 0.0, 0.0};
  CHECK_THROWS_AS(generate_phantom(spec, g), DataError);
}

TEST_CASE("phantom spec JSON round trip") {
  const auto& g = desk_ops().setup.grid;
  std::mt19937_64 rng(5);
  const auto spec = random_phantom_spec(rng, g, true);
  CHECK(to_json(phantom_spec_from_json(to_json(spec))) == to_json(spec));
}

TEST_CASE("Poisson total stays within four sigma of the expected counts") {
  const auto& ops = desk_ops();
  const auto p = generate_phantom(centered_spec(ops.setup.grid), ops.setup.grid);
  AcquisitionSpec acq{1e6, 11};
  const auto y = simulate_acquisition(p.activity, ops.s_one, acq);
  const double total = std::accumulate(y.values().begin(), y.values().end(), 0.0);
  CHECK(std::abs(total - 1e6) <= 4.0 * 1e3);
  for (float v : y.values()) CHECK(v == std::floor(v));
}

TEST_CASE("zero activity gives zero counts") {
  const auto& ops = desk_ops();
  const auto y = simulate_acquisition(VolumeGrid(ops.setup.grid), ops.s_one, AcquisitionSpec{});
  for (float v : y.values()) CHECK(v == 0.0f);
}

TEST_CASE("same seed gives the same noise and another seed does not") {
  const auto& ops = desk_ops();
  const auto p = generate_phantom(centered_spec(ops.setup.grid), ops.setup.grid);
  const auto a = simulate_acquisition(p.activity, ops.s_four, AcquisitionSpec{5e5, 9});
  const auto b = simulate_acquisition(p.activity, ops.s_four, AcquisitionSpec{5e5, 9});
  const auto c = simulate_acquisition(p.activity, ops.s_four, AcquisitionSpec{5e5, 10});
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  CHECK_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
  CHECK(a.n_angles() == 4);
}

TEST_CASE("acquisition rejects nonpositive counts") {
  AcquisitionSpec acq;
  acq.counts_per_angle = 0.0;
  CHECK_THROWS_AS(acq.validate(), ConfigError);
}

TEST_CASE("four-angle MLEM beats one-angle MLEM on a noiseless phantom") {
  const auto& ops = desk_ops();
  const auto p = generate_phantom(centered_spec(ops.setup.grid), ops.setup.grid);
  const std::vector<double> x(p.activity.values().begin(), p.activity.values().end());
  std::vector<double> y1(static_cast<std::size_t>(ops.s_one.rows())), y4(static_cast<std::size_t>(ops.s_four.rows()));
  ops.s_one.multiply(x, y1);
  ops.s_four.multiply(x, y4);
  MLEMConfig cfg;
  cfg.n_iters = 50;
  const double e1 = nrmse(mlem_iterate(ops.s_one, y1, cfg), p.activity);
  const double e4 = nrmse(mlem_iterate(ops.s_four, y4, cfg), p.activity);
  MESSAGE("nrmse one " << e1 << " four " << e4);
  CHECK(e4 < e1);
}

TEST_CASE("a four-subject dataset is complete and reproducible") {
  TempDir a("ds"), b("ds");
  DatasetConfig cfg;
  cfg.n_subjects = 4;
  cfg.seed = 21;
  cfg.mlem.n_iters = 10;
  const auto manifest = make_dataset(cfg, a.path());
  make_dataset(cfg, b.path());
  REQUIRE(manifest.at("subjects").size() == 4);
  int defects = 0;
  for (const auto& entry : manifest.at("subjects")) {
    const auto dir = a.path() / entry.at("id").get<std::string>();
    CHECK(std::filesystem::is_directory(dir));
    for (const auto& [key, file] : entry.at("files").items()) {
      const auto header = dir / file.get<std::string>();
      CHECK(std::filesystem::exists(header));
      CHECK(testutil::read_bytes(header) ==
            testutil::read_bytes(b.path() / entry.at("id").get<std::string>() / file.get<std::string>()));
    }
    defects += entry.at("has_defect").get<bool>() ? 1 : 0;
  }
  CHECK(defects == 2);
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    CHECK_MESSAGE(testutil::read_bytes(entry.path()) == testutil::read_bytes(b.path() / rel), rel.string());
  }

  const auto samples = load_dataset(a.path());
  REQUIRE(samples.size() == 4);
  for (const auto& s : samples) {
    CHECK(s.has_defect == s.masks.has_defect());
    CHECK(s.proj_four.n_angles() == 4);
    CHECK(s.proj_one.n_angles() == 1);
    // The stationary acquisition is the first block of the four-angle set.
    CHECK(std::equal(s.proj_one.values().begin(), s.proj_one.values().end(), s.proj_four.values().begin()));
  }
}

TEST_CASE("dataset configuration is validated") {
  DatasetConfig cfg;
  cfg.n_subjects = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  TempDir dir("ds");
  CHECK_THROWS_AS(load_dataset(dir / "absent"), IoError);
}

}  // TEST_SUITE
