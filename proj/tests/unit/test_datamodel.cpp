#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "tipnet/error.hpp"
#include "tipnet/volume.hpp"

using namespace tipnet;
using testutil::TempDir;

TEST_SUITE("datamodel") {

TEST_CASE("zero volume round trip") {
  TempDir dir("dm");
  VolumeGrid v(testutil::grid(2, 2, 2));
  write_volume(dir / "zeros", v);
  const VolumeGrid r = read_volume(dir / "zeros");
  CHECK(r.grid().same_shape(v.grid()));
  for (float x : r.values()) CHECK(x == 0.0f);
}

TEST_CASE("round trip is bit exact for random finite payloads") {
  TempDir dir("dm");
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (int trial = 0; trial < 25; ++trial) {
    std::uniform_int_distribution<int> dim(1, 7);
    GridSpec g = testutil::grid(dim(rng), dim(rng), dim(rng), 0.5 + trial);
    g.center = {1.5 * trial, -2.0, 0.25};
    std::vector<float> vals(g.voxel_count());
    for (float& x : vals) {
      // Arbitrary bit patterns, keeping only finite ones (sign and denormals included).
      do {
        const std::uint32_t b = bits(rng);
        std::memcpy(&x, &b, 4);
      } while (!std::isfinite(x));
    }
    VolumeGrid v(g, vals);
    write_volume(dir / "v", v);
    const VolumeGrid r = read_volume(dir / "v.vol.json");
    REQUIRE(r.size() == v.size());
    CHECK(std::memcmp(r.values().data(), v.values().data(), v.size() * 4) == 0);
    CHECK(r.grid().voxel_size == g.voxel_size);
    CHECK(r.grid().center == g.center);

    ProjectionSet p(dim(rng), dim(rng), dim(rng), {"a0", "a1"});
    for (float& x : p.values()) {
      do {
        const std::uint32_t b = bits(rng);
        std::memcpy(&x, &b, 4);
      } while (!std::isfinite(x));
    }
    write_projections(dir / "p", p);
    const ProjectionSet q = read_projections(dir / "p");
    REQUIRE(q.size() == p.size());
    CHECK(q.angle_ids() == p.angle_ids());
    CHECK(std::memcmp(q.values().data(), p.values().data(), p.size() * 4) == 0);
  }
}

TEST_CASE("header sizes match payload sizes") {
  TempDir dir("dm");
  VolumeGrid v(testutil::grid(3, 4, 5), 1.0f);
  write_volume(dir / "v", v);
  const auto files = volume_files(dir / "v");
  std::ifstream in(files.header);
  const auto header = nlohmann::json::parse(in);
  std::size_t declared = 4;
  for (const auto& d : header.at("dims")) declared *= d.get<std::size_t>();
  CHECK(declared == std::filesystem::file_size(files.payload));
}

TEST_CASE("short payload is a format error") {
  TempDir dir("dm");
  VolumeGrid v(testutil::grid(2, 2, 2), 1.0f);
  write_volume(dir / "v", v);
  const auto files = volume_files(dir / "v");
  std::filesystem::resize_file(files.payload, 28);
  CHECK_THROWS_AS(read_volume(dir / "v"), FormatError);
  std::filesystem::resize_file(files.payload, 36);
  CHECK_THROWS_AS(read_volume(dir / "v"), FormatError);
}

TEST_CASE("full-size volume payload is 980000 bytes") {
  TempDir dir("dm");
  VolumeGrid v(testutil::grid(70, 70, 50, 4.0));
  write_volume(dir / "big", v);
  CHECK(std::filesystem::file_size(volume_files(dir / "big").payload) == 245000u * 4u);
}

TEST_CASE("one-angle projection payload is 77824 bytes") {
  TempDir dir("dm");
  ProjectionSet p(19, 32, 32, {"a0"});
  write_projections(dir / "one", p);
  CHECK(std::filesystem::file_size(projection_files(dir / "one").payload) == 19456u * 4u);
}

TEST_CASE("four-angle set declares four angle ids and 76 module readings") {
  TempDir dir("dm");
  ProjectionSet p(19, 16, 16, {"a0", "a1", "a2", "a3"});
  write_projections(dir / "four", p);
  std::ifstream in(projection_files(dir / "four").header);
  const auto header = nlohmann::json::parse(in);
  CHECK(header.at("angle_ids").size() == 4);
  const ProjectionSet q = read_projections(dir / "four");
  CHECK(q.n_angles() * q.n_modules() == 76);
}

TEST_CASE("empty paths are I/O errors") {
  CHECK_THROWS_AS(read_volume(""), IoError);
  CHECK_THROWS_AS(write_volume("", VolumeGrid(testutil::grid(1, 1, 1))), IoError);
  CHECK_THROWS_AS(read_projections(""), IoError);
  CHECK_THROWS_AS(write_projections("", ProjectionSet(1, 1, 1, {"a0"})), IoError);
}

TEST_CASE("missing files are I/O errors") {
  TempDir dir("dm");
  CHECK_THROWS_AS(read_volume(dir / "absent"), IoError);
}

TEST_CASE("validation rejects non-finite and negative values") {
  VolumeGrid v(testutil::grid(2, 1, 1), 1.0f);
  CHECK_NOTHROW(v.validate());
  v.at(1, 0, 0) = -1.0f;
  CHECK_THROWS_AS(v.validate(), NumericalError);
  CHECK_NOTHROW(v.validate(false));
  v.at(1, 0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(v.validate(false), NumericalError);
}

TEST_CASE("projection index is u fastest then v, module, angle") {
  ProjectionSet p(3, 4, 5, {"a0", "a1"});
  CHECK(p.index(0, 0, 0, 1) == 1);
  CHECK(p.index(0, 0, 1, 0) == 4);
  CHECK(p.index(0, 1, 0, 0) == 20);
  CHECK(p.index(1, 0, 0, 0) == 60);
  p.values()[p.index(1, 2, 3, 1)] = 7.0f;
  const ProjectionSet a1 = p.angle(1);
  CHECK(a1.n_angles() == 1);
  CHECK(a1.values()[a1.index(0, 2, 3, 1)] == 7.0f);
}

TEST_CASE("label volume round trip and mask validation") {
  const GridSpec g = testutil::grid(4, 1, 1);
  LabeledMasks m(g);
  m.myocardium = {1, 1, 0, 0};
  m.blood_pool = {0, 0, 1, 0};
  m.defect = {0, 1, 0, 0};
  CHECK_NOTHROW(m.validate());
  const LabeledMasks r = LabeledMasks::from_label_volume(m.to_label_volume());
  CHECK(r.myocardium == m.myocardium);
  CHECK(r.blood_pool == m.blood_pool);
  CHECK(r.defect == m.defect);
  CHECK(r.has_defect());

  m.blood_pool = {1, 0, 1, 0};
  CHECK_THROWS_AS(m.validate(), DataError);
  m.blood_pool = {0, 0, 1, 0};
  m.defect = {0, 0, 0, 1};
  CHECK_THROWS_AS(m.validate(), DataError);
}

}  // TEST_SUITE
