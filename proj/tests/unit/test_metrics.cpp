#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tipnet/error.hpp"
#include "tipnet/metrics.hpp"

using namespace tipnet;

namespace {

// Straight 3-D window sum, weights normalized over the in-bounds taps.
double ssim_oracle(const VolumeGrid& x, const VolumeGrid& y, double peak) {
  const int r = 5;
  const double sigma = 1.5;
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  const GridSpec& g = x.grid();
  double total = 0.0;
  for (int k = 0; k < g.nz; ++k) {
    for (int j = 0; j < g.ny; ++j) {
      for (int i = 0; i < g.nx; ++i) {
        double ws = 0.0, mx = 0.0, my = 0.0, xx = 0.0, yy = 0.0, xy = 0.0;
        for (int c = -r; c <= r; ++c) {
          for (int b = -r; b <= r; ++b) {
            for (int a = -r; a <= r; ++a) {
              const int ii = i + a, jj = j + b, kk = k + c;
              if (ii < 0 || jj < 0 || kk < 0 || ii >= g.nx || jj >= g.ny || kk >= g.nz) continue;
              const double w = std::exp(-(a * a + b * b + c * c) / (2.0 * sigma * sigma));
              const double xv = x.at(ii, jj, kk), yv = y.at(ii, jj, kk);
              ws += w;
              mx += w * xv;
              my += w * yv;
              xx += w * xv * xv;
              yy += w * yv * yv;
              xy += w * xv * yv;
            }
          }
        }
        mx /= ws;
        my /= ws;
        const double vx = xx / ws - mx * mx, vy = yy / ws - my * my, cov = xy / ws - mx * my;
        total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
  }
  return total / static_cast<double>(g.voxel_count());
}

LabeledMasks two_region_masks(const GridSpec& g) {
  LabeledMasks m(g);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    if (i % 3 == 0) m.myocardium[i] = 1;
    else if (i % 3 == 1) m.blood_pool[i] = 1;
  }
  return m;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("ssim of a volume with itself is one") {
  std::mt19937_64 rng(1);
  const auto x = testutil::random_volume(testutil::grid(9, 8, 7), rng);
  CHECK(ssim(x, x, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim of two constants follows the closed form") {
  const GridSpec g = testutil::grid(6, 6, 6);
  const double c1 = 1e-4;
  CHECK(std::abs(ssim(VolumeGrid(g, 0.0f), VolumeGrid(g, 1.0f), 1.0) - c1 / (1.0 + c1)) <= 1e-9);
  // (2 m1 m2 + C1) / (m1^2 + m2^2 + C1) for two nonzero constants.
  const double m1 = 0.5, m2 = 2.0, peak = 2.0, cc = (0.01 * peak) * (0.01 * peak);
  const double want = (2 * m1 * m2 + cc) / (m1 * m1 + m2 * m2 + cc);
  CHECK(std::abs(ssim(VolumeGrid(g, 0.5f), VolumeGrid(g, 2.0f), peak) - want) <= 1e-9);
}

TEST_CASE("ssim matches a brute-force implementation and orders methods alike") {
  std::mt19937_64 rng(2);
  const GridSpec g = testutil::grid(24, 24, 16);
  const auto ref = testutil::random_volume(g, rng, 0.0, 4.0);
  std::vector<std::pair<double, double>> scores;
  for (double noise : {0.1, 0.5, 1.5}) {
    VolumeGrid x = ref;
    std::normal_distribution<double> n(0.0, noise);
    for (float& v : x.values()) v = std::max(0.0f, static_cast<float>(v + n(rng)));
    const double peak = 4.0;
    const double fast = ssim(x, ref, peak), slow = ssim_oracle(x, ref, peak);
    CHECK(std::abs(fast - slow) <= 1e-6);
    scores.emplace_back(fast, slow);
  }
  for (std::size_t i = 1; i < scores.size(); ++i) {
    CHECK(scores[i].first < scores[i - 1].first);
    CHECK(scores[i].second < scores[i - 1].second);
  }
}

TEST_CASE("ssim is symmetric") {
  std::mt19937_64 rng(3);
  const GridSpec g = testutil::grid(10, 9, 8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = testutil::random_volume(g, rng), y = testutil::random_volume(g, rng);
    CHECK(std::abs(ssim(x, y, 1.0) - ssim(y, x, 1.0)) <= 1e-9);
  }
}

TEST_CASE("ssim peak comes from the reference") {
  std::mt19937_64 rng(4);
  const GridSpec g = testutil::grid(8, 8, 8);
  const auto x = testutil::random_volume(g, rng), ref = testutil::random_volume(g, rng, 0.0, 3.0);
  CHECK(ssim_to_reference(x, ref) == ssim(x, ref, *std::max_element(ref.values().begin(), ref.values().end())));
}

TEST_CASE("ssim rejects shape mismatch") {
  CHECK_THROWS_AS(ssim(VolumeGrid(testutil::grid(3, 3, 3)), VolumeGrid(testutil::grid(3, 3, 4)), 1.0), ShapeError);
}

TEST_CASE("rmse and psnr") {
  const GridSpec g = testutil::grid(4, 4, 4);
  const VolumeGrid a(g, 0.5f), b(g, 0.6f);
  CHECK(rmse(a, a) == 0.0);
  CHECK(psnr(a, a, 1.0) == std::numeric_limits<double>::infinity());
  CHECK(rmse(a, b) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK_THROWS_AS(rmse(a, VolumeGrid(testutil::grid(4, 4, 3))), ShapeError);
}

TEST_CASE("psnr falls as rmse grows") {
  const GridSpec g = testutil::grid(4, 4, 4);
  const VolumeGrid a(g, 0.0f);
  double prev_rmse = 0.0, prev_psnr = std::numeric_limits<double>::infinity();
  for (float e : {0.01f, 0.05f, 0.2f, 0.7f, 2.0f}) {
    const VolumeGrid b(g, e);
    const double r = rmse(a, b), p = psnr(a, b, 1.0);
    CHECK(r > prev_rmse);
    CHECK(p < prev_psnr);
    prev_rmse = r;
    prev_psnr = p;
  }
}

TEST_CASE("MBP ratio") {
  const GridSpec g = testutil::grid(6, 5, 4);
  const auto m = two_region_masks(g);
  VolumeGrid x(g, 0.2f);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (m.myocardium[i]) x.values()[i] = 4.0f;
    if (m.blood_pool[i]) x.values()[i] = 1.0f;
  }
  CHECK(mbp_ratio(x, m) == doctest::Approx(4.0));
  CHECK(mbp_ratio(VolumeGrid(g, 3.0f), m) == doctest::Approx(1.0));
  LabeledMasks empty(g);
  CHECK_THROWS_AS(mbp_ratio(x, empty), DataError);
}

TEST_CASE("defect size of uniform and half-empty walls") {
  const GridSpec g = testutil::grid(10, 2, 1);
  std::vector<std::uint8_t> wall(g.voxel_count(), 1);
  VolumeGrid x(g, 3.0f);
  CHECK(defect_size(x, wall) == 0.0);
  for (int i = 0; i < 10; ++i) x.at(i, 0, 0) = 0.0f;
  CHECK(defect_size(x, wall) == doctest::Approx(50.0));
  CHECK_THROWS_AS(defect_size(x, std::vector<std::uint8_t>(g.voxel_count(), 0)), DataError);
}

TEST_CASE("deepening a defect never shrinks it") {
  std::mt19937_64 rng(5);
  const GridSpec g = testutil::grid(12, 12, 4);
  std::vector<std::uint8_t> wall(g.voxel_count(), 1);
  auto base = testutil::random_volume(g, rng, 3.0, 4.0);
  double prev = -1.0;
  for (double depth : {0.0, 0.2, 0.4, 0.55, 0.7, 0.9, 1.0}) {
    VolumeGrid x = base;
    for (int k = 0; k < g.nz; ++k) {
      for (int j = 0; j < 6; ++j) {
        for (int i = 0; i < 6; ++i) x.at(i, j, k) = static_cast<float>(x.at(i, j, k) * (1.0 - depth));
      }
    }
    const double d = defect_size(x, wall);
    CHECK(d >= prev);
    prev = d;
  }
  CHECK(prev == doctest::Approx(25.0));
}

TEST_CASE("FWHM of a triangle and a Gaussian") {
  const std::vector<double> tri{0.0, 0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25, 0.0};
  CHECK(fwhm(tri, 1.0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(fwhm(tri, 2.5) == doctest::Approx(10.0).epsilon(1e-12));

  const double sigma = 2.0, dx = 0.1;
  std::vector<double> gauss;
  for (int i = -150; i <= 150; ++i) gauss.push_back(std::exp(-(i * dx) * (i * dx) / (2 * sigma * sigma)));
  const double analytic = 2.0 * std::sqrt(2.0 * std::log(2.0)) * sigma;
  CHECK(std::abs(fwhm(gauss, dx) - analytic) <= 0.02 * analytic);
}

TEST_CASE("FWHM of a flat profile is an error") {
  const std::vector<double> flat(10, 2.0);
  CHECK_THROWS_AS(fwhm(flat, 1.0), DataError);
}

TEST_CASE("aggregates are recomputable from subjects") {
  const std::vector<double> v{1.0, 2.0, 4.0};
  const auto a = aggregate(v);
  CHECK(a.n == 3);
  CHECK(a.mean == doctest::Approx(7.0 / 3.0));
  CHECK(a.std == doctest::Approx(std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                            (4 - 7.0 / 3) * (4 - 7.0 / 3)) / 2.0)));
  const std::vector<double> one{5.0};
  CHECK(aggregate(one).std == 0.0);
  const std::vector<double> infs{INFINITY, INFINITY};
  CHECK(aggregate(infs).std == 0.0);

  const GridSpec g = testutil::grid(8, 8, 8);
  std::mt19937_64 rng(6);
  auto m = two_region_masks(g);
  MetricReport report;
  report.reference = "ref";
  MethodMetrics mm;
  mm.method = "m";
  for (int s = 0; s < 3; ++s) {
    const auto ref = testutil::random_volume(g, rng, 0.5, 2.0), x = testutil::random_volume(g, rng, 0.5, 2.0);
    mm.subjects.push_back(evaluate_subject("s" + std::to_string(s), x, ref, m));
  }
  report.methods.push_back(mm);
  const auto j = report.to_json();
  const auto* found = report.find("m");
  REQUIRE(found != nullptr);
  std::vector<double> ssims;
  for (const auto& s : found->subjects) ssims.push_back(s.ssim);
  CHECK(found->summary(&SubjectMetrics::ssim).mean == doctest::Approx(aggregate(ssims).mean));
  CHECK(report.find("other") == nullptr);
  CHECK(!report.to_csv().empty());
  CHECK(j.dump().find("\"m\"") != std::string::npos);
}

TEST_CASE("identical prediction scores perfectly") {
  std::mt19937_64 rng(7);
  const GridSpec g = testutil::grid(8, 8, 8);
  const auto ref = testutil::random_volume(g, rng, 0.5, 2.0);
  const auto s = evaluate_subject("a", ref, ref, two_region_masks(g));
  CHECK(s.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.rmse == 0.0);
  CHECK(std::isinf(s.psnr));
}

}  // TEST_SUITE
