#include "tipnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "tipnet/error.hpp"

namespace tipnet {

namespace {

void require_same_grid(const char* op, const VolumeGrid& x, const VolumeGrid& y) {
  if (!x.grid().same_shape(y.grid())) throw ShapeError(std::string(op) + ": volume dims differ");
}

/// In-place application of an n x n matrix along one axis of an x-fastest
/// (nx, ny, nz) array.
void filter_axis(std::vector<double>& v, int nx, int ny, int nz, int axis,
                 const std::vector<double>& m) {
  const int dims[3] = {nx, ny, nz};
  const std::size_t strides[3] = {1, static_cast<std::size_t>(nx),
                                  static_cast<std::size_t>(nx) * ny};
  const int n = dims[axis];
  const std::size_t stride = strides[axis];
  std::vector<double> line(static_cast<std::size_t>(n));
  const int a1 = (axis + 1) % 3;
  const int a2 = (axis + 2) % 3;
  for (int p = 0; p < dims[a2]; ++p) {
    for (int q = 0; q < dims[a1]; ++q) {
      const std::size_t base = p * strides[a2] + q * strides[a1];
      for (int i = 0; i < n; ++i) line[i] = v[base + i * stride];
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        const double* row = m.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) acc += row[j] * line[j];
        v[base + i * stride] = acc;
      }
    }
  }
}

std::vector<double> smooth(std::vector<double> v, const GridSpec& g,
                           const std::vector<double>* mats) {
  for (int axis = 0; axis < 3; ++axis) filter_axis(v, g.nx, g.ny, g.nz, axis, mats[axis]);
  return v;
}

nlohmann::json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

}  // namespace

std::vector<double> gaussian_filter_matrix(int n, int window, double sigma) {
  if (n < 1 || window < 1 || !(sigma > 0.0)) {
    throw ConfigError("gaussian filter: n, window and sigma must be positive");
  }
  const int half = window / 2;
  std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int j = std::max(0, i - half); j <= std::min(n - 1, i + half); ++j) {
      const double d = j - i;
      const double w = std::exp(-d * d / (2.0 * sigma * sigma));
      m[static_cast<std::size_t>(i) * n + j] = w;
      total += w;
    }
    for (int j = 0; j < n; ++j) m[static_cast<std::size_t>(i) * n + j] /= total;
  }
  return m;
}

double ssim(const VolumeGrid& x, const VolumeGrid& y, double peak, const SSIMOptions& options) {
  require_same_grid("ssim", x, y);
  if (!(peak > 0.0)) throw DataError("ssim: peak must be positive");
  const GridSpec& g = x.grid();
  const std::vector<double> mats[3] = {
      gaussian_filter_matrix(g.nx, options.window, options.sigma),
      gaussian_filter_matrix(g.ny, options.window, options.sigma),
      gaussian_filter_matrix(g.nz, options.window, options.sigma)};
  const std::size_t n = x.size();
  std::vector<double> xv(n), yv(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xv[i] = x.values()[i];
    yv[i] = y.values()[i];
    xx[i] = xv[i] * xv[i];
    yy[i] = yv[i] * yv[i];
    xy[i] = xv[i] * yv[i];
  }
  const auto mx = smooth(std::move(xv), g, mats);
  const auto my = smooth(std::move(yv), g, mats);
  const auto sxx = smooth(std::move(xx), g, mats);
  const auto syy = smooth(std::move(yy), g, mats);
  const auto sxy = smooth(std::move(xy), g, mats);
  const double c1 = (options.k1 * peak) * (options.k1 * peak);
  const double c2 = (options.k2 * peak) * (options.k2 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(n);
}

double ssim_to_reference(const VolumeGrid& x, const VolumeGrid& reference,
                         const SSIMOptions& options) {
  double peak = 0.0;
  for (float v : reference.values()) peak = std::max(peak, static_cast<double>(v));
  return ssim(x, reference, peak, options);
}

double rmse(const VolumeGrid& x, const VolumeGrid& y) {
  require_same_grid("rmse", x, y);
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x.values()[i]) - y.values()[i];
    total += d * d;
  }
  return std::sqrt(total / static_cast<double>(x.size()));
}

double psnr(const VolumeGrid& x, const VolumeGrid& y, double peak) {
  if (!(peak > 0.0)) throw DataError("psnr: peak must be positive");
  const double e = rmse(x, y);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(peak) - 20.0 * std::log10(e);
}

double mbp_ratio(const VolumeGrid& x, const LabeledMasks& masks) {
  if (masks.myocardium.size() != x.size() || masks.blood_pool.size() != x.size()) {
    throw ShapeError("mbp_ratio: masks do not match the volume");
  }
  double myo = 0.0, pool = 0.0;
  std::size_t n_myo = 0, n_pool = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (masks.myocardium[i]) {
      myo += x.values()[i];
      ++n_myo;
    }
    if (masks.blood_pool[i]) {
      pool += x.values()[i];
      ++n_pool;
    }
  }
  if (n_myo == 0 || n_pool == 0) throw DataError("mbp_ratio: empty myocardium or blood-pool mask");
  return (myo / n_myo) / std::max(pool / n_pool, 1e-8);
}

double defect_size(const VolumeGrid& x, const std::vector<std::uint8_t>& myocardium) {
  if (myocardium.size() != x.size()) throw ShapeError("defect_size: mask does not match volume");
  std::vector<double> v;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (myocardium[i]) v.push_back(x.values()[i]);
  }
  if (v.empty()) throw DataError("defect_size: empty myocardium mask");
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t top = std::max<std::size_t>(1, (sorted.size() + 9) / 10);
  const double norm =
      std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), 0.0) /
      static_cast<double>(top);
  if (!(norm > 0.0)) return 100.0;
  const auto below = std::count_if(v.begin(), v.end(), [norm](double a) { return a / norm < 0.5; });
  return 100.0 * static_cast<double>(below) / static_cast<double>(v.size());
}

double fwhm(std::span<const double> profile, double spacing_mm) {
  if (profile.size() < 3) throw DataError("fwhm: profile needs at least 3 samples");
  if (!(spacing_mm > 0.0)) throw ConfigError("fwhm: spacing must be positive");
  const auto peak_it = std::max_element(profile.begin(), profile.end());
  const double hi = *peak_it;
  const double lo = *std::min_element(profile.begin(), profile.end());
  if (!(hi > lo)) throw DataError("fwhm: flat profile");
  const double half = lo + 0.5 * (hi - lo);
  const auto peak = static_cast<std::ptrdiff_t>(peak_it - profile.begin());
  const auto n = static_cast<std::ptrdiff_t>(profile.size());

  // Crossing between sample a (>= half) and b (< half), as a fractional index.
  auto crossing = [&](std::ptrdiff_t a, std::ptrdiff_t b) {
    const double t = (profile[a] - half) / (profile[a] - profile[b]);
    return static_cast<double>(a) + t * static_cast<double>(b - a);
  };
  std::ptrdiff_t l = peak;
  while (l > 0 && profile[l - 1] >= half) --l;
  if (l == 0) throw DataError("fwhm: profile does not fall below half maximum on the left");
  std::ptrdiff_t r = peak;
  while (r < n - 1 && profile[r + 1] >= half) ++r;
  if (r == n - 1) throw DataError("fwhm: profile does not fall below half maximum on the right");
  return (crossing(r, r + 1) - crossing(l, l - 1)) * spacing_mm;
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.n = values.size();
  if (a.n == 0) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.n);
  // Identical entries (including infinite PSNR of a perfect match) have no spread.
  const bool constant = std::all_of(values.begin(), values.end(),
                                    [&](double v) { return v == values.front(); });
  if (a.n > 1 && !constant) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  }
  return a;
}

Aggregate MethodMetrics::summary(double SubjectMetrics::*field, bool defect_only) const {
  std::vector<double> v;
  for (const auto& s : subjects) {
    if (!defect_only || s.has_defect) v.push_back(s.*field);
  }
  return aggregate(v);
}

const MethodMetrics* MetricReport::find(const std::string& method) const {
  for (const auto& m : methods) {
    if (m.method == method) return &m;
  }
  return nullptr;
}

namespace {

struct FieldName {
  const char* name;
  double SubjectMetrics::*field;
  bool defect_only;
};

constexpr FieldName kFields[] = {
    {"ssim", &SubjectMetrics::ssim, false},
    {"rmse", &SubjectMetrics::rmse, false},
    {"psnr", &SubjectMetrics::psnr, false},
    {"mbp", &SubjectMetrics::mbp, false},
    {"defect_size", &SubjectMetrics::defect_size, true},
};

}  // namespace

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["reference"] = reference;
  j["methods"] = nlohmann::json::array();
  for (const auto& m : methods) {
    nlohmann::json jm;
    jm["method"] = m.method;
    for (const auto& s : m.subjects) {
      jm["subjects"].push_back({{"subject", s.subject},
                                {"has_defect", s.has_defect},
                                {"ssim", finite_or_string(s.ssim)},
                                {"rmse", finite_or_string(s.rmse)},
                                {"psnr", finite_or_string(s.psnr)},
                                {"mbp", finite_or_string(s.mbp)},
                                {"defect_size", finite_or_string(s.defect_size)}});
    }
    for (const auto& f : kFields) {
      const Aggregate a = m.summary(f.field, f.defect_only);
      jm["aggregate"][f.name] = {{"mean", finite_or_string(a.mean)},
                                 {"std", finite_or_string(a.std)},
                                 {"n", a.n}};
    }
    j["methods"].push_back(jm);
  }
  return j;
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "method";
  for (const auto& f : kFields) out << ',' << f.name << "_mean," << f.name << "_std";
  out << '\n';
  for (const auto& m : methods) {
    out << m.method;
    for (const auto& f : kFields) {
      const Aggregate a = m.summary(f.field, f.defect_only);
      out << ',' << a.mean << ',' << a.std;
    }
    out << '\n';
  }
  return out.str();
}

SubjectMetrics evaluate_subject(const std::string& subject, const VolumeGrid& x,
                                const VolumeGrid& reference, const LabeledMasks& masks) {
  double peak = 0.0;
  for (float v : reference.values()) peak = std::max(peak, static_cast<double>(v));
  SubjectMetrics s;
  s.subject = subject;
  s.has_defect = masks.has_defect();
  s.ssim = ssim(x, reference, peak);
  s.rmse = rmse(x, reference);
  s.psnr = psnr(x, reference, peak);
  s.mbp = mbp_ratio(x, masks);
  s.defect_size = defect_size(x, masks.myocardium);
  return s;
}

}  // namespace tipnet
