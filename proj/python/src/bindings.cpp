#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "tipnet/error.hpp"
#include "tipnet/metrics.hpp"
#include "tipnet/mlem.hpp"
#include "tipnet/phantom.hpp"
#include "tipnet/selftest.hpp"
#include "tipnet/training.hpp"

namespace py = pybind11;
using namespace tipnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const VolumeGrid& v) {
  py::array_t<float> out({v.nz(), v.ny(), v.nx()});
  std::copy(v.values().begin(), v.values().end(), out.mutable_data());
  return out;
}

py::array_t<float> to_numpy(const ProjectionSet& p) {
  py::array_t<float> out({p.n_angles(), p.n_modules(), p.nv(), p.nu()});
  std::copy(p.values().begin(), p.values().end(), out.mutable_data());
  return out;
}

GridSpec grid_of(const FloatArray& a, std::array<double, 3> voxel_size = {1.0, 1.0, 1.0},
                 std::array<double, 3> center = {0.0, 0.0, 0.0}) {
  if (a.ndim() != 3) throw ShapeError("expected a (nz, ny, nx) array");
  GridSpec g;
  g.nz = static_cast<int>(a.shape(0));
  g.ny = static_cast<int>(a.shape(1));
  g.nx = static_cast<int>(a.shape(2));
  g.voxel_size = voxel_size;
  g.center = center;
  return g;
}

VolumeGrid volume_of(const FloatArray& a) {
  const GridSpec g = grid_of(a);
  return VolumeGrid(g, std::vector<float>(a.data(), a.data() + a.size()));
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict inference_dict(const InferenceResult& r) {
  py::dict d;
  d["img_p"] = to_numpy(r.img_p);
  d["final"] = to_numpy(r.final);
  return d;
}

/// Standard one-angle and four-angle operators of a scale.
class Operators {
 public:
  explicit Operators(const std::string& scale) : ops_(build_dataset_operators(parse_scale(scale))) {}

  const SystemMatrix& pick(bool four) const { return four ? ops_.s_four : ops_.s_one; }

  py::tuple grid_shape() const {
    const auto& g = ops_.setup.grid;
    return py::make_tuple(g.nz, g.ny, g.nx);
  }

  py::array_t<float> forward(const FloatArray& x, bool four) const {
    const auto& s = pick(four);
    const VolumeGrid v = volume_of(x);
    if (static_cast<std::int64_t>(v.size()) != s.cols()) throw ShapeError("volume does not match the operator grid");
    const std::vector<double> xd(v.values().begin(), v.values().end());
    std::vector<double> y(static_cast<std::size_t>(s.rows()));
    {
      py::gil_scoped_release release;
      s.multiply(xd, y);
    }
    ProjectionSet p(s.n_modules, s.nu, s.nv, s.angle_ids, std::vector<float>(y.begin(), y.end()));
    return to_numpy(p);
  }

  py::array_t<float> back(const FloatArray& y, bool four) const {
    const auto& s = pick(four);
    if (static_cast<std::int64_t>(y.size()) != s.rows()) throw ShapeError("projections do not match the operator");
    const std::vector<double> yd(y.data(), y.data() + y.size());
    std::vector<double> x(static_cast<std::size_t>(s.cols()));
    {
      py::gil_scoped_release release;
      s.multiply_transpose(yd, x);
    }
    return to_numpy(VolumeGrid(ops_.setup.grid, std::vector<float>(x.begin(), x.end())));
  }

  py::array_t<float> mlem(const FloatArray& y, int n_iters, bool four) const {
    const auto& s = pick(four);
    if (static_cast<std::int64_t>(y.size()) != s.rows()) throw ShapeError("projections do not match the operator");
    MLEMConfig cfg;
    cfg.n_iters = n_iters;
    cfg.validate();
    const std::vector<double> yd(y.data(), y.data() + y.size());
    std::vector<double> x;
    {
      py::gil_scoped_release release;
      x = mlem_iterate(s, yd, cfg);
    }
    return to_numpy(VolumeGrid(ops_.setup.grid, std::vector<float>(x.begin(), x.end())));
  }

  py::dict phantom(std::uint64_t seed, bool defect) const {
    std::mt19937_64 rng(seed);
    const auto p = generate_phantom(random_phantom_spec(rng, ops_.setup.grid, defect), ops_.setup.grid);
    py::dict d;
    d["activity"] = to_numpy(p.activity);
    d["labels"] = to_numpy(p.masks.to_label_volume());
    return d;
  }

  double adjoint_residual(int pairs, std::uint64_t seed, bool four) const {
    return adjoint_suite(pick(four), pairs, seed).max_residual;
  }

  std::int64_t rows(bool four) const { return pick(four).rows(); }
  std::int64_t cols() const { return ops_.s_one.cols(); }

 private:
  DatasetOperators ops_;
};

/// A trained generator loaded from a checkpoint stem.
class Model {
 public:
  explicit Model(const std::filesystem::path& checkpoint) {
    const auto meta = read_checkpoint_metadata(checkpoint);
    if (!meta.contains("model")) throw FormatError("metadata", "checkpoint has no model config");
    model_ = std::make_unique<TIPNetModel<float>>(model_config_from_json(meta["model"]));
    load_checkpoint(checkpoint, model_->params());
    meta_ = meta;
  }

  py::dict infer_subject(const std::filesystem::path& data, const std::string& subject) const {
    for (const auto& s : load_dataset(data)) {
      if (s.id != subject) continue;
      InferenceResult r;
      {
        py::gil_scoped_release release;
        r = infer(*model_, s);
      }
      return inference_dict(r);
    }
    throw DataError("no subject " + subject + " in " + data.string());
  }

  py::object metadata() const { return json_to_py(meta_); }
  std::size_t n_params() const { return model_->params().count(); }

 private:
  std::unique_ptr<TIPNetModel<float>> model_;
  nlohmann::json meta_;
};

}  // namespace

PYBIND11_MODULE(_tipnet, m) {
  m.doc() = "Pinhole SPECT reconstruction and refinement";

  // Held for the lifetime of the process; the translator outlives any scope.
  static PyObject* error = py::exception<Error>(m, "Error", PyExc_RuntimeError).release().ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error, (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "read_volume",
      [](const std::filesystem::path& path) {
        const auto v = read_volume(path);
        py::dict meta;
        meta["voxel_size"] = v.grid().voxel_size;
        meta["center"] = v.grid().center;
        return py::make_tuple(to_numpy(v), meta);
      },
      py::arg("path"), "Volume as a (nz, ny, nx) float32 array plus its grid metadata.");
  m.def(
      "write_volume",
      [](const std::filesystem::path& path, const FloatArray& a, std::array<double, 3> voxel_size,
         std::array<double, 3> center) {
        write_volume(path, VolumeGrid(grid_of(a, voxel_size, center), std::vector<float>(a.data(), a.data() + a.size())));
      },
      py::arg("path"), py::arg("volume"), py::arg("voxel_size") = std::array<double, 3>{1.0, 1.0, 1.0},
      py::arg("center") = std::array<double, 3>{0.0, 0.0, 0.0});
  m.def(
      "read_projections",
      [](const std::filesystem::path& path) {
        const auto p = read_projections(path);
        return py::make_tuple(to_numpy(p), p.angle_ids());
      },
      py::arg("path"), "Projections as an (angles, modules, nv, nu) array plus angle ids.");

  m.def(
      "ssim",
      [](const FloatArray& x, const FloatArray& y, std::optional<double> peak) {
        const auto vx = volume_of(x), vy = volume_of(y);
        return peak ? ssim(vx, vy, *peak) : ssim_to_reference(vx, vy);
      },
      py::arg("x"), py::arg("reference"), py::arg("peak") = py::none(),
      "3-D SSIM; the peak defaults to the reference maximum.");
  m.def("rmse", [](const FloatArray& x, const FloatArray& y) { return rmse(volume_of(x), volume_of(y)); });
  m.def(
      "psnr", [](const FloatArray& x, const FloatArray& y, double peak) { return psnr(volume_of(x), volume_of(y), peak); },
      py::arg("x"), py::arg("reference"), py::arg("peak"));
  m.def(
      "defect_size",
      [](const FloatArray& x, const py::array_t<bool, py::array::c_style | py::array::forcecast>& myocardium) {
        if (myocardium.size() != x.size()) throw ShapeError("mask does not match the volume");
        std::vector<std::uint8_t> mask(myocardium.data(), myocardium.data() + myocardium.size());
        return defect_size(volume_of(x), mask);
      },
      py::arg("x"), py::arg("myocardium"));
  m.def(
      "fwhm",
      [](const DoubleArray& profile, double spacing) {
        return fwhm(std::span<const double>(profile.data(), static_cast<std::size_t>(profile.size())), spacing);
      },
      py::arg("profile"), py::arg("spacing_mm") = 1.0);

  py::class_<Operators>(m, "Operators")
      .def(py::init<const std::string&>(), py::arg("scale") = "desk")
      .def_property_readonly("grid_shape", &Operators::grid_shape)
      .def_property_readonly("n_voxels", &Operators::cols)
      .def("n_bins", &Operators::rows, py::arg("four") = false)
      .def("forward", &Operators::forward, py::arg("x"), py::arg("four") = false)
      .def("back", &Operators::back, py::arg("y"), py::arg("four") = false)
      .def("mlem", &Operators::mlem, py::arg("y"), py::arg("n_iters") = 50, py::arg("four") = false)
      .def("phantom", &Operators::phantom, py::arg("seed"), py::arg("defect") = false)
      .def("adjoint_residual", &Operators::adjoint_residual, py::arg("pairs") = 20, py::arg("seed") = 1,
           py::arg("four") = false);

  m.def(
      "make_dataset",
      [](const std::filesystem::path& out, int n_subjects, std::uint64_t seed, const std::string& scale, int mlem_iters) {
        DatasetConfig cfg;
        cfg.n_subjects = n_subjects;
        cfg.seed = seed;
        cfg.scale = parse_scale(scale);
        cfg.mlem.n_iters = mlem_iters;
        nlohmann::json manifest;
        {
          py::gil_scoped_release release;
          manifest = make_dataset(cfg, out);
        }
        return json_to_py(manifest);
      },
      py::arg("out_dir"), py::arg("n_subjects") = 64, py::arg("seed") = 1, py::arg("scale") = "desk",
      py::arg("mlem_iters") = 50, "Writes a synthetic dataset and returns its manifest.");

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def_property_readonly("metadata", &Model::metadata)
      .def_property_readonly("n_params", &Model::n_params)
      .def("infer", &Model::infer_subject, py::arg("data_dir"), py::arg("subject"));
}
