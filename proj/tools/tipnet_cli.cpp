#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/config.hpp"
#include "tipnet/error.hpp"
#include "tipnet/geometry.hpp"
#include "tipnet/log.hpp"
#include "tipnet/metrics.hpp"
#include "tipnet/mlem.hpp"
#include "tipnet/params.hpp"
#include "tipnet/phantom.hpp"
#include "tipnet/render.hpp"
#include "tipnet/selftest.hpp"
#include "tipnet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tipnet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Geometry:
    case ErrorKind::Shape:
      return kExitConfig;
    case ErrorKind::Numerical:
    case ErrorKind::Reconstruction:
      return kExitNumerical;
    case ErrorKind::Format:
    case ErrorKind::Io:
    case ErrorKind::Data:
      return kExitIo;
  }
  return 1;
}

int report_error(const std::string& kind, const std::string& message, int code) {
  json err = {{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
  std::cerr << err.dump() << '\n';
  return code;
}

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string scale;
  std::string out;
  bool verbose = false;
};

RunConfig resolve(const GlobalOptions& g) {
  RunOverrides o;
  o.seed = g.seed;
  if (!g.scale.empty()) o.scale = parse_scale(g.scale);
  if (g.config.empty()) return resolve_run_config(json::object(), o);
  return load_run_config(g.config, o);
}

fs::path require_out(const GlobalOptions& g, const char* command) {
  if (g.out.empty()) throw ConfigError(std::string(command) + ": --out is required");
  return g.out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

AngleSet angle_set_for(const ScaleSetup& setup, const std::string& name) {
  if (name == "one") return stationary_angle_set();
  if (name == "four") return four_angle_set(setup.four_angle_step_deg);
  throw ConfigError("unknown angle set '" + name + "' (expected one or four)");
}

void check_volume_grid(const VolumeGrid& v, const GridSpec& grid, const std::string& what) {
  if (!v.grid().same_shape(grid)) {
    throw ShapeError(what + " is " + std::to_string(v.nx()) + "x" + std::to_string(v.ny()) + "x" +
                     std::to_string(v.nz()) + ", the configured scale expects " +
                     std::to_string(grid.nx) + "x" + std::to_string(grid.ny) + "x" +
                     std::to_string(grid.nz));
  }
}

fs::path dataset_path(const std::string& flag, const fs::path& configured, const char* command) {
  if (!flag.empty()) return flag;
  if (!configured.empty()) return configured;
  throw ConfigError(std::string(command) + ": no dataset given (--data or dataset.path)");
}

/// Trailing `holdout` subjects, or all of them.
std::vector<Sample> select_subjects(std::vector<Sample> data, const std::string& which, int holdout) {
  if (which == "all") return data;
  if (which != "holdout") throw ConfigError("--subjects must be holdout or all");
  if (holdout < 1 || holdout > static_cast<int>(data.size())) {
    throw ConfigError("holdout of " + std::to_string(holdout) + " does not fit a dataset of " +
                      std::to_string(data.size()) + " subjects");
  }
  return {data.end() - holdout, data.end()};
}

void check_dataset_scale(const std::vector<Sample>& data, const RunConfig& cfg) {
  const auto grid = scale_setup(cfg.scale).grid;
  for (const auto& s : data) check_volume_grid(s.img_mlem, grid, "subject " + s.id);
}

// ---- subcommands ----------------------------------------------------------

struct PhantomArgs {
  std::optional<int> n_subjects;
};

int run_phantom(const GlobalOptions& g, const PhantomArgs& a) {
  RunConfig cfg = resolve(g);
  if (a.n_subjects) cfg.dataset.n_subjects = *a.n_subjects;
  const fs::path out = require_out(g, "phantom");
  cfg.data_dir = out;
  cfg.validate();
  ensure_dir(out);
  const json manifest = make_dataset(cfg.dataset, out);
  write_effective_config(cfg, out);
  int defects = 0;
  for (const auto& s : manifest["subjects"]) defects += s["has_defect"].get<bool>() ? 1 : 0;
  std::cout << json{{"command", "phantom"}, {"out", out.string()},
                    {"subjects", manifest["subjects"].size()}, {"defect_subjects", defects}}
                   .dump()
            << '\n';
  return 0;
}

struct ProjectArgs {
  std::string volume;
  std::string angles = "one";
  std::optional<double> counts;
};

int run_project(const GlobalOptions& g, const ProjectArgs& a) {
  const RunConfig cfg = resolve(g);
  const fs::path out = require_out(g, "project");
  const auto setup = scale_setup(cfg.scale);
  const VolumeGrid x = read_volume(a.volume);
  check_volume_grid(x, setup.grid, "volume");
  const auto s = build_system_matrix(build_geometry(setup.geometry),
                                     angle_set_for(setup, a.angles), setup.grid);
  const ProjectionSet y = a.counts ? simulate_acquisition(x, s, {*a.counts, cfg.seed})
                                   : forward_project(s, x);
  ensure_parent(out);
  write_projections(out, y);
  double total = 0.0;
  for (float v : y.values()) total += v;
  std::cout << json{{"command", "project"}, {"out", out.string()}, {"angles", y.n_angles()},
                    {"bins", y.size()}, {"total_counts", total}, {"noisy", a.counts.has_value()}}
                   .dump()
            << '\n';
  return 0;
}

struct MlemArgs {
  std::string projections;
  std::optional<int> iterations;
};

int run_mlem(const GlobalOptions& g, const MlemArgs& a) {
  const RunConfig cfg = resolve(g);
  const fs::path out = require_out(g, "mlem");
  const auto setup = scale_setup(cfg.scale);
  const ProjectionSet y = read_projections(a.projections);
  const auto& geo = setup.geometry;
  if (y.n_modules() != geo.n_modules || y.nu() != geo.nu || y.nv() != geo.nv) {
    throw ShapeError("projections do not match the " + std::string(to_string(cfg.scale)) +
                     " detector");
  }
  AngleSet angles;
  if (y.n_angles() == 1) angles = stationary_angle_set();
  else if (y.n_angles() == 4) angles = four_angle_set(setup.four_angle_step_deg);
  else throw ShapeError("projections must hold 1 or 4 angular positions");
  const auto s = build_system_matrix(build_geometry(geo), angles, setup.grid);
  MLEMConfig mc = cfg.dataset.mlem;
  if (a.iterations) mc.n_iters = *a.iterations;
  mc.validate();
  std::vector<double> y64(y.values().begin(), y.values().end());
  const double eps = mlem_epsilon(mc, y64);
  double loglik = 0.0;
  const VolumeGrid x = mlem_reconstruct(s, y, mc, [&](int it, std::span<const double> est) {
    if (it == mc.n_iters) loglik = poisson_loglik(s, est, y64, eps);
  });
  ensure_parent(out);
  write_volume(out, x);
  std::cout << json{{"command", "mlem"}, {"out", out.string()}, {"iterations", mc.n_iters},
                    {"angles", y.n_angles()}, {"loglik", loglik}}
                   .dump()
            << '\n';
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string pretrain;
  std::optional<int> steps;
  std::optional<int> fold;
};

int run_train(const GlobalOptions& g, const TrainArgs& a) {
  RunConfig cfg = resolve(g);
  const fs::path out = require_out(g, "train");
  cfg.data_dir = dataset_path(a.data, cfg.data_dir, "train");
  if (!a.pretrain.empty()) cfg.pretrain_dir = a.pretrain;
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.fold) cfg.train.fold_index = *a.fold;
  cfg.validate();

  const auto data = load_dataset(cfg.data_dir);
  check_dataset_scale(data, cfg);
  if (cfg.holdout >= static_cast<int>(data.size())) {
    throw ConfigError("holdout of " + std::to_string(cfg.holdout) + " leaves no training subjects");
  }
  const std::vector<Sample> train_set(data.begin(), data.end() - cfg.holdout);
  std::optional<std::vector<Sample>> pretrain;
  if (!cfg.pretrain_dir.empty()) {
    pretrain = load_dataset(cfg.pretrain_dir);
    check_dataset_scale(*pretrain, cfg);
  }

  ensure_dir(out);
  write_effective_config(cfg, out);
  TIPNetModel<float> model(cfg.model);
  initialize_model(model, cfg.train.seed);
  TrainOutputs outputs;
  outputs.dir = out;
  if (g.verbose) {
    outputs.on_record = [](const json& r) {
      if (r.value("kind", "") == "generator") std::cerr << format_record(r) << '\n';
    };
  }
  const TrainResult result =
      train(train_set, model, cfg.train, outputs, pretrain ? &*pretrain : nullptr);

  json summary = {{"command", "train"},
                  {"out", out.string()},
                  {"train_subjects", train_set.size()},
                  {"records", result.log.size()},
                  {"checkpoint", result.checkpoints.empty() ? "" : result.checkpoints.back().string()}};
  if (result.fold_metrics) {
    summary["fold"] = {{"subject", result.fold_metrics->subject}, {"ssim", result.fold_metrics->ssim}};
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string data;
  std::string subjects = "holdout";
};

int run_infer(const GlobalOptions& g, const InferArgs& a) {
  RunConfig cfg = resolve(g);
  const fs::path out = require_out(g, "infer");
  cfg.data_dir = dataset_path(a.data, cfg.data_dir, "infer");
  const json meta = read_checkpoint_metadata(a.checkpoint);
  if (!meta.contains("model")) throw FormatError("metadata", "checkpoint has no model config");
  TIPNetModel<float> model(model_config_from_json(meta["model"]));
  load_checkpoint(a.checkpoint, model.params());

  const auto subjects = select_subjects(load_dataset(cfg.data_dir), a.subjects, cfg.holdout);
  ensure_dir(out);
  json written = json::array();
  for (const auto& s : subjects) {
    if (s.img_mlem.nx() != model.config().nx || s.img_mlem.ny() != model.config().ny ||
        s.img_mlem.nz() != model.config().nz) {
      throw ShapeError("subject " + s.id + " does not match the checkpoint's grid");
    }
    const InferenceResult r = infer(model, s);
    ensure_dir(out / s.id);
    write_volume(out / s.id / "img_p", r.img_p);
    write_volume(out / s.id / "final", r.final);
    written.push_back(s.id);
  }
  write_effective_config(cfg, out);
  std::cout << json{{"command", "infer"}, {"out", out.string()}, {"subjects", written}}.dump()
            << '\n';
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string pred;
  std::string subjects = "holdout";
};

int run_eval(const GlobalOptions& g, const EvalArgs& a) {
  RunConfig cfg = resolve(g);
  const fs::path out = require_out(g, "eval");
  cfg.data_dir = dataset_path(a.data, cfg.data_dir, "eval");
  const auto subjects = select_subjects(load_dataset(cfg.data_dir), a.subjects, cfg.holdout);

  MetricReport report;
  report.reference = "mlem_four";
  MethodMetrics mlem{"mlem_one", {}}, img_p{"img_p", {}}, net{"tipnet", {}}, four{"mlem_four", {}};
  for (const auto& s : subjects) {
    mlem.subjects.push_back(evaluate_subject(s.id, s.img_mlem, s.img_four, s.masks));
    four.subjects.push_back(evaluate_subject(s.id, s.img_four, s.img_four, s.masks));
    if (!a.pred.empty()) {
      const fs::path dir = fs::path(a.pred) / s.id;
      const VolumeGrid p = read_volume(dir / "img_p");
      const VolumeGrid f = read_volume(dir / "final");
      check_volume_grid(p, s.img_four.grid(), "img_p of " + s.id);
      check_volume_grid(f, s.img_four.grid(), "final of " + s.id);
      img_p.subjects.push_back(evaluate_subject(s.id, p, s.img_four, s.masks));
      net.subjects.push_back(evaluate_subject(s.id, f, s.img_four, s.masks));
    }
  }
  report.methods.push_back(std::move(mlem));
  if (!a.pred.empty()) {
    report.methods.push_back(std::move(img_p));
    report.methods.push_back(std::move(net));
  }
  report.methods.push_back(std::move(four));

  ensure_dir(out);
  write_json(out / "metrics.json", report.to_json());
  {
    std::ofstream csv(out / "metrics.csv");
    if (!csv) throw IoError("cannot write " + (out / "metrics.csv").string());
    csv << report.to_csv();
  }
  write_effective_config(cfg, out);

  json summary = {{"command", "eval"}, {"out", out.string()}, {"subjects", subjects.size()}};
  for (const auto& m : report.methods) {
    summary["methods"][m.method] = {
        {"ssim", m.summary(&SubjectMetrics::ssim).mean},
        {"rmse", m.summary(&SubjectMetrics::rmse).mean},
        {"defect_size", m.summary(&SubjectMetrics::defect_size, true).mean}};
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

struct RenderArgs {
  std::vector<std::string> volumes;
  std::string view = "both";
  int columns = 0;
};

int run_render(const GlobalOptions& g, const RenderArgs& a) {
  const fs::path out = require_out(g, "render");
  std::vector<View> views;
  if (a.view == "both") views = {View::ShortAxis, View::LongAxis};
  else views = {parse_view(a.view)};

  std::vector<VolumeGrid> vols;
  for (const auto& p : a.volumes) vols.push_back(read_volume(p));
  std::vector<const VolumeGrid*> ptrs;
  for (const auto& v : vols) ptrs.push_back(&v);
  const Window window = shared_window(ptrs);

  // One row of tiles per (view, volume).
  std::vector<Image8> rows;
  for (View view : views) {
    for (const auto& v : vols) rows.push_back(slice_grid(v, view, window, a.columns));
  }
  ensure_parent(out);
  write_image(out, stack_images(rows));
  std::cout << json{{"command", "render"}, {"out", out.string()}, {"window", {window.lo, window.hi}},
                    {"volumes", a.volumes.size()}}
                   .dump()
            << '\n';
  return 0;
}

struct SelftestArgs {
  int pairs = 20;
  int phantoms = 3;
  int iterations = 50;
  bool quick = false;
};

int run_selftest(const GlobalOptions& g, const SelftestArgs& a) {
  const RunConfig cfg = resolve(g);
  if (a.pairs < 1 || a.phantoms < 1 || a.iterations < 1) {
    throw ConfigError("selftest: --pairs, --phantoms and --iterations must be positive");
  }
  constexpr double kAdjointTol = 1e-5;
  constexpr double kMonotoneTol = 1e-9;
  bool ok = true;
  json results = json::array();
  auto emit = [&](json r) {
    ok = ok && r["pass"].get<bool>();
    std::cout << r.dump() << '\n' << std::flush;
    results.push_back(std::move(r));
  };

  const auto ops = build_dataset_operators(cfg.scale);
  for (const auto* s : {&ops.s_one, &ops.s_four}) {
    const AdjointReport r = adjoint_suite(*s, a.pairs, cfg.seed);
    json j = to_json(r);
    j["check"] = "adjoint";
    j["operator"] = s == &ops.s_one ? "one" : "four";
    j["tolerance"] = kAdjointTol;
    j["pass"] = r.max_residual <= kAdjointTol;
    j.erase("residuals");
    emit(std::move(j));
  }

  const MonotonicityReport m = mlem_monotonicity(ops, a.phantoms, a.iterations,
                                                 cfg.dataset.counts_per_angle, cfg.seed);
  json mj = to_json(m);
  mj.erase("loglik");
  mj["check"] = "mlem_monotonicity";
  mj["tolerance"] = kMonotoneTol;
  mj["pass"] = m.nonnegative && m.worst_relative_drop <= kMonotoneTol;
  emit(std::move(mj));

  GradientSuiteOptions go;
  go.model = !a.quick;
  go.seed = cfg.seed;
  for (const auto& c : gradient_suite(go)) {
    json j = to_json(c);
    j["check"] = "gradient";
    j["tolerance"] = gradient_tolerance(c.dtype);
    j["pass"] = c.max_rel_error <= gradient_tolerance(c.dtype);
    emit(std::move(j));
  }

  if (!g.out.empty()) {
    ensure_dir(g.out);
    write_json(fs::path(g.out) / "selftest.json", {{"pass", ok}, {"checks", results}});
    write_effective_config(cfg, g.out);
  }
  std::cout << json{{"command", "selftest"}, {"pass", ok}}.dump() << '\n';
  return ok ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-view cardiac SPECT reconstruction toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "Seed for every random stream (overrides the config)");
  app.add_option("--scale", g.scale, "Working scale")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("-v,--verbose", g.verbose, "Progress messages on stderr");

  PhantomArgs phantom;
  auto* c_phantom = app.add_subcommand("phantom", "Generate a phantom dataset directory");
  c_phantom->add_option("--n-subjects", phantom.n_subjects, "Subjects to generate");

  ProjectArgs project;
  auto* c_project = app.add_subcommand("project", "Forward-project a volume");
  c_project->add_option("--volume", project.volume, "Input volume")->required();
  c_project->add_option("--angles", project.angles, "Angular positions")
      ->check(CLI::IsMember({"one", "four"}));
  c_project->add_option("--counts", project.counts,
                        "Counts in the first angular block; enables Poisson noise");

  MlemArgs mlem;
  auto* c_mlem = app.add_subcommand("mlem", "Reconstruct projections with MLEM");
  c_mlem->add_option("--projections", mlem.projections, "Input projections")->required();
  c_mlem->add_option("--iterations", mlem.iterations, "Iteration count (overrides mlem.n_iters)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the reconstruction network");
  c_train->add_option("--data", tr.data, "Dataset directory (overrides dataset.path)");
  c_train->add_option("--pretrain", tr.pretrain, "Pre-training dataset directory");
  c_train->add_option("--steps", tr.steps, "Generator steps (overrides train.steps)");
  c_train->add_option("--fold", tr.fold, "Training subject held out and evaluated");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Write IMG_p and final volumes from a checkpoint");
  c_infer->add_option("--checkpoint", inf.checkpoint, "Checkpoint stem")->required();
  c_infer->add_option("--data", inf.data, "Dataset directory (overrides dataset.path)");
  c_infer->add_option("--subjects", inf.subjects, "Subjects to process")
      ->check(CLI::IsMember({"holdout", "all"}));

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Metrics against the four-angle reference");
  c_eval->add_option("--data", ev.data, "Dataset directory (overrides dataset.path)");
  c_eval->add_option("--pred", ev.pred, "Directory written by infer");
  c_eval->add_option("--subjects", ev.subjects, "Subjects to evaluate")
      ->check(CLI::IsMember({"holdout", "all"}));

  RenderArgs rd;
  auto* c_render = app.add_subcommand("render", "Slice grids of one or more volumes as PNG or PGM");
  c_render->add_option("--volume", rd.volumes, "Volume (repeat to stack rows)")->required();
  c_render->add_option("--view", rd.view, "Slice orientation")
      ->check(CLI::IsMember({"short", "long", "both"}));
  c_render->add_option("--columns", rd.columns, "Tiles per row (0: one row)");

  SelftestArgs st;
  auto* c_selftest = app.add_subcommand("selftest", "Adjoint, gradient and MLEM monotonicity checks");
  c_selftest->add_option("--pairs", st.pairs, "Random adjoint pairs per operator");
  c_selftest->add_option("--phantoms", st.phantoms, "Noisy phantoms for the monotonicity check");
  c_selftest->add_option("--iterations", st.iterations, "MLEM iterations per phantom");
  c_selftest->add_flag("--quick", st.quick, "Skip the network-level gradient checks");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("config", e.what(), kExitConfig);
  }

  if (g.verbose) {
    log::set_sink([](log::Level, const std::string& m) { std::cerr << m << '\n'; });
  }

  try {
    if (*c_phantom) return run_phantom(g, phantom);
    if (*c_project) return run_project(g, project);
    if (*c_mlem) return run_mlem(g, mlem);
    if (*c_train) return run_train(g, tr);
    if (*c_infer) return run_infer(g, inf);
    if (*c_eval) return run_eval(g, ev);
    if (*c_render) return run_render(g, rd);
    if (*c_selftest) return run_selftest(g, st);
  } catch (const Error& e) {
    return report_error(to_string(e.kind()), e.what(), exit_code(e.kind()));
  } catch (const nlohmann::json::exception& e) {
    return report_error("format", e.what(), kExitIo);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return 0;
}
