#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "qpat/edge_detect.hpp"
#include "qpat/error.hpp"
#include "qpat/estimate.hpp"
#include "qpat/fem.hpp"
#include "qpat/phantom.hpp"
#include "qpat/scale_space.hpp"
#include "qpat/segment.hpp"
#include "qpat/volume.hpp"

namespace qpat {

inline constexpr const char* library_version = "0.3.0";

/// Raised by the pipeline; carries the name of the stage that failed.
class StageError : public Error {
public:
  StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

private:
  std::string stage_;
};

// Fixed offsets from the master seed.
inline std::uint64_t measurement_seed(std::uint64_t master, std::size_t k) { return master + 1000u + k; }
inline std::uint64_t estimation_seed(std::uint64_t master) { return master + 2000u; }

struct PipelineConfig {
  std::string phantom_path;
  PhantomSpec phantom;
  std::vector<std::string> illuminations{"uniform"};
  double noise_level = 0.0;
  std::uint64_t seed = 0;
  double cg_tolerance = 1e-10;
  long max_iterations = 20000;
  StageThresholds thresholds;
  FitOptions fit;
  int reference_region = 1;
  std::string reference = "d_gamma:1,1";
  std::string output_dir = "qpat_out";
  /// Compare against the phantom's ground truth in estimates.csv.
  bool compare_truth = true;
  // verify
  std::vector<double> scaling_lambdas{0.1, 3.0};
  std::vector<int> refinement_levels{16, 32, 64};
  double derive_sigma = 1.0;

  void validate() const {
    phantom.validate();
    if (illuminations.empty()) throw PreconditionError("config: at least one illumination is required");
    for (const auto& s : illuminations) (void)parse_illumination(s);
    if (!(noise_level >= 0.0)) throw PreconditionError("config: noise level must be >= 0");
    SolveOptions so;
    so.cg_tolerance = cg_tolerance;
    so.max_iterations = max_iterations;
    so.validate();
    thresholds.validate();
    parse_reference(reference, reference_region).validate();
    if (output_dir.empty()) throw PreconditionError("config: output_dir must not be empty");
    if (refinement_levels.size() < 2) throw PreconditionError("config: need at least two refinement levels");
    for (int n : refinement_levels)
      if (n < 8) throw PreconditionError("config: refinement levels must be >= 8");
  }

  SolveOptions solve_options(std::size_t k) const {
    SolveOptions o;
    o.cg_tolerance = cg_tolerance;
    o.max_iterations = max_iterations;
    o.noise_level = noise_level;
    o.rng_seed = measurement_seed(seed, k);
    return o;
  }

  FitOptions fit_options() const {
    FitOptions f = fit;
    f.seed = estimation_seed(seed);
    return f;
  }
};

namespace detail {

template <class T>
void json_get(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <class T, class F>
void json_stage_list(const nlohmann::json& j, const char* key, StageThresholds& th, F&& set) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw ParseError(std::string("segment.") + key, std::string("segment.") + key + " must hold 3 values");
  for (std::size_t s = 0; s < 3; ++s) set(th.stage[s], a[s].get<T>());
}

}  // namespace detail

inline void apply_thresholds_json(const nlohmann::json& j, StageThresholds& th) {
  detail::json_stage_list<double>(j, "tau", th, [](StageOptions& s, double v) { s.tau = v; });
  detail::json_stage_list<double>(j, "edge_sigma", th, [](StageOptions& s, double v) { s.edge_sigma = v; });
  detail::json_stage_list<double>(j, "derivative_sigma", th, [](StageOptions& s, double v) { s.derivative_sigma = v; });
  detail::json_stage_list<bool>(j, "enabled", th, [](StageOptions& s, bool v) { s.enabled = v; });
  detail::json_stage_list<double>(j, "min_component_area", th, [](StageOptions& s, double v) { s.min_component_area = v; });
  detail::json_stage_list<double>(j, "rho_low", th, [](StageOptions& s, double v) { s.rho_low = v; });
  detail::json_stage_list<double>(j, "rho_high", th, [](StageOptions& s, double v) { s.rho_high = v; });
  detail::json_get(j, "thickening", th.thickening);
  detail::json_get(j, "mask_radius", th.mask_radius);
  detail::json_get(j, "min_region_voxels", th.min_region_voxels);
  detail::json_get(j, "union_edges", th.union_edges);
  detail::json_get(j, "margin", th.margin);
  detail::json_get(j, "gradient_floor", th.gradient_floor);
  detail::json_get(j, "floor_scale", th.floor_scale);
  detail::json_get(j, "linear_localization", th.linear_localization);
}

inline nlohmann::json to_json(const StageThresholds& th) {
  nlohmann::json j;
  auto list = [&](auto get) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : th.stage) a.push_back(get(s));
    return a;
  };
  j["tau"] = list([](const StageOptions& s) { return s.tau; });
  j["edge_sigma"] = list([](const StageOptions& s) { return s.edge_sigma; });
  j["derivative_sigma"] = list([](const StageOptions& s) { return s.derivative_sigma; });
  j["enabled"] = list([](const StageOptions& s) { return s.enabled; });
  j["min_component_area"] = list([](const StageOptions& s) { return s.min_component_area; });
  j["rho_low"] = list([](const StageOptions& s) { return s.rho_low; });
  j["rho_high"] = list([](const StageOptions& s) { return s.rho_high; });
  j["thickening"] = th.thickening;
  j["mask_radius"] = th.mask_radius;
  j["min_region_voxels"] = th.min_region_voxels;
  j["union_edges"] = th.union_edges;
  j["margin"] = th.margin;
  j["gradient_floor"] = th.gradient_floor;
  j["floor_scale"] = th.floor_scale;
  j["linear_localization"] = th.linear_localization;
  return j;
}

inline void apply_fit_json(const nlohmann::json& j, FitOptions& f) {
  detail::json_get(j, "radius", f.radius);
  detail::json_get(j, "width", f.width);
  detail::json_get(j, "gap", f.gap);
  detail::json_get(j, "min_points", f.min_points);
  detail::json_get(j, "fit_order", f.fit_order);
  detail::json_get(j, "g_floor", f.g_floor);
  detail::json_get(j, "g_min_cos", f.g_min_cos);
  detail::json_get(j, "lap_radius", f.lap_radius);
  detail::json_get(j, "lap_min_points", f.lap_min_points);
  detail::json_get(j, "trim", f.trim);
  detail::json_get(j, "sample_count", f.sample_count);
}

inline nlohmann::json to_json(const FitOptions& f) {
  return {{"radius", f.radius},         {"width", f.width},
          {"gap", f.gap},               {"min_points", f.min_points},
          {"fit_order", f.fit_order},   {"g_floor", f.g_floor},
          {"g_min_cos", f.g_min_cos},   {"lap_radius", f.lap_radius},
          {"lap_min_points", f.lap_min_points}, {"trim", f.trim},
          {"sample_count", f.sample_count}};
}

/// Reads a pipeline config. A string "phantom" is a path relative to
/// `base_dir`; an object is an inline phantom. Subcommands that never touch
/// the phantom pass `full = false`, which skips it and the validation.
inline PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".",
                                       bool full = true) {
  PipelineConfig c;
  try {
    if (full && !j.contains("phantom")) throw ParseError("phantom", "config: missing 'phantom'");
    if (full && j.at("phantom").is_string()) {
      std::filesystem::path p = j.at("phantom").get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      c.phantom_path = p.lexically_normal().string();
      c.phantom = read_phantom(c.phantom_path);
    } else if (full) {
      c.phantom = phantom_from_json(j.at("phantom"));
    }
    if (j.contains("illuminations")) c.illuminations = j.at("illuminations").get<std::vector<std::string>>();
    if (j.contains("noise")) {
      detail::json_get(j.at("noise"), "level", c.noise_level);
      detail::json_get(j.at("noise"), "seed", c.seed);
    }
    if (j.contains("solver")) {
      detail::json_get(j.at("solver"), "cg_tolerance", c.cg_tolerance);
      detail::json_get(j.at("solver"), "max_iterations", c.max_iterations);
    }
    // tau defaults follow the noise level; explicit values override them
    c.thresholds = StageThresholds::from_noise(c.noise_level);
    if (j.contains("segment")) apply_thresholds_json(j.at("segment"), c.thresholds);
    if (j.contains("estimate")) apply_fit_json(j.at("estimate"), c.fit);
    if (j.contains("reference")) {
      const auto& r = j.at("reference");
      detail::json_get(r, "region", c.reference_region);
      detail::json_get(r, "values", c.reference);
    }
    detail::json_get(j, "output_dir", c.output_dir);
    detail::json_get(j, "compare_truth", c.compare_truth);
    if (j.contains("verify")) {
      const auto& v = j.at("verify");
      detail::json_get(v, "lambdas", c.scaling_lambdas);
      detail::json_get(v, "refinements", c.refinement_levels);
      detail::json_get(v, "derive_sigma", c.derive_sigma);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("json", std::string("pipeline config: ") + e.what());
  }
  if (full) c.validate();
  return c;
}

inline PipelineConfig read_config(const std::string& path, bool full = true) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("json", "config '" + path + "': " + e.what());
  }
  return config_from_json(j, std::filesystem::path(path).parent_path(), full);
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["phantom"] = c.phantom_path.empty() ? to_json(c.phantom) : nlohmann::json(c.phantom_path);
  j["illuminations"] = c.illuminations;
  j["noise"] = {{"level", c.noise_level}, {"seed", c.seed}};
  j["solver"] = {{"cg_tolerance", c.cg_tolerance}, {"max_iterations", c.max_iterations}};
  j["segment"] = to_json(c.thresholds);
  j["estimate"] = to_json(c.fit);
  j["reference"] = {{"region", c.reference_region}, {"values", c.reference}};
  j["output_dir"] = c.output_dir;
  j["compare_truth"] = c.compare_truth;
  j["verify"] = {{"lambdas", c.scaling_lambdas}, {"refinements", c.refinement_levels}, {"derive_sigma", c.derive_sigma}};
  return j;
}

// ---------------------------------------------------------------------------
// Shared stage helpers; the subcommands call the same functions.

inline std::vector<ScalarVolume> simulate_measurements(const PipelineConfig& c, const ParameterMaps& params,
                                                      std::vector<long>* iterations = nullptr) {
  const TetMesh mesh = build_mesh(c.phantom.grid);
  std::vector<ScalarVolume> H;
  for (std::size_t k = 0; k < c.illuminations.size(); ++k) {
    const SolveOptions o = c.solve_options(k);
    const FluenceSolution sol = solve_fluence_detailed(mesh, params, parse_illumination(c.illuminations[k]), o);
    if (iterations) iterations->push_back(sol.iterations);
    H.push_back(synthesize_pressure(sol.u, params, o));
  }
  return H;
}

inline std::string measurement_name(std::size_t k) { return "H" + std::to_string(k + 1) + ".qvol"; }
inline std::string stage_field_name(int s) {
  static const char* const n[3] = {"stage1_logH.qvol", "stage2_loggrad.qvol", "stage3_loglap.qvol"};
  return n[s];
}

/// Rebuilds the labelling the segmenter produced from its written artifacts.
inline RegionLabeling labeling_from_artifacts(const LabelVolume& labels, const JumpSurface& surface,
                                              const StageThresholds& th) {
  return build_interfaces(labels, surface, 1.5, th.thickening + 3.0);
}

inline EstimateReport run_estimation(const std::vector<ScalarVolume>& H, const RegionLabeling& lab,
                                     const JumpSurface& surface, const PipelineConfig& c,
                                     const ParameterMaps* truth) {
  EstimateReport rep =
      estimate_parameters(H, lab, surface, parse_reference(c.reference, c.reference_region), c.fit_options());
  if (truth) attach_truth(rep, fill_from_surface(lab, surface), *truth);
  return rep;
}

inline void write_text(const std::filesystem::path& p, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(p);
  if (!os) throw Error("cannot open '" + p.string() + "' for writing");
  body(os);
  if (!os) throw Error("failed writing '" + p.string() + "'");
}

inline nlohmann::json build_manifest(const PipelineConfig& c) {
  nlohmann::json m;
  m["qpat_version"] = library_version;
  m["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                       std::to_string(EIGEN_MINOR_VERSION);
#if defined(__clang__)
  m["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  m["compiler"] = std::string("gcc ") + __VERSION__;
#else
  m["compiler"] = "unknown";
#endif
  m["config"] = to_json(c);
  m["phantom_spec"] = to_json(c.phantom);
  nlohmann::json seeds = nlohmann::json::array();
  for (std::size_t k = 0; k < c.illuminations.size(); ++k) seeds.push_back(measurement_seed(c.seed, k));
  m["seeds"] = {{"master", c.seed}, {"measurements", seeds}, {"estimation", estimation_seed(c.seed)}};
  return m;
}

struct PipelineResult {
  int status = 0;
  std::string failed_stage;
  std::string error;
  int regions = 0;
  EstimateReport estimates;
  std::vector<std::string> artifacts;
};

inline void write_summary(const EstimateReport& rep, std::ostream& os) {
  os << std::left << std::setw(7) << "region" << std::setw(13) << "mu" << std::setw(13) << "D" << std::setw(13)
     << "Gamma";
  const bool truth = !rep.regions.empty() && rep.regions.front().truth.has_value();
  if (truth) os << std::setw(10) << "err_mu" << std::setw(10) << "err_D" << "err_Gamma";
  os << '\n';
  for (const auto& r : rep.regions) {
    os << std::left << std::setw(7) << r.region << std::setw(13) << std::setprecision(5) << r.estimate.mu
       << std::setw(13) << r.estimate.D << std::setw(13) << r.estimate.Gamma;
    if (r.truth) {
      os << std::fixed << std::setprecision(1) << std::setw(10)
         << (100.0 * relative_error(r.estimate.mu, r.truth->mu)) << std::setw(10)
         << (100.0 * relative_error(r.estimate.D, r.truth->D)) << (100.0 * relative_error(r.estimate.Gamma, r.truth->Gamma))
         << std::defaultfloat;
    }
    os << '\n';
  }
}

/// Phantom -> K measurements -> stage fields -> segmentation -> estimates.
/// Artifacts written before a failure are kept.
inline PipelineResult run_pipeline(const PipelineConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  PipelineResult res;
  std::string stage = "config";
  auto clock = std::chrono::steady_clock::now();
  auto lap = [&](const std::string& what) {
    const auto now = std::chrono::steady_clock::now();
    log << "[" << stage << "] " << what << " (" << std::fixed << std::setprecision(1)
        << std::chrono::duration<double>(now - clock).count() << " s)" << std::defaultfloat << '\n';
    clock = now;
  };
  try {
    c.validate();
    const fs::path out = c.output_dir;
    fs::create_directories(out);
    auto note = [&](const fs::path& p) { res.artifacts.push_back(p.string()); };
    write_text(out / "manifest.json", [&](std::ostream& os) { os << build_manifest(c).dump(2) << '\n'; });
    note(out / "manifest.json");

    stage = "phantom";
    const ParameterMaps params = rasterize_phantom(c.phantom);
    for (const auto& w : params.warnings) log << "[phantom] warning: " << w << '\n';
    write_volume(to_scalar(params.true_labels), (out / "labels_true.qvol").string());
    note(out / "labels_true.qvol");
    lap(std::to_string(params.region_count()) + " true regions");

    stage = "solve";
    std::vector<long> iters;
    const std::vector<ScalarVolume> H = simulate_measurements(c, params, &iters);
    for (std::size_t k = 0; k < H.size(); ++k) {
      write_volume(H[k], (out / measurement_name(k)).string());
      note(out / measurement_name(k));
    }
    lap(std::to_string(H.size()) + " measurement(s)");

    stage = "derive";
    for (int s = 0; s < 3; ++s) {
      const auto& st = c.thresholds.stage[static_cast<std::size_t>(s)];
      if (!st.enabled) continue;
      write_volume(mean_stage_field(H, s, st.derivative_sigma, c.thresholds.gradient_floor, c.thresholds.floor_scale),
                   (out / stage_field_name(s)).string());
      note(out / stage_field_name(s));
    }
    lap("stage fields written");

    stage = "segment";
    const SegmentResult seg = segment(H, c.thresholds);
    for (const auto& l : seg.log) log << "[segment] " << l << '\n';
    write_surface(seg.surface, (out / "edges.obj").string());
    write_volume(to_scalar(seg.labeling.labels), (out / "labels.qvol").string());
    write_text(out / "segments.csv", [&](std::ostream& os) { write_segment_report(seg.labeling, os); });
    note(out / "edges.obj");
    note(out / "edges.csv");
    note(out / "labels.qvol");
    note(out / "segments.csv");
    res.regions = seg.labeling.region_count();
    lap(std::to_string(res.regions) + " regions");

    stage = "estimate";
    // Estimation reads the artifacts back so that running the subcommands on
    // them reproduces the same numbers.
    const JumpSurface surface = read_surface((out / "edges.obj").string());
    const LabelVolume labels = to_labels(read_volume((out / "labels.qvol").string()));
    const RegionLabeling lab = labeling_from_artifacts(labels, surface, c.thresholds);
    res.estimates = run_estimation(H, lab, surface, c, c.compare_truth ? &params : nullptr);
    write_text(out / "estimates.csv", [&](std::ostream& os) { write_estimates_csv(res.estimates, os); });
    note(out / "estimates.csv");
    lap("estimates written");
    write_summary(res.estimates, log);
  } catch (const std::exception& e) {
    res.status = 1;
    res.failed_stage = stage;
    res.error = e.what();
    log << "[" << stage << "] error: " << e.what() << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

inline double max_relative_difference(const ScalarVolume& a, const ScalarVolume& b) {
  require_same_grid(a.grid(), b.grid(), "max_relative_difference");
  double m = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    const double den = std::max(std::abs(a[p]), std::abs(b[p]));
    if (den > 0.0) m = std::max(m, std::abs(a[p] - b[p]) / den);
  }
  return m;
}

/// H for (mu, D, Gamma) against H for (l mu, l D, Gamma / l), noiseless.
inline double scaling_difference(const PhantomSpec& spec, const IlluminationPattern& illum, double lambda,
                                 const SolveOptions& opts) {
  SolveOptions o = opts;
  o.noise_level = 0.0;
  const ParameterMaps p = rasterize_phantom(spec);
  const TetMesh mesh = build_mesh(spec.grid);
  const ScalarVolume h1 = synthesize_pressure(solve_fluence(mesh, p, illum, o), p, o);
  const ParameterMaps q = scaled(p, lambda);
  const ScalarVolume h2 = synthesize_pressure(solve_fluence(mesh, q, illum, o), q, o);
  return max_relative_difference(h1, h2);
}

/// Two media split at y = 0, (1,1,1) below and (l, l, 1/l) above, with
/// Dirichlet data exp(x): u = exp(x) solves both, so the normal flux is
/// continuous and in fact zero.
inline PhantomSpec half_space_phantom(int n, double lambda = 2.0) {
  PhantomSpec s;
  s.grid.dims = {n, n, n};
  const double h = 1.0 / n;
  s.grid.spacing = {h, h, h};
  s.grid.origin = {0.0, -0.5, 0.0};
  s.background = {1.0, 1.0, 1.0};
  s.inclusions.push_back({HalfSpace{{0.0, 0.0, 0.0}, {0.0, 1.0, 0.0}}, {lambda, lambda, 1.0 / lambda}, "upper"});
  return s;
}

struct RefinementStep {
  int n = 0;
  double mismatch = 0.0;  // area-weighted mean |D du/dnu| jump over the interface
  double max_error = 0.0; // L-infinity error against exp(x)
};

inline std::vector<RefinementStep> half_space_refinement(const std::vector<int>& levels, const SolveOptions& opts,
                                                         double lambda = 2.0) {
  std::vector<RefinementStep> out;
  for (int n : levels) {
    const PhantomSpec spec = half_space_phantom(n, lambda);
    const ParameterMaps p = rasterize_phantom(spec);
    const TetMesh mesh = build_mesh(spec.grid);
    const auto illum = custom_from_function(mesh, [](const Vec3& x) { return std::exp(x.x); });
    SolveOptions o = opts;
    o.noise_level = 0.0;
    const ScalarVolume u = solve_fluence(mesh, p, illum, o);
    RefinementStep st;
    st.n = n;
    double area = 0.0, acc = 0.0;
    for (const auto& f : transmission_residual(u, p, p.true_labels)) {
      area += f.area;
      acc += f.area * f.mean_abs_mismatch;
    }
    st.mismatch = area > 0.0 ? acc / area : 0.0;
    const GridSpec& g = spec.grid;
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
          st.max_error = std::max(st.max_error, std::abs(u.at(i, j, k) - std::exp(g.center(i, j, k).x)));
    out.push_back(st);
  }
  return out;
}

/// Scaling invariance, transmission residual under refinement and the
/// determinant-condition map (written to the output directory when K >= 3).
inline VerifyReport verify(const PipelineConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  VerifyReport rep;
  SolveOptions base;
  base.cg_tolerance = c.cg_tolerance;
  base.max_iterations = c.max_iterations;
  const double bound = 100.0 * c.cg_tolerance;

  for (double lambda : c.scaling_lambdas) {
    CheckResult r;
    std::ostringstream nm;
    nm << "scaling lambda=" << lambda;
    r.name = nm.str();
    try {
      const double d = scaling_difference(c.phantom, parse_illumination(c.illuminations.front()), lambda, base);
      r.passed = d <= bound;
      std::ostringstream ss;
      ss << "max relative H difference " << d << " (bound " << bound << ")";
      r.detail = ss.str();
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    rep.checks.push_back(r);
    log << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
  }

  {
    CheckResult r;
    r.name = "transmission residual under refinement";
    try {
      const auto steps = half_space_refinement(c.refinement_levels, base);
      r.passed = true;
      std::ostringstream ss;
      for (std::size_t i = 0; i < steps.size(); ++i) {
        ss << (i ? ", " : "") << "n=" << steps[i].n << ": " << steps[i].mismatch;
        if (i > 0 && !(steps[i].mismatch < steps[i - 1].mismatch)) r.passed = false;
      }
      r.detail = ss.str();
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    rep.checks.push_back(r);
    log << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
  }

  {
    CheckResult r;
    r.name = "determinant condition map";
    try {
      if (c.illuminations.size() < 3) {
        r.detail = "needs at least 3 illuminations, config has " + std::to_string(c.illuminations.size());
      } else {
        PipelineConfig clean = c;
        clean.noise_level = 0.0;
        const ParameterMaps p = rasterize_phantom(c.phantom);
        const auto H = simulate_measurements(clean, p);
        std::vector<std::array<ScalarVolume, 3>> grads;
        for (const auto& h : H) grads.push_back(derivatives(h, c.derive_sigma).grad);
        const ScalarVolume det = check_determinant_condition(grads);
        fs::create_directories(c.output_dir);
        const fs::path path = fs::path(c.output_dir) / "detcond.qvol";
        write_volume(det, path.string());
        std::vector<double> v = det.storage();
        const double med = median_of(v);
        const double mn = *std::min_element(v.begin(), v.end());
        r.passed = true;
        std::ostringstream ss;
        ss << "written to " << path.string() << ", min " << mn << ", median " << med;
        r.detail = ss.str();
      }
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    rep.checks.push_back(r);
    log << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
  }
  return rep;
}

}  // namespace qpat
