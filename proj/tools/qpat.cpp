// qpat command-line front end. Flags override the config file, which
// overrides built-in defaults.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <omp.h>

#include "CLI11.hpp"
#include "qpat/qpat.hpp"

namespace fs = std::filesystem;
using namespace qpat;

namespace {

template <class T>
void set_if(std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

PipelineConfig load_partial(const std::string& path) { return path.empty() ? PipelineConfig{} : read_config(path, false); }

std::vector<ScalarVolume> read_all(const std::vector<std::string>& paths) {
  std::vector<ScalarVolume> out;
  for (const auto& p : paths) out.push_back(read_volume(p));
  return out;
}

void apply_env_threads() {
  if (const char* t = std::getenv("QPAT_THREADS")) {
    const int n = std::atoi(t);
    if (n > 0) omp_set_num_threads(n);
  }
}

struct StageFlags {
  std::array<std::optional<double>, 3> tau, edge_sigma, derivative_sigma;
  std::vector<int> disable;
  std::optional<int> thickening, min_region_voxels;

  void add(CLI::App* app) {
    for (int s = 0; s < 3; ++s) {
      const std::string n = std::to_string(s);
      app->add_option("--tau" + n, tau[s], "jump threshold of stage " + std::to_string(s + 1));
      app->add_option("--edge-sigma" + n, edge_sigma[s], "edge scale (voxels) of stage " + std::to_string(s + 1));
      app->add_option("--deriv-sigma" + n, derivative_sigma[s], "derivative scale (voxels) of stage " + std::to_string(s + 1));
    }
    app->add_option("--disable-stage", disable, "stage numbers (1-3) to skip")->check(CLI::Range(1, 3));
    app->add_option("--thickening", thickening, "surface dilation radius (voxels)");
    app->add_option("--min-region-voxels", min_region_voxels, "smaller regions are merged into a neighbour");
  }
  void apply(StageThresholds& th) {
    for (std::size_t s = 0; s < 3; ++s) {
      set_if(tau[s], th.stage[s].tau);
      set_if(edge_sigma[s], th.stage[s].edge_sigma);
      set_if(derivative_sigma[s], th.stage[s].derivative_sigma);
    }
    for (int s : disable) th.stage[static_cast<std::size_t>(s - 1)].enabled = false;
    set_if(thickening, th.thickening);
    set_if(min_region_voxels, th.min_region_voxels);
  }
};

}  // namespace

int main(int argc, char** argv) {
  apply_env_threads();
  CLI::App app{"qpat: piecewise-constant quantitative photoacoustic reconstruction"};
  app.require_subcommand(1);

  // phantom
  std::string ph_in, ph_out = ".";
  auto* ph = app.add_subcommand("phantom", "rasterize a phantom into mu, D, Gamma and label volumes");
  ph->add_option("--phantom", ph_in, "phantom JSON")->required();
  ph->add_option("--out-dir", ph_out, "output directory");

  // solve
  std::string sv_phantom, sv_illum = "uniform", sv_out, sv_fluence;
  double sv_noise = 0.0, sv_tol = 1e-10;
  std::uint64_t sv_seed = 0;
  long sv_iter = 20000;
  auto* sv = app.add_subcommand("solve", "forward solve and H = Gamma mu u with optional noise");
  sv->add_option("--phantom", sv_phantom, "phantom JSON")->required();
  sv->add_option("--illum", sv_illum, "uniform[:v] or face:<+-x|+-y|+-z>[:peak[:width[:floor]]]");
  sv->add_option("--out", sv_out, "output H volume")->required();
  sv->add_option("--out-fluence", sv_fluence, "also write the fluence u");
  sv->add_option("--noise", sv_noise, "multiplicative noise level")->check(CLI::NonNegativeNumber);
  sv->add_option("--seed", sv_seed, "noise seed");
  sv->add_option("--cg-tol", sv_tol, "relative CG residual");
  sv->add_option("--max-iter", sv_iter, "CG iteration cap");

  // derive
  std::vector<std::string> dv_in;
  double dv_sigma = 1.0;
  std::string dv_grad, dv_lap, dv_stage_out;
  int dv_stage = 0;
  std::optional<double> dv_floor, dv_floor_scale;
  std::string dv_config;
  auto* dv = app.add_subcommand("derive", "scale-space derivative volumes");
  dv->add_option("--in", dv_in, "input volume(s); stage fields average over all")->required();
  dv->add_option("--sigma", dv_sigma, "smoothing scale (voxels)");
  dv->add_option("--out-grad", dv_grad, "|grad f_sigma| of the first input");
  dv->add_option("--out-lap", dv_lap, "Laplacian of f_sigma of the first input");
  dv->add_option("--stage", dv_stage, "write the detection field of stage 1-3")->check(CLI::Range(1, 3));
  dv->add_option("--out-stage", dv_stage_out, "output for --stage");
  dv->add_option("--gradient-floor", dv_floor, "stage-2 gradient floor (fraction of median)");
  dv->add_option("--floor-scale", dv_floor_scale, "stage-2 floor reference scale (voxels)");
  dv->add_option("--config", dv_config, "take floor settings from a pipeline config");

  // detect
  std::string dt_in, dt_out;
  EdgeOptions dt_opt;
  bool dt_linear = false;
  auto* dt = app.add_subcommand("detect", "3D Canny jump detection on one volume");
  dt->add_option("--in", dt_in, "input volume (typically a log field)")->required();
  dt->add_option("--sigma", dt_opt.sigma, "edge scale (voxels)");
  dt->add_option("--rho-low", dt_opt.rho_low, "hysteresis low threshold")->required();
  dt->add_option("--rho-high", dt_opt.rho_high, "hysteresis high threshold")->required();
  dt->add_option("--min-area", dt_opt.min_component_area, "minimum component area (physical)");
  dt->add_option("--margin", dt_opt.margin, "boundary margin (voxels)");
  dt->add_flag("--linear-position", dt_linear, "locate on exp(input), threshold on the input");
  dt->add_option("--out", dt_out, "output OBJ (a .csv sidecar is written next to it)")->required();

  // segment
  std::vector<std::string> sg_in;
  std::string sg_labels, sg_surface, sg_report, sg_config;
  std::optional<double> sg_noise;
  StageFlags sg_flags;
  auto* sg = app.add_subcommand("segment", "three-stage jump detection and region labelling");
  sg->add_option("--in", sg_in, "H volumes")->required();
  sg->add_option("--config", sg_config, "pipeline config supplying the segment section");
  sg->add_option("--noise", sg_noise, "derive default thresholds from this noise level");
  sg_flags.add(sg);
  sg->add_option("--out-labels", sg_labels, "label volume")->required();
  sg->add_option("--out-surface", sg_surface, "surface OBJ")->required();
  sg->add_option("--report", sg_report, "per-region CSV report");

  // estimate
  std::vector<std::string> es_in;
  std::string es_labels, es_surface, es_out, es_truth, es_config;
  std::optional<int> es_ref_region, es_order, es_samples;
  std::optional<std::string> es_ref;
  std::optional<std::uint64_t> es_seed;
  std::optional<double> es_radius, es_gap, es_lap_radius;
  std::optional<int> es_thickening;
  auto* es = app.add_subcommand("estimate", "interface fits and least-squares parameter estimates");
  es->add_option("--in", es_in, "H volumes")->required();
  es->add_option("--labels", es_labels, "label volume")->required();
  es->add_option("--surface", es_surface, "surface OBJ")->required();
  es->add_option("--ref-region", es_ref_region, "reference region label");
  es->add_option("--ref", es_ref, "reference values, e.g. d_gamma:1,1 or mu_gamma:0.1,1");
  es->add_option("--out", es_out, "estimates CSV")->required();
  es->add_option("--truth", es_truth, "phantom JSON for relative errors");
  es->add_option("--config", es_config, "pipeline config supplying estimate/reference sections");
  es->add_option("--seed", es_seed, "master seed (the sampling seed is derived from it)");
  es->add_option("--radius", es_radius, "interface fit radius (voxels)");
  es->add_option("--gap", es_gap, "points this close to the triangle plane are ignored (voxels)");
  es->add_option("--order", es_order, "interface fit order (1 or 2)");
  es->add_option("--lap-radius", es_lap_radius, "Laplacian fit radius (voxels)");
  es->add_option("--samples", es_samples, "Laplacian sample count per region");
  es->add_option("--thickening", es_thickening, "surface dilation used by segment");

  // pipeline
  std::string pl_config;
  std::optional<std::string> pl_out;
  std::optional<double> pl_noise;
  std::optional<std::uint64_t> pl_seed;
  auto* pl = app.add_subcommand("pipeline", "phantom to estimates in one run");
  pl->add_option("--config", pl_config, "pipeline config JSON")->required();
  pl->add_option("--out-dir", pl_out, "override output_dir");
  pl->add_option("--noise", pl_noise, "override noise level");
  pl->add_option("--seed", pl_seed, "override master seed");

  // verify
  std::string vf_config;
  std::optional<std::string> vf_out;
  auto* vf = app.add_subcommand("verify", "scaling, transmission and determinant-condition checks");
  vf->add_option("--config", vf_config, "pipeline config JSON")->required();
  vf->add_option("--out-dir", vf_out, "override output_dir");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ph) {
      const ParameterMaps p = rasterize_phantom(read_phantom(ph_in));
      for (const auto& w : p.warnings) std::cerr << "warning: " << w << '\n';
      fs::create_directories(ph_out);
      write_volume(p.mu, (fs::path(ph_out) / "mu.qvol").string());
      write_volume(p.D, (fs::path(ph_out) / "D.qvol").string());
      write_volume(p.Gamma, (fs::path(ph_out) / "Gamma.qvol").string());
      write_volume(to_scalar(p.true_labels), (fs::path(ph_out) / "labels_true.qvol").string());
      std::cout << p.region_count() << " regions written to " << ph_out << '\n';
      return 0;
    }
    if (*sv) {
      const PhantomSpec spec = read_phantom(sv_phantom);
      const ParameterMaps p = rasterize_phantom(spec);
      SolveOptions o;
      o.cg_tolerance = sv_tol;
      o.max_iterations = sv_iter;
      o.noise_level = sv_noise;
      o.rng_seed = sv_seed;
      o.validate();
      const FluenceSolution sol = solve_fluence_detailed(build_mesh(spec.grid), p, parse_illumination(sv_illum), o);
      if (!sv_fluence.empty()) write_volume(sol.u, sv_fluence);
      write_volume(synthesize_pressure(sol.u, p, o), sv_out);
      std::cout << "CG iterations: " << sol.iterations << '\n';
      return 0;
    }
    if (*dv) {
      const auto H = read_all(dv_in);
      if (!dv_grad.empty() || !dv_lap.empty()) {
        const ScaleSpaceField f = derivatives(H.front(), dv_sigma);
        if (!dv_grad.empty()) write_volume(gradient_magnitude(f), dv_grad);
        if (!dv_lap.empty()) write_volume(laplacian(f), dv_lap);
      }
      if (dv_stage > 0) {
        if (dv_stage_out.empty()) throw PreconditionError("--stage needs --out-stage");
        StageThresholds th = load_partial(dv_config).thresholds;
        set_if(dv_floor, th.gradient_floor);
        set_if(dv_floor_scale, th.floor_scale);
        write_volume(mean_stage_field(H, dv_stage - 1, dv_sigma, th.gradient_floor, th.floor_scale), dv_stage_out);
      }
      return 0;
    }
    if (*dt) {
      const ScalarVolume f = read_volume(dt_in);
      const JumpSurface s = dt_linear ? detect_edges_linear_position(f, dt_opt, nullptr) : detect_edges(f, dt_opt);
      write_surface(s, dt_out);
      std::cout << s.size() << " triangles, area " << s.total_area() << '\n';
      return 0;
    }
    if (*sg) {
      PipelineConfig c = load_partial(sg_config);
      if (sg_noise) c.thresholds = StageThresholds::from_noise(*sg_noise);
      if (sg_noise && !sg_config.empty()) std::cerr << "note: --noise replaces the thresholds from --config\n";
      sg_flags.apply(c.thresholds);
      const SegmentResult r = segment(read_all(sg_in), c.thresholds);
      for (const auto& l : r.log) std::cerr << l << '\n';
      write_volume(to_scalar(r.labeling.labels), sg_labels);
      write_surface(r.surface, sg_surface);
      if (!sg_report.empty()) write_text(sg_report, [&](std::ostream& os) { write_segment_report(r.labeling, os); });
      std::cout << r.labeling.region_count() << " regions\n";
      return 0;
    }
    if (*es) {
      PipelineConfig c = load_partial(es_config);
      set_if(es_ref_region, c.reference_region);
      set_if(es_ref, c.reference);
      set_if(es_seed, c.seed);
      set_if(es_radius, c.fit.radius);
      set_if(es_gap, c.fit.gap);
      set_if(es_order, c.fit.fit_order);
      set_if(es_lap_radius, c.fit.lap_radius);
      set_if(es_samples, c.fit.sample_count);
      set_if(es_thickening, c.thresholds.thickening);
      const auto H = read_all(es_in);
      const JumpSurface surface = read_surface(es_surface);
      const RegionLabeling lab = labeling_from_artifacts(to_labels(read_volume(es_labels)), surface, c.thresholds);
      std::optional<ParameterMaps> truth;
      if (!es_truth.empty()) truth = rasterize_phantom(read_phantom(es_truth));
      const EstimateReport rep = run_estimation(H, lab, surface, c, truth ? &*truth : nullptr);
      write_text(es_out, [&](std::ostream& os) { write_estimates_csv(rep, os); });
      write_summary(rep, std::cout);
      return 0;
    }
    if (*pl) {
      PipelineConfig c = read_config(pl_config);
      set_if(pl_out, c.output_dir);
      set_if(pl_seed, c.seed);
      if (pl_noise) {
        // keep explicit thresholds, only raise taus to the new noise floor
        c.noise_level = *pl_noise;
        for (auto& s : c.thresholds.stage) s.tau = std::max(s.tau, 3.0 * c.noise_level);
      }
      const PipelineResult r = run_pipeline(c, std::cout);
      if (r.status != 0) std::cerr << "pipeline failed in stage '" << r.failed_stage << "': " << r.error << '\n';
      return r.status;
    }
    if (*vf) {
      PipelineConfig c = read_config(vf_config);
      set_if(vf_out, c.output_dir);
      const VerifyReport r = verify(c, std::cout);
      return r.passed() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
