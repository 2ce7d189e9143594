#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qpat/edge_detect.hpp"
#include "qpat/error.hpp"
#include "qpat/phantom.hpp"
#include "qpat/segment.hpp"
#include "qpat/volume.hpp"

namespace qpat {

enum class ReferenceKind { MuGamma, DGamma, MuD, Full };

/// Known parameter values in one region; fixes the scaling gauge.
struct ReferenceValues {
  int region = 1;
  ReferenceKind kind = ReferenceKind::DGamma;
  double mu = 0.0, D = 0.0, Gamma = 0.0;

  void validate() const {
    const bool need_mu = kind != ReferenceKind::DGamma, need_D = kind != ReferenceKind::MuGamma,
               need_G = kind != ReferenceKind::MuD;
    if ((need_mu && !(mu > 0.0)) || (need_D && !(D > 0.0)) || (need_G && !(Gamma > 0.0)))
      throw PreconditionError("reference values must be > 0");
  }
};

inline std::string reference_kind_name(ReferenceKind k) {
  switch (k) {
    case ReferenceKind::MuGamma: return "mu_gamma";
    case ReferenceKind::DGamma: return "d_gamma";
    case ReferenceKind::MuD: return "mu_d";
    case ReferenceKind::Full: return "full";
  }
  return "?";
}

/// Parses "mu_gamma:MU,GAMMA", "d_gamma:D,GAMMA", "mu_d:MU,D" or "full:MU,D,GAMMA".
inline ReferenceValues parse_reference(const std::string& text, int region) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ParseError("ref", "reference must look like kind:v1,v2");
  const std::string kind = text.substr(0, colon);
  std::vector<double> v;
  std::string rest = text.substr(colon + 1);
  for (std::size_t pos = 0; pos <= rest.size();) {
    const auto comma = rest.find(',', pos);
    const std::string tok = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ParseError("ref", "bad number '" + tok + "' in reference");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  ReferenceValues r;
  r.region = region;
  auto need = [&](std::size_t n) {
    if (v.size() != n) throw ParseError("ref", "reference '" + kind + "' needs " + std::to_string(n) + " values");
  };
  if (kind == "mu_gamma") {
    need(2);
    r.kind = ReferenceKind::MuGamma;
    r.mu = v[0];
    r.Gamma = v[1];
  } else if (kind == "d_gamma") {
    need(2);
    r.kind = ReferenceKind::DGamma;
    r.D = v[0];
    r.Gamma = v[1];
  } else if (kind == "mu_d") {
    need(2);
    r.kind = ReferenceKind::MuD;
    r.mu = v[0];
    r.D = v[1];
  } else if (kind == "full") {
    need(3);
    r.kind = ReferenceKind::Full;
    r.mu = v[0];
    r.D = v[1];
    r.Gamma = v[2];
  } else {
    throw ParseError("ref", "unknown reference kind '" + kind + "'");
  }
  r.validate();
  return r;
}

struct FitOptions {
  double radius = 5.0;        // voxels, log-linear fit
  double width = -1.0;        // voxels, Gaussian weight; negative = radius / 2
  double gap = 1.5;           // voxels, points closer to the triangle plane are ignored
  int min_points = 12;
  int fit_order = 2;          // 1 drops the normal curvature term
  double g_floor = 0.05;      // fraction of the interface median |grad f|
  double g_min_cos = 0.0;     // minimum |grad f . nu| / |grad f| on both sides
  double lap_radius = 4.0;    // voxels, quadratic fit
  int lap_min_points = 20;
  double trim = 3.0;          // outlier cut in scaled MADs per interface; 0 keeps all
  int sample_count = -1;      // negative = min(500, 10% of region voxels)
  unsigned long long seed = 0;

  double weight_width() const { return width > 0.0 ? width : 0.5 * radius; }
};

// ---------------------------------------------------------------------------
// Local fits

struct LogLinearFit {
  bool ok = false;
  double p = 0.0;   // log f(y)
  Vec3 q{0, 0, 0};  // grad log f
  int points = 0;
};

/// Weighted fit of log H = p + q.(x - y) over the given points. Order 2 adds
/// a term in ((x - y).nu)^2, which removes the first-order bias of
/// extrapolating a one-sided fit along the normal; `scale` conditions the basis.
inline LogLinearFit fit_log_linear(const std::vector<Vec3>& offsets, const std::vector<double>& logH,
                                   const std::vector<double>& w, int min_points, int order = 1, double scale = 1.0,
                                   const Vec3& nu = {0, 0, 0}) {
  LogLinearFit out;
  out.points = static_cast<int>(offsets.size());
  if (out.points < min_points) return out;
  const int nb = order >= 2 ? 5 : 4;
  Eigen::Matrix<double, 5, 5> A = Eigen::Matrix<double, 5, 5>::Zero();
  Eigen::Matrix<double, 5, 1> b = Eigen::Matrix<double, 5, 1>::Zero();
  Eigen::Matrix<double, 5, 1> r;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const Vec3 d{offsets[i].x / scale, offsets[i].y / scale, offsets[i].z / scale};
    const double s = dot(d, nu);
    r << 1.0, d.x, d.y, d.z, s * s;
    A.noalias() += w[i] * r * r.transpose();
    b += w[i] * logH[i] * r;
  }
  if (nb == 4) {
    A.row(4).setZero();
    A.col(4).setZero();
    A(4, 4) = A(0, 0);
    b[4] = 0.0;
  }
  Eigen::LDLT<Eigen::Matrix<double, 5, 5>> ldlt(A);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return out;
  // reject near-singular point sets
  const auto dg = ldlt.vectorD().cwiseAbs();
  if (!(dg.minCoeff() > 1e-10 * dg.maxCoeff())) return out;
  const Eigen::Matrix<double, 5, 1> c = ldlt.solve(b);
  if (!c.allFinite()) return out;
  out.ok = true;
  out.p = c[0];
  out.q = Vec3{c[1] / scale, c[2] / scale, c[3] / scale};
  return out;
}

/// Values of one triangle side for one measurement.
struct SideSample {
  bool ok = false;
  double h = 0.0;       // log f(y)
  double g = 0.0;       // log |grad f(y) . nu|
  double grad_abs = 0.0;  // |grad f(y)|
  double normal_abs = 0.0;  // |grad f(y) . nu|
};

struct TriangleSample {
  std::size_t triangle = 0;
  double area = 0.0;
  int minus_label = 0, plus_label = 0;
  SideSample minus, plus;
  bool g_valid = false;  // member of the restricted set used for the b system
};

/// Per interface and measurement, the triangle samples.
struct InterfaceSamples {
  std::map<RegionPair, std::vector<std::vector<TriangleSample>>> per_pair;  // [pair][k][triangle]
  std::size_t dropped_sides = 0;
  std::size_t measurements = 0;
};

namespace detail {

inline std::vector<Index3> ball(double radius) {
  const int r = static_cast<int>(std::ceil(radius));
  std::vector<Index3> off;
  for (int dz = -r; dz <= r; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy + dz * dz <= radius * radius + 1e-9) off.push_back({dx, dy, dz});
  return off;
}

}  // namespace detail

/// Gaussian-weighted one-sided log-linear fits at every interface triangle.
/// `side_labels` must give every voxel its region (e.g. fill_from_surface).
inline InterfaceSamples fit_interface_values(const std::vector<ScalarVolume>& H, const RegionLabeling& lab,
                                             const LabelVolume& side_labels, const JumpSurface& surface,
                                             const FitOptions& opt) {
  if (H.empty()) throw PreconditionError("fit_interface_values needs at least one measurement");
  const GridSpec& g = side_labels.grid();
  for (const auto& h : H) require_same_grid(g, h.grid(), "fit_interface_values");
  const double hs = g.mean_spacing();
  const auto ball = detail::ball(opt.radius * std::max({g.spacing.x, g.spacing.y, g.spacing.z}) / std::min({g.spacing.x, g.spacing.y, g.spacing.z}));
  const double R = opt.radius * hs, w2 = std::pow(opt.weight_width() * hs, 2), gap = opt.gap * hs;

  InterfaceSamples out;
  out.measurements = H.size();
  std::vector<ScalarVolume> logH;
  for (const auto& h : H) {
    ScalarVolume l(g);
    for (std::size_t p = 0; p < h.size(); ++p) l[p] = std::log(std::max(h[p], 1e-300));
    logH.push_back(std::move(l));
  }
  for (const auto& [key, tris] : lab.interfaces) {
    auto& per_k = out.per_pair[key];
    per_k.assign(H.size(), {});
    for (std::size_t k = 0; k < H.size(); ++k) per_k[k].resize(tris.size());
    std::size_t dropped = 0;
#pragma omp parallel for schedule(dynamic, 16) reduction(+ : dropped)
    for (std::ptrdiff_t ti = 0; ti < static_cast<std::ptrdiff_t>(tris.size()); ++ti) {
      const InterfaceTriangle& it = tris[static_cast<std::size_t>(ti)];
      const Vec3 y = surface.incenter(it.triangle);
      const Vec3 nu = surface.normals[it.triangle];
      Index3 c{};
      const Vec3 vc = g.to_voxel(y);
      for (int a = 0; a < 3; ++a) c[static_cast<std::size_t>(a)] = static_cast<int>(std::lround(vc[a]));
      std::vector<std::size_t> idx[2];
      std::vector<Vec3> off[2];
      std::vector<double> wt[2];
      for (const auto& o : ball) {
        const int i = c[0] + o[0], j = c[1] + o[1], kk = c[2] + o[2];
        if (!g.contains(i, j, kk)) continue;
        const Vec3 x = g.center(i, j, kk);
        const Vec3 d = x - y;
        const double d2 = dot(d, d);
        if (d2 > R * R) continue;
        const double s = dot(d, nu);
        const std::size_t p = g.index(i, j, kk);
        const int l = side_labels[p];
        int side = -1;
        if (s >= gap && l == it.plus_label) side = 1;
        if (s <= -gap && l == it.minus_label) side = 0;
        if (side < 0) continue;
        idx[side].push_back(p);
        off[side].push_back(d);
        wt[side].push_back(std::exp(-0.5 * d2 / w2));
      }
      for (std::size_t k = 0; k < H.size(); ++k) {
        TriangleSample ts;
        ts.triangle = it.triangle;
        ts.area = it.area;
        ts.minus_label = it.minus_label;
        ts.plus_label = it.plus_label;
        for (int side = 0; side < 2; ++side) {
          std::vector<double> vals(idx[side].size());
          for (std::size_t q = 0; q < vals.size(); ++q) vals[q] = logH[k][idx[side][q]];
          const LogLinearFit f = fit_log_linear(off[side], vals, wt[side], opt.min_points, opt.fit_order, R, nu);
          SideSample& ss = side ? ts.plus : ts.minus;
          if (!f.ok) {
            ++dropped;
            continue;
          }
          ss.ok = true;
          ss.h = f.p;
          ss.grad_abs = std::exp(f.p) * norm(f.q);
          ss.normal_abs = std::exp(f.p) * std::abs(dot(f.q, nu));
          ss.g = std::log(std::max(ss.normal_abs, 1e-300));
        }
        per_k[k][static_cast<std::size_t>(ti)] = ts;
      }
    }
    out.dropped_sides += dropped;
    // restricted set: both normal derivatives above a fraction of the median gradient
    for (std::size_t k = 0; k < H.size(); ++k) {
      std::vector<double> grads;
      for (const auto& ts : per_k[k]) {
        if (ts.minus.ok) grads.push_back(ts.minus.grad_abs);
        if (ts.plus.ok) grads.push_back(ts.plus.grad_abs);
      }
      const double floor = opt.g_floor * median_of(grads);
      // slopes at round-off level relative to f carry no direction
      auto sloped = [&](const SideSample& ss) { return ss.normal_abs * hs > 1e-9 * std::exp(ss.h); };
      for (auto& ts : per_k[k])
        ts.g_valid = ts.minus.ok && ts.plus.ok && ts.minus.normal_abs >= floor && ts.plus.normal_abs >= floor &&
                     sloped(ts.minus) && sloped(ts.plus) &&
                     ts.minus.normal_abs >= opt.g_min_cos * ts.minus.grad_abs &&
                     ts.plus.normal_abs >= opt.g_min_cos * ts.plus.grad_abs;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Least-squares systems

/// One weighted jump observation: x_m - x_n should equal `jump`.
struct JumpObservation {
  int m = 0, n = 0;
  double weight = 0.0;
  double jump = 0.0;
};

struct LoglinearSolution {
  std::vector<double> x;  // indexed by label, [0] unused
  double residual_norm = 0.0;
  std::vector<double> region_residual;  // weighted RMS misfit per region
  double min_dominance_margin = 0.0;
};

inline std::vector<int> unreachable_regions(int M, int ref, const std::vector<JumpObservation>& obs) {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(M) + 1);
  for (const auto& o : obs)
    if (o.weight > 0.0) {
      adj[static_cast<std::size_t>(o.m)].push_back(o.n);
      adj[static_cast<std::size_t>(o.n)].push_back(o.m);
    }
  std::vector<char> seen(static_cast<std::size_t>(M) + 1, 0);
  std::vector<int> stack{ref};
  seen[static_cast<std::size_t>(ref)] = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int w : adj[static_cast<std::size_t>(v)])
      if (!seen[static_cast<std::size_t>(w)]) {
        seen[static_cast<std::size_t>(w)] = 1;
        stack.push_back(w);
      }
  }
  std::vector<int> out;
  for (int m = 1; m <= M; ++m)
    if (!seen[static_cast<std::size_t>(m)]) out.push_back(m);
  return out;
}

/// Normal equations of min sum w (x_m - x_n - jump)^2 with x_ref fixed.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> assemble_normal_equations(int M, const std::vector<JumpObservation>& obs) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(M, M);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(M);
  for (const auto& o : obs) {
    const int m = o.m - 1, n = o.n - 1;
    A(m, m) += o.weight;
    A(n, n) += o.weight;
    A(m, n) -= o.weight;
    A(n, m) -= o.weight;
    b[m] += o.weight * o.jump;
    b[n] -= o.weight * o.jump;
  }
  return {A, b};
}

inline LoglinearSolution solve_jump_system(int M, int ref, double x_ref, const std::vector<JumpObservation>& obs,
                                           const std::string& what) {
  if (ref < 1 || ref > M) throw EstimationError(what + ": reference region " + std::to_string(ref) + " does not exist");
  const auto unreachable = unreachable_regions(M, ref, obs);
  if (!unreachable.empty()) {
    std::string list;
    for (int u : unreachable) list += (list.empty() ? "" : ", ") + std::to_string(u);
    throw EstimationError(what + ": regions not connected to the reference region: " + list);
  }
  auto [A, b] = assemble_normal_equations(M, obs);
  // eliminate the reference unknown
  std::vector<int> free;
  for (int m = 1; m <= M; ++m)
    if (m != ref) free.push_back(m);
  const int F = static_cast<int>(free.size());
  Eigen::MatrixXd Af(F, F);
  Eigen::VectorXd bf(F);
  for (int i = 0; i < F; ++i) {
    bf[i] = b[free[static_cast<std::size_t>(i)] - 1] - A(free[static_cast<std::size_t>(i)] - 1, ref - 1) * x_ref;
    for (int j = 0; j < F; ++j) Af(i, j) = A(free[static_cast<std::size_t>(i)] - 1, free[static_cast<std::size_t>(j)] - 1);
  }
  LoglinearSolution sol;
  sol.x.assign(static_cast<std::size_t>(M) + 1, 0.0);
  sol.x[static_cast<std::size_t>(ref)] = x_ref;
  sol.min_dominance_margin = 0.0;
  if (F > 0) {
    // symmetric, weakly diagonally dominant, strictly in rows coupled to the reference
    if (!Af.isApprox(Af.transpose(), 1e-12)) throw EstimationError(what + ": normal matrix is not symmetric");
    double min_margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < F; ++i) {
      double off = 0.0;
      for (int j = 0; j < F; ++j)
        if (j != i) off += std::abs(Af(i, j));
      const double margin = Af(i, i) - off;
      const double tol = 1e-12 * std::max(1.0, Af(i, i));
      if (margin < -tol) throw EstimationError(what + ": normal matrix is not diagonally dominant");
      const bool coupled = A(free[static_cast<std::size_t>(i)] - 1, ref - 1) != 0.0;
      if (coupled && !(margin > tol)) throw EstimationError(what + ": row coupled to the reference is not strictly dominant");
      min_margin = std::min(min_margin, margin);
    }
    sol.min_dominance_margin = min_margin;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(Af);
    if (ldlt.info() != Eigen::Success) throw EstimationError(what + ": factorisation failed");
    const Eigen::VectorXd xf = ldlt.solve(bf);
    for (int i = 0; i < F; ++i) sol.x[static_cast<std::size_t>(free[static_cast<std::size_t>(i)])] = xf[i];
  }
  std::vector<double> wsum(static_cast<std::size_t>(M) + 1, 0.0), rsum(static_cast<std::size_t>(M) + 1, 0.0);
  double total = 0.0;
  for (const auto& o : obs) {
    const double r = sol.x[static_cast<std::size_t>(o.m)] - sol.x[static_cast<std::size_t>(o.n)] - o.jump;
    total += o.weight * r * r;
    for (int l : {o.m, o.n}) {
      wsum[static_cast<std::size_t>(l)] += o.weight;
      rsum[static_cast<std::size_t>(l)] += o.weight * r * r;
    }
  }
  sol.residual_norm = std::sqrt(total);
  sol.region_residual.assign(static_cast<std::size_t>(M) + 1, 0.0);
  for (int m = 1; m <= M; ++m)
    if (wsum[static_cast<std::size_t>(m)] > 0.0)
      sol.region_residual[static_cast<std::size_t>(m)] = std::sqrt(rsum[static_cast<std::size_t>(m)] / wsum[static_cast<std::size_t>(m)]);
  return sol;
}

namespace detail {

// Drops observations further than `k` scaled MADs from the median jump.
inline void trim_outliers(std::vector<JumpObservation>& obs, double k) {
  if (k <= 0.0 || obs.size() < 8) return;
  std::vector<double> d;
  for (const auto& o : obs) d.push_back(o.jump);
  const double med = median_of(d);
  for (double& x : d) x = std::abs(x - med);
  const double mad = 1.4826 * median_of(d);
  const double tol = std::max(k * mad, 1e-12);
  std::erase_if(obs, [&](const JumpObservation& o) { return std::abs(o.jump - med) > tol; });
}

}  // namespace detail

/// Observations of both systems from interface samples. For a: x_m - x_n =
/// h_m - h_n; for b: x_m - x_n = g_n - g_m, restricted to g-valid triangles.
/// With trim > 0, outliers are removed per interface and measurement.
inline std::pair<std::vector<JumpObservation>, std::vector<JumpObservation>> jump_observations(const InterfaceSamples& s,
                                                                                               double trim = 0.0) {
  std::vector<JumpObservation> a, b;
  for (const auto& [key, per_k] : s.per_pair)
    for (const auto& tris : per_k) {
      std::vector<JumpObservation> ak, bk;
      for (const auto& t : tris) {
        if (t.minus.ok && t.plus.ok) ak.push_back({t.minus_label, t.plus_label, t.area, t.minus.h - t.plus.h});
        if (t.g_valid) bk.push_back({t.minus_label, t.plus_label, t.area, t.plus.g - t.minus.g});
      }
      // orient every jump as smaller label minus larger label before trimming
      for (auto* v : {&ak, &bk})
        for (auto& o : *v)
          if (o.m > o.n) {
            std::swap(o.m, o.n);
            o.jump = -o.jump;
          }
      detail::trim_outliers(ak, trim);
      detail::trim_outliers(bk, trim);
      a.insert(a.end(), ak.begin(), ak.end());
      b.insert(b.end(), bk.begin(), bk.end());
    }
  return {a, b};
}

/// Number of triangle samples per region entering each system.
inline std::vector<std::size_t> observation_counts(int M, const std::vector<JumpObservation>& obs) {
  std::vector<std::size_t> n(static_cast<std::size_t>(M) + 1, 0);
  for (const auto& o : obs) {
    ++n[static_cast<std::size_t>(o.m)];
    ++n[static_cast<std::size_t>(o.n)];
  }
  return n;
}

struct LoglinearResult {
  LoglinearSolution a, b;
};

/// Solves for a = log(Gamma mu) and b = log(D / (Gamma mu)) per region with
/// the reference region's values fixed.
inline LoglinearResult solve_loglinear_systems(const std::vector<JumpObservation>& a_obs,
                                               const std::vector<JumpObservation>& b_obs, int M, int ref, double a_ref,
                                               double b_ref) {
  // pairs with an a-sample but no b-sample make their regions unreachable in b
  LoglinearResult r;
  r.a = solve_jump_system(M, ref, a_ref, a_obs, "a system");
  const auto unreachable = unreachable_regions(M, ref, b_obs);
  if (!unreachable.empty()) {
    std::set<RegionPair> a_pairs, b_pairs;
    for (const auto& o : a_obs) a_pairs.insert(make_pair_sorted(o.m, o.n));
    for (const auto& o : b_obs) b_pairs.insert(make_pair_sorted(o.m, o.n));
    std::string pairs;
    for (const auto& p : a_pairs)
      if (!b_pairs.count(p) &&
          (std::count(unreachable.begin(), unreachable.end(), p.first) || std::count(unreachable.begin(), unreachable.end(), p.second)))
        pairs += (pairs.empty() ? "" : ", ") + std::to_string(p.first) + "-" + std::to_string(p.second);
    throw EstimationError("b system: no usable normal-derivative samples on interface(s) " +
                          (pairs.empty() ? std::string("(none adjacent)") : pairs));
  }
  r.b = solve_jump_system(M, ref, b_ref, b_obs, "b system");
  return r;
}

// ---------------------------------------------------------------------------
// mu / D from local quadratic fits

struct QuadraticFit {
  bool ok = false;
  double value = 0.0;      // q(z)
  double laplacian = 0.0;  // trace of the Hessian of q
};

inline QuadraticFit fit_quadratic(const std::vector<Vec3>& offsets, const std::vector<double>& vals, double scale,
                                  int min_points) {
  QuadraticFit out;
  if (static_cast<int>(offsets.size()) < min_points) return out;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(offsets.size()), 10);
  Eigen::VectorXd y(static_cast<Eigen::Index>(offsets.size()));
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const double a = offsets[i].x / scale, b = offsets[i].y / scale, c = offsets[i].z / scale;
    X.row(static_cast<Eigen::Index>(i)) << 1.0, a, b, c, a * a, b * b, c * c, a * b, a * c, b * c;
    y[static_cast<Eigen::Index>(i)] = vals[i];
  }
  const Eigen::VectorXd coef = X.colPivHouseholderQr().solve(y);
  if (!coef.allFinite()) return out;
  out.ok = true;
  out.value = coef[0];
  out.laplacian = 2.0 * (coef[4] + coef[5] + coef[6]) / (scale * scale);
  return out;
}

struct MuOverD {
  std::vector<std::optional<double>> c;  // indexed by label
  std::vector<std::size_t> samples;
  std::vector<double> spread;  // robust relative spread of Lap q / q over samples
};

/// Voxels of label m whose whole fit ball (clipped to the grid) has label m.
inline std::vector<std::size_t> interior_candidates(const LabelVolume& labels, int m, double radius) {
  const GridSpec& g = labels.grid();
  const auto ball = detail::ball(radius);
  std::vector<std::size_t> out;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (labels.at(i, j, k) != m) continue;
        bool ok = true;
        for (const auto& o : ball) {
          const int a = i + o[0], b = j + o[1], c = k + o[2];
          if (g.contains(a, b, c) && labels.at(a, b, c) != m) {
            ok = false;
            break;
          }
        }
        if (ok) out.push_back(g.index(i, j, k));
      }
  return out;
}

/// c = log(mu / D) per region: log of the median over random interior points
/// and all measurements of Lap q / q(z) for local quadratic fits q.
inline MuOverD estimate_mu_over_D(const std::vector<ScalarVolume>& H, const LabelVolume& labels, const FitOptions& opt) {
  if (H.empty()) throw PreconditionError("estimate_mu_over_D needs at least one measurement");
  const GridSpec& g = labels.grid();
  for (const auto& h : H) require_same_grid(g, h.grid(), "estimate_mu_over_D");
  const int M = max_label(labels);
  const auto counts = label_counts(labels);
  const auto ball = detail::ball(opt.lap_radius);
  const double scale = opt.lap_radius * g.mean_spacing();
  MuOverD out;
  out.c.assign(static_cast<std::size_t>(M) + 1, std::nullopt);
  out.samples.assign(static_cast<std::size_t>(M) + 1, 0);
  out.spread.assign(static_cast<std::size_t>(M) + 1, 0.0);
  for (int m = 1; m <= M; ++m) {
    auto cand = interior_candidates(labels, m, opt.lap_radius);
    if (cand.empty()) continue;
    const std::size_t want = opt.sample_count > 0
                                 ? static_cast<std::size_t>(opt.sample_count)
                                 : std::max<std::size_t>(1, std::min<std::size_t>(500, counts[static_cast<std::size_t>(m)] / 10));
    std::mt19937_64 rng(opt.seed + static_cast<unsigned long long>(m));
    if (cand.size() > want) {
      // partial Fisher-Yates with the seeded generator
      for (std::size_t i = 0; i < want; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, cand.size() - 1);
        std::swap(cand[i], cand[pick(rng)]);
      }
      cand.resize(want);
    }
    std::vector<double> ratio(cand.size() * H.size(), std::nan(""));
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(cand.size()); ++ci) {
      const Index3 z = g.unravel(cand[static_cast<std::size_t>(ci)]);
      const Vec3 xz = g.center(z[0], z[1], z[2]);
      std::vector<Vec3> off;
      std::vector<std::size_t> idx;
      for (const auto& o : ball) {
        const int a = z[0] + o[0], b = z[1] + o[1], c = z[2] + o[2];
        if (!g.contains(a, b, c) || labels.at(a, b, c) != m) continue;
        off.push_back(g.center(a, b, c) - xz);
        idx.push_back(g.index(a, b, c));
      }
      for (std::size_t k = 0; k < H.size(); ++k) {
        std::vector<double> vals(idx.size());
        for (std::size_t q = 0; q < idx.size(); ++q) vals[q] = H[k][idx[q]];
        const QuadraticFit f = fit_quadratic(off, vals, scale, opt.lap_min_points);
        if (f.ok && f.value > 0.0) ratio[static_cast<std::size_t>(ci) * H.size() + k] = f.laplacian / f.value;
      }
    }
    // Median of the signed ratio: a mean of log|ratio| is biased once noise
    // makes single samples unreliable.
    std::erase_if(ratio, [](double r) { return !std::isfinite(r); });
    if (ratio.empty()) continue;
    out.samples[static_cast<std::size_t>(m)] = ratio.size();
    const double med = median_of(ratio);
    if (!(med > 0.0)) continue;
    std::vector<double> dev(ratio.size());
    for (std::size_t i = 0; i < ratio.size(); ++i) dev[i] = std::abs(ratio[i] - med);
    out.c[static_cast<std::size_t>(m)] = std::log(med);
    out.spread[static_cast<std::size_t>(m)] = 1.4826 * median_of(std::move(dev)) / med;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assembly

/// (mu, D, Gamma) = (ABC, AB, 1/(BC)) with A = e^a, B = e^b, C = e^c.
inline Material assemble_parameters(double a, double b, double c) {
  const double A = std::exp(a), B = std::exp(b), C = std::exp(c);
  return {A * B * C, A * B, 1.0 / (B * C)};
}

/// Completes a reference triple from a known pair and c = log(mu / D).
inline Material complete_reference(const ReferenceValues& ref, double c_hat) {
  ref.validate();
  switch (ref.kind) {
    case ReferenceKind::MuGamma: return {ref.mu, ref.mu / std::exp(c_hat), ref.Gamma};
    case ReferenceKind::DGamma: return {ref.D * std::exp(c_hat), ref.D, ref.Gamma};
    case ReferenceKind::Full: return {ref.mu, ref.D, ref.Gamma};
    case ReferenceKind::MuD: break;
  }
  throw EstimationError("underdetermined: the pair (mu, D) does not fix Gamma; give (mu, Gamma) or (D, Gamma)");
}

/// Full triple of one region from a known (mu, Gamma) or (D, Gamma) pair and
/// a local estimate of mu / D.
inline Material recover_from_reference_pair(const std::vector<ScalarVolume>& H, const LabelVolume& labels,
                                            const ReferenceValues& pair, const FitOptions& opt) {
  if (pair.kind == ReferenceKind::MuD)
    throw EstimationError("underdetermined: the pair (mu, D) does not fix Gamma; give (mu, Gamma) or (D, Gamma)");
  pair.validate();
  if (pair.region < 1 || pair.region > max_label(labels))
    throw EstimationError("reference region " + std::to_string(pair.region) + " does not exist");
  FitOptions o = opt;
  const MuOverD c = estimate_mu_over_D(H, labels, o);
  if (!c.c[static_cast<std::size_t>(pair.region)])
    throw EstimationError("region " + std::to_string(pair.region) + " is too thin for a Laplacian estimate");
  return complete_reference(pair, *c.c[static_cast<std::size_t>(pair.region)]);
}

struct RegionEstimate {
  int region = 0;
  double a = 0.0, b = 0.0, c = 0.0;
  Material estimate;
  std::size_t a_samples = 0, b_samples = 0, lap_samples = 0;
  double a_residual = 0.0, b_residual = 0.0, c_spread = 0.0;
  std::optional<Material> truth;
};

struct EstimateReport {
  std::vector<RegionEstimate> regions;
  int reference_region = 1;
  std::string reference;
  double a_residual_norm = 0.0, b_residual_norm = 0.0;
  double a_dominance = 0.0, b_dominance = 0.0;
  std::size_t dropped_sides = 0;
};

/// Runs fits, both systems and the Laplacian estimate; assembles the triples.
inline EstimateReport estimate_parameters(const std::vector<ScalarVolume>& H, const RegionLabeling& lab,
                                          const JumpSurface& surface, const ReferenceValues& ref, const FitOptions& opt) {
  ref.validate();
  if (ref.kind == ReferenceKind::MuD)
    throw EstimationError("underdetermined: the pair (mu, D) does not fix Gamma; give (mu, Gamma) or (D, Gamma)");
  const int M = lab.region_count();
  if (ref.region < 1 || ref.region > M)
    throw EstimationError("reference region " + std::to_string(ref.region) + " does not exist");
  const LabelVolume full = fill_from_surface(lab, surface);
  const MuOverD c = estimate_mu_over_D(H, lab.labels, opt);
  for (int m = 1; m <= M; ++m)
    if (!c.c[static_cast<std::size_t>(m)])
      throw EstimationError("region " + std::to_string(m) + " has no usable Laplacian estimate (no interior point or non-positive median)");
  const Material ref_full = complete_reference(ref, *c.c[static_cast<std::size_t>(ref.region)]);
  const double a_ref = std::log(ref_full.Gamma * ref_full.mu);
  const double b_ref = std::log(ref_full.D / (ref_full.Gamma * ref_full.mu));

  EstimateReport rep;
  rep.reference_region = ref.region;
  rep.reference = reference_kind_name(ref.kind);
  std::vector<double> a(static_cast<std::size_t>(M) + 1, a_ref), b(static_cast<std::size_t>(M) + 1, b_ref);
  std::vector<std::size_t> na(static_cast<std::size_t>(M) + 1, 0), nb(na);
  LoglinearResult sol;
  if (M > 1) {
    const InterfaceSamples s = fit_interface_values(H, lab, full, surface, opt);
    rep.dropped_sides = s.dropped_sides;
    const auto [a_obs, b_obs] = jump_observations(s, opt.trim);
    sol = solve_loglinear_systems(a_obs, b_obs, M, ref.region, a_ref, b_ref);
    a = sol.a.x;
    b = sol.b.x;
    na = observation_counts(M, a_obs);
    nb = observation_counts(M, b_obs);
    rep.a_residual_norm = sol.a.residual_norm;
    rep.b_residual_norm = sol.b.residual_norm;
    rep.a_dominance = sol.a.min_dominance_margin;
    rep.b_dominance = sol.b.min_dominance_margin;
  }
  for (int m = 1; m <= M; ++m) {
    RegionEstimate r;
    r.region = m;
    r.a = a[static_cast<std::size_t>(m)];
    r.b = b[static_cast<std::size_t>(m)];
    r.c = m == ref.region && ref.kind == ReferenceKind::Full ? std::log(ref.mu / ref.D) : *c.c[static_cast<std::size_t>(m)];
    r.estimate = m == ref.region ? ref_full : assemble_parameters(r.a, r.b, r.c);
    r.a_samples = na[static_cast<std::size_t>(m)];
    r.b_samples = nb[static_cast<std::size_t>(m)];
    r.lap_samples = c.samples[static_cast<std::size_t>(m)];
    r.c_spread = c.spread[static_cast<std::size_t>(m)];
    if (M > 1) {
      r.a_residual = sol.a.region_residual[static_cast<std::size_t>(m)];
      r.b_residual = sol.b.region_residual[static_cast<std::size_t>(m)];
    }
    rep.regions.push_back(r);
  }
  return rep;
}

/// Attaches ground truth by best voxel overlap with the true labels.
inline void attach_truth(EstimateReport& rep, const LabelVolume& estimated, const ParameterMaps& truth) {
  const int mt = max_label(truth.true_labels), me = max_label(estimated);
  std::vector<std::vector<std::size_t>> inter(static_cast<std::size_t>(me) + 1,
                                              std::vector<std::size_t>(static_cast<std::size_t>(mt) + 1, 0));
  for (std::size_t p = 0; p < estimated.size(); ++p)
    ++inter[static_cast<std::size_t>(estimated[p])][static_cast<std::size_t>(truth.true_labels[p])];
  for (auto& r : rep.regions) {
    if (r.region > me) continue;
    const auto& row = inter[static_cast<std::size_t>(r.region)];
    const auto best = static_cast<std::size_t>(std::max_element(row.begin() + 1, row.end()) - row.begin());
    if (best >= 1 && row[best] > 0) r.truth = truth.label_material[best];
  }
}

inline double relative_error(double est, double truth) { return std::abs(est - truth) / std::abs(truth); }

inline void write_estimates_csv(const EstimateReport& rep, std::ostream& os) {
  const bool truth = std::any_of(rep.regions.begin(), rep.regions.end(), [](const RegionEstimate& r) { return r.truth.has_value(); });
  os << "region,mu,D,Gamma,a,b,c,n_triangles,n_lap_samples,residual_a,residual_b,spread_c";
  if (truth) os << ",mu_true,D_true,Gamma_true,err_mu,err_D,err_Gamma";
  os << '\n';
  auto f = [](double v) { return detail::format_real(v); };
  for (const auto& r : rep.regions) {
    os << r.region << ',' << f(r.estimate.mu) << ',' << f(r.estimate.D) << ',' << f(r.estimate.Gamma) << ',' << f(r.a) << ','
       << f(r.b) << ',' << f(r.c) << ',' << r.a_samples << ',' << r.lap_samples << ',' << f(r.a_residual) << ','
       << f(r.b_residual) << ',' << f(r.c_spread);
    if (truth) {
      if (r.truth)
        os << ',' << f(r.truth->mu) << ',' << f(r.truth->D) << ',' << f(r.truth->Gamma) << ','
           << f(relative_error(r.estimate.mu, r.truth->mu)) << ',' << f(relative_error(r.estimate.D, r.truth->D)) << ','
           << f(relative_error(r.estimate.Gamma, r.truth->Gamma));
      else
        os << ",,,,,,";
    }
    os << '\n';
  }
}

}  // namespace qpat
