#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "qpat/edge_detect.hpp"
#include "qpat/error.hpp"
#include "qpat/labeling.hpp"
#include "qpat/scale_space.hpp"
#include "qpat/volume.hpp"

namespace qpat {

using RegionPair = std::pair<int, int>;  // always (smaller, larger)

inline RegionPair make_pair_sorted(int a, int b) { return a < b ? RegionPair{a, b} : RegionPair{b, a}; }

struct InterfaceTriangle {
  std::size_t triangle = 0;
  double area = 0.0;
  int minus_label = 0;  // side opposite to the normal
  int plus_label = 0;   // side the normal points into
};

struct RegionLabeling {
  LabelVolume labels;
  std::set<RegionPair> adjacency;
  std::map<RegionPair, std::vector<InterfaceTriangle>> interfaces;
  std::vector<double> region_volumes;  // indexed by label, [0] = surface voxels
  std::map<RegionPair, double> interface_areas;
  std::size_t discarded_triangles = 0;
  std::vector<std::string> log;

  int region_count() const { return static_cast<int>(region_volumes.size()) - 1; }
  std::vector<int> neighbours(int m) const {
    std::vector<int> out;
    for (const auto& [a, b] : adjacency) {
      if (a == m) out.push_back(b);
      if (b == m) out.push_back(a);
    }
    return out;
  }
};

struct StageOptions {
  bool enabled = true;
  double tau = 0.1;         // jump magnitude threshold
  double edge_sigma = 1.5;  // voxels
  /// Smoothing (voxels) applied to H before |grad H| or Laplacian H; unused
  /// by the first stage.
  double derivative_sigma = 1.0;
  /// If > 0 these override the thresholds derived from tau.
  double rho_low = 0.0;
  double rho_high = 0.0;
  double min_component_area = -1.0;
};

struct StageThresholds {
  std::array<StageOptions, 3> stage;
  /// Dilation radius (voxels) of the voxelised surface.
  int thickening = 2;
  /// Extra exclusion radius (voxels) around earlier surfaces for later
  /// stages; negative selects an automatic value from the smoothing scales.
  int mask_radius = -1;
  int min_region_voxels = 27;
  /// Detect per measurement and join the surfaces instead of averaging fields.
  bool union_edges = false;
  int margin = -1;
  /// Floor for |grad H| in the second-stage field, as a fraction of its
  /// median; keeps critical points of u from producing deep log craters.
  double gradient_floor = 0.0;
  /// Smoothing scale (voxels) of the local reference for gradient_floor;
  /// 0 uses the global median.
  double floor_scale = 0.0;
  /// Place the third-stage surface at the steepest point of |Lap H / H|
  /// rather than of its log; hysteresis still uses the log strength.
  bool linear_localization = true;

  StageThresholds() {
    stage[0].tau = 0.35;
    stage[1].tau = 0.5;
    stage[2].tau = 0.5;
    stage[1].edge_sigma = 1.0;
    stage[2].edge_sigma = 0.7;
    stage[2].derivative_sigma = 0.0;
  }

  /// Defaults with every tau raised to at least 3 * noise.
  static StageThresholds from_noise(double noise_level) {
    StageThresholds t;
    for (auto& s : t.stage) s.tau = std::max(s.tau, 3.0 * noise_level);
    return t;
  }

  void validate() const {
    for (const auto& s : stage)
      if (!(s.tau >= 0.0) || !(s.edge_sigma >= 0.0)) throw PreconditionError("stage thresholds must be >= 0");
    for (const auto& s : stage)
      if (!(s.derivative_sigma >= 0.0)) throw PreconditionError("derivative sigma must be >= 0");
    if (thickening < 0 || min_region_voxels < 0)
      throw PreconditionError("segmentation options must be >= 0");
  }

  /// Canny thresholds: a step of height tau smoothed at sigma has peak
  /// gradient tau / (sqrt(2 pi) sigma); rho_high is that, rho_low half of it.
  EdgeOptions edge_options(int s, const GridSpec& g) const {
    const StageOptions& st = stage[static_cast<std::size_t>(s)];
    EdgeOptions o;
    o.sigma = st.edge_sigma;
    o.margin = margin;
    o.min_component_area = st.min_component_area;
    const double sig_phys = std::max(st.edge_sigma, 0.5) * g.mean_spacing();
    const double peak = std::max(st.tau, 1e-12) / (std::sqrt(2.0 * 3.14159265358979323846) * sig_phys);
    o.rho_high = st.rho_high > 0.0 ? st.rho_high : peak;
    o.rho_low = st.rho_low > 0.0 ? st.rho_low : 0.5 * o.rho_high;
    o.rho_low = std::min(o.rho_low, o.rho_high);
    return o;
  }
};

// ---------------------------------------------------------------------------
// Voxel-level helpers

/// Marks every voxel nearest to a dense sampling of the surface triangles.
inline std::vector<std::uint8_t> voxelize_surface(const JumpSurface& s, const GridSpec& g) {
  std::vector<std::uint8_t> mark(g.size(), 0);
  const double h = std::min({g.spacing.x, g.spacing.y, g.spacing.z});
  for (std::size_t t = 0; t < s.size(); ++t) {
    const auto c = s.corners(t);
    const double len = std::max({norm(c[1] - c[0]), norm(c[2] - c[0]), norm(c[2] - c[1])});
    const int n = std::max(1, static_cast<int>(std::ceil(len / (0.25 * h))));
    for (int a = 0; a <= n; ++a)
      for (int b = 0; a + b <= n; ++b) {
        const double wa = static_cast<double>(a) / n, wb = static_cast<double>(b) / n;
        const Vec3 p = c[0] * (1.0 - wa - wb) + c[1] * wa + c[2] * wb;
        Index3 v{};
        if (voxel_of(g, p, v)) mark[g.index(v[0], v[1], v[2])] = 1;
      }
  }
  return mark;
}

inline std::vector<Index3> ball_offsets(int r) {
  std::vector<Index3> off;
  for (int dz = -r; dz <= r; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy + dz * dz <= r * r) off.push_back({dx, dy, dz});
  return off;
}

inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& mark, const GridSpec& g, int r) {
  if (r <= 0) return mark;
  std::vector<std::uint8_t> out(mark.size(), 0);
  const auto off = ball_offsets(r);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (!mark[g.index(i, j, k)]) continue;
        for (const auto& o : off) {
          const int a = i + o[0], b = j + o[1], c = k + o[2];
          if (g.contains(a, b, c)) out[g.index(a, b, c)] = 1;
        }
      }
  return out;
}

/// Face-connected regions of unmarked voxels; marked voxels get label 0.
inline LabelVolume regions_from_mask(const std::vector<std::uint8_t>& mark, const GridSpec& g) {
  LabelVolume cls(g, 1);
  for (std::size_t p = 0; p < g.size(); ++p)
    if (mark[p]) cls[p] = 0;
  return connected_components(cls, 0);
}

/// Renumbers labels 1..M by scan order of first occurrence, keeping 0.
inline LabelVolume compact_labels(const LabelVolume& labels) {
  std::map<int, int> remap;
  LabelVolume out(labels.grid(), 0);
  int next = 0;
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const int l = labels[p];
    if (l == 0) continue;
    auto it = remap.find(l);
    if (it == remap.end()) it = remap.emplace(l, ++next).first;
    out[p] = it->second;
  }
  return out;
}

/// Regions below `min_voxels` take the label of the nearest region reachable
/// through unlabelled voxels within `reach` steps (ties go to the larger
/// one); returns merge messages.
inline std::vector<std::string> merge_small_regions(LabelVolume& labels, std::size_t min_voxels, int reach) {
  std::vector<std::string> msgs;
  const GridSpec& g = labels.grid();
  auto counts = label_counts(labels);
  static const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  std::vector<std::vector<std::size_t>> members(counts.size());
  for (std::size_t p = 0; p < labels.size(); ++p)
    if (labels[p] > 0 && counts[static_cast<std::size_t>(labels[p])] < min_voxels)
      members[static_cast<std::size_t>(labels[p])].push_back(p);
  for (std::size_t l = 1; l < counts.size(); ++l) {
    if (counts[l] == 0 || counts[l] >= min_voxels) continue;
    std::map<std::size_t, int> seen;
    std::deque<std::size_t> q;
    for (std::size_t p : members[l]) {
      seen[p] = 0;
      q.push_back(p);
    }
    std::set<int> found;
    int found_at = reach + 1;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop_front();
      const int d = seen[p];
      if (d >= reach || d >= found_at) continue;
      const Index3 c = g.unravel(p);
      for (const auto& o : off) {
        const int a = c[0] + o[0], b = c[1] + o[1], e = c[2] + o[2];
        if (!g.contains(a, b, e)) continue;
        const std::size_t r = g.index(a, b, e);
        if (seen.count(r)) continue;
        const int lr = labels[r];
        if (lr != 0 && lr != static_cast<int>(l)) {
          found.insert(lr);
          found_at = d;
          continue;
        }
        seen[r] = d + 1;
        q.push_back(r);
      }
    }
    int best = 0;
    std::size_t best_n = 0;
    for (int f : found)
      if (counts[static_cast<std::size_t>(f)] > best_n) {
        best_n = counts[static_cast<std::size_t>(f)];
        best = f;
      }
    if (best == 0) {
      msgs.push_back("region of " + std::to_string(counts[l]) + " voxels kept: no neighbour found");
      continue;
    }
    for (std::size_t p : members[l]) labels[p] = best;
    counts[static_cast<std::size_t>(best)] += counts[l];
    counts[l] = 0;
    msgs.push_back("merged region of " + std::to_string(members[l].size()) + " voxels into a neighbour");
    // a small target may itself be merged later and must carry these voxels
    auto& dst = members[static_cast<std::size_t>(best)];
    if (!dst.empty()) dst.insert(dst.end(), members[l].begin(), members[l].end());
    members[l].clear();
  }
  return msgs;
}

/// Closed staircase surface between voxels of different labels: two
/// triangles per shared face, normal pointing towards the larger label.
inline JumpSurface label_boundary_surface(const LabelVolume& labels) {
  const GridSpec& g = labels.grid();
  JumpSurface s;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        for (int a = 0; a < 3; ++a) {
          Index3 q{i, j, k};
          ++q[static_cast<std::size_t>(a)];
          if (!g.contains(q[0], q[1], q[2])) continue;
          const int l0 = labels.at(i, j, k), l1 = labels.at(q[0], q[1], q[2]);
          if (l0 == l1) continue;
          const Vec3 c0 = g.center(i, j, k), c1 = g.center(q[0], q[1], q[2]);
          const Vec3 mid = (c0 + c1) * 0.5;
          const int b = (a + 1) % 3, c = (a + 2) % 3;
          Vec3 eb{0, 0, 0}, ec{0, 0, 0};
          eb[b] = 0.5 * g.spacing[b];
          ec[c] = 0.5 * g.spacing[c];
          const int base = static_cast<int>(s.vertices.size());
          s.vertices.push_back(mid - eb - ec);
          s.vertices.push_back(mid + eb - ec);
          s.vertices.push_back(mid + eb + ec);
          s.vertices.push_back(mid - eb + ec);
          // eb x ec points along +axis a
          const bool forward = l1 > l0;
          if (forward) {
            s.triangles.push_back({base, base + 1, base + 2});
            s.triangles.push_back({base, base + 2, base + 3});
          } else {
            s.triangles.push_back({base, base + 2, base + 1});
            s.triangles.push_back({base, base + 3, base + 2});
          }
          Vec3 n{0, 0, 0};
          n[a] = forward ? 1.0 : -1.0;
          s.normals.push_back(n);
          s.normals.push_back(n);
          s.strength.push_back(1.0);
          s.strength.push_back(1.0);
        }
  return s;
}

/// Label found walking from p along dir, starting at `start` voxels and
/// stepping half a voxel up to `stop` voxels; 0 if only unlabelled voxels.
inline int side_label(const LabelVolume& labels, const Vec3& p, const Vec3& dir, double start, double stop) {
  const GridSpec& g = labels.grid();
  const double h = g.mean_spacing();
  for (double d = start; d <= stop + 1e-9; d += 0.5) {
    Index3 v{};
    if (!voxel_of(g, p + dir * (d * h), v)) return 0;
    const int l = labels.at(v[0], v[1], v[2]);
    if (l != 0) return l;
  }
  return 0;
}

/// Builds adjacency, per-interface triangle lists and areas from a label
/// volume and a surface. Triangles whose sides disagree with a two-label
/// interface are discarded.
inline RegionLabeling build_interfaces(const LabelVolume& labels, const JumpSurface& surface, double side_start = 1.5,
                                       double side_stop = 4.0) {
  RegionLabeling out;
  out.labels = labels;
  const GridSpec& g = labels.grid();
  const auto counts = label_counts(labels);
  out.region_volumes.assign(counts.size(), 0.0);
  for (std::size_t l = 0; l < counts.size(); ++l) out.region_volumes[l] = static_cast<double>(counts[l]) * g.voxel_volume();
  for (std::size_t t = 0; t < surface.size(); ++t) {
    const Vec3 y = surface.incenter(t);
    const Vec3 n = surface.normals[t];
    const int lm = side_label(labels, y, n * -1.0, side_start, side_stop);
    const int lp = side_label(labels, y, n, side_start, side_stop);
    if (lm == 0 || lp == 0 || lm == lp) {
      ++out.discarded_triangles;
      continue;
    }
    const RegionPair key = make_pair_sorted(lm, lp);
    const double a = surface.area(t);
    out.interfaces[key].push_back({t, a, lm, lp});
    out.interface_areas[key] += a;
    out.adjacency.insert(key);
  }
  return out;
}

/// Full partition: each unlabelled voxel near an interface triangle takes the
/// label of the side of the nearest such triangle it lies on; the rest are
/// filled from face neighbours.
inline LabelVolume fill_from_surface(const RegionLabeling& lab, const JumpSurface& surface, double reach = 4.0) {
  const GridSpec& g = lab.labels.grid();
  LabelVolume out = lab.labels;
  const double cell = reach * g.mean_spacing();
  struct Entry {
    Vec3 y, n;
    int minus, plus;
  };
  std::vector<Entry> entries;
  for (const auto& [key, tris] : lab.interfaces)
    for (const auto& it : tris)
      entries.push_back({surface.incenter(it.triangle), surface.normals[it.triangle], it.minus_label, it.plus_label});
  const Vec3 ext = g.extent();
  const Index3 nb{std::max(1, static_cast<int>(std::ceil(ext.x / cell))), std::max(1, static_cast<int>(std::ceil(ext.y / cell))),
                  std::max(1, static_cast<int>(std::ceil(ext.z / cell)))};
  auto bucket_of = [&](const Vec3& p, int a) {
    return std::clamp(static_cast<int>(std::floor((p[a] - g.origin[a]) / cell)), 0, nb[static_cast<std::size_t>(a)] - 1);
  };
  std::vector<std::vector<std::size_t>> buckets(static_cast<std::size_t>(nb[0]) * static_cast<std::size_t>(nb[1]) *
                                                static_cast<std::size_t>(nb[2]));
  auto bidx = [&](int i, int j, int k) {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nb[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(nb[1]) * static_cast<std::size_t>(k));
  };
  for (std::size_t e = 0; e < entries.size(); ++e)
    buckets[bidx(bucket_of(entries[e].y, 0), bucket_of(entries[e].y, 1), bucket_of(entries[e].y, 2))].push_back(e);
#pragma omp parallel for schedule(dynamic, 64)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(g.size()); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    if (lab.labels[p] != 0) continue;
    const Index3 v = g.unravel(p);
    const Vec3 x = g.center(v[0], v[1], v[2]);
    const int bi = bucket_of(x, 0), bj = bucket_of(x, 1), bk = bucket_of(x, 2);
    double best = cell * cell;
    const Entry* hit = nullptr;
    for (int k = std::max(0, bk - 1); k <= std::min(nb[2] - 1, bk + 1); ++k)
      for (int j = std::max(0, bj - 1); j <= std::min(nb[1] - 1, bj + 1); ++j)
        for (int i = std::max(0, bi - 1); i <= std::min(nb[0] - 1, bi + 1); ++i)
          for (std::size_t e : buckets[bidx(i, j, k)]) {
            const Vec3 d = x - entries[e].y;
            const double d2 = dot(d, d);
            if (d2 < best) {
              best = d2;
              hit = &entries[e];
            }
          }
    if (hit) out[p] = dot(x - hit->y, hit->n) >= 0.0 ? hit->plus : hit->minus;
  }
  return fill_unassigned(std::move(out));
}

// ---------------------------------------------------------------------------
// Stage fields

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t n = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n), v.end());
  double m = v[n];
  if (v.size() % 2 == 0) {
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
    m = 0.5 * (m + lo);
  }
  return m;
}

/// Floor keeping logarithms finite.
inline double log_floor(double x, double floor) { return std::log(std::max(std::abs(x), floor)); }

inline double max_abs(const ScalarVolume& v) {
  double m = 0.0;
  for (double x : v.values()) m = std::max(m, std::abs(x));
  return m;
}

/// Stage field of one measurement: 0 = log H, 1 = log|grad H|, 2 = log|Lap H / H|.
/// With floor_scale > 0 the gradient floor is relative to |grad H| smoothed
/// at that scale (voxels) instead of its global median.
inline ScalarVolume stage_field(const ScalarVolume& H, int stage, double derivative_sigma, double gradient_floor = 0.0,
                                double floor_scale = 0.0) {
  const GridSpec& g = H.grid();
  ScalarVolume out(g);
  const double hmax = max_abs(H);
  if (!(hmax > 0.0)) throw PreconditionError("stage_field: H must be positive somewhere");
  if (stage == 0) {
    for (std::size_t p = 0; p < H.size(); ++p) out[p] = log_floor(H[p], 1e-12 * hmax);
    return out;
  }
  const ScaleSpaceField f = derivatives(H, derivative_sigma);
  if (stage == 1) {
    const ScalarVolume gm = gradient_magnitude(f);
    double floor = 1e-12 * std::max(max_abs(gm), 1e-300);
    if (gradient_floor > 0.0 && floor_scale > 0.0) {
      const ScalarVolume local = smooth(gm, floor_scale);
      for (std::size_t p = 0; p < H.size(); ++p) out[p] = log_floor(gm[p], std::max(floor, gradient_floor * local[p]));
      return out;
    }
    if (gradient_floor > 0.0) floor = std::max(floor, gradient_floor * median_of(gm.storage()));
    for (std::size_t p = 0; p < H.size(); ++p) out[p] = log_floor(gm[p], floor);
    return out;
  }
  ScalarVolume ratio(g);
  for (std::size_t p = 0; p < H.size(); ++p) ratio[p] = f.laplacian_at(p) / std::max(f.f[p], 1e-12 * hmax);
  const double floor = 1e-12 * std::max(max_abs(ratio), 1e-300);
  for (std::size_t p = 0; p < H.size(); ++p) out[p] = log_floor(ratio[p], floor);
  return out;
}

inline ScalarVolume mean_stage_field(const std::vector<ScalarVolume>& H, int stage, double derivative_sigma,
                                     double gradient_floor = 0.0, double floor_scale = 0.0) {
  ScalarVolume acc(H.front().grid(), 0.0);
  for (const auto& h : H) {
    const ScalarVolume f = stage_field(h, stage, derivative_sigma, gradient_floor, floor_scale);
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += f[p];
  }
  for (double& x : acc.storage()) x /= static_cast<double>(H.size());
  return acc;
}

struct SegmentResult {
  RegionLabeling labeling;
  JumpSurface surface;
  std::array<JumpSurface, 3> stage_surfaces;
  std::vector<std::string> log;
};

inline int auto_mask_radius(const StageThresholds& th, int s) {
  const double se = th.stage[static_cast<std::size_t>(s)].edge_sigma;
  const double sd = s == 0 ? 0.0 : th.stage[static_cast<std::size_t>(s)].derivative_sigma;
  return static_cast<int>(std::ceil(2.0 * std::sqrt(se * se + sd * sd))) + 1;
}

/// Three-stage jump detection and segmentation of K measurements.
/// Edges whose position follows exp(field) while the strength used for
/// hysteresis stays that of the log field.
inline JumpSurface detect_edges_linear_position(const ScalarVolume& log_field, const EdgeOptions& eo,
                                                const std::vector<std::uint8_t>* excluded) {
  ScalarVolume lin(log_field.grid());
  for (std::size_t p = 0; p < lin.size(); ++p) lin[p] = std::exp(log_field[p]);
  CannyFields cf = canny_fields(derivatives(lin, eo.sigma, eo.units));
  cf.strength = canny_fields(derivatives(log_field, eo.sigma, eo.units)).strength;
  return detect_edges(cf, eo, excluded);
}

inline SegmentResult segment(const std::vector<ScalarVolume>& H, const StageThresholds& th) {
  if (H.empty()) throw PreconditionError("segment needs at least one measurement");
  th.validate();
  const GridSpec& g = H.front().grid();
  for (const auto& h : H) {
    require_same_grid(g, h.grid(), "segment");
    if (!all_finite(h)) throw PreconditionError("segment: measurement contains non-finite values");
  }
  SegmentResult res;
  std::vector<std::uint8_t> surface_mark(g.size(), 0);
  static const char* const names[3] = {"log H", "log|grad H|", "log|Lap H/H|"};
  for (int s = 0; s < 3; ++s) {
    const StageOptions& st = th.stage[static_cast<std::size_t>(s)];
    if (!st.enabled) continue;
    const EdgeOptions eo = th.edge_options(s, g);
    const int r = th.thickening + (th.mask_radius >= 0 ? th.mask_radius : auto_mask_radius(th, s));
    const std::vector<std::uint8_t> excluded = dilate(surface_mark, g, r);
    const bool any_excluded = std::any_of(excluded.begin(), excluded.end(), [](std::uint8_t v) { return v != 0; });
    JumpSurface js;
    if (th.union_edges) {
      for (const auto& h : H)
        append_surface(js, detect_edges(stage_field(h, s, st.derivative_sigma, th.gradient_floor, th.floor_scale), eo, any_excluded ? &excluded : nullptr));
    } else {
      const ScalarVolume field = mean_stage_field(H, s, st.derivative_sigma, th.gradient_floor, th.floor_scale);
      const auto* ex = any_excluded ? &excluded : nullptr;
      js = s == 2 && th.linear_localization ? detect_edges_linear_position(field, eo, ex) : detect_edges(field, eo, ex);
    }
    res.log.push_back(std::string("stage ") + std::to_string(s + 1) + " (" + names[s] + "): " +
                      std::to_string(js.size()) + " triangles, rho_low " + detail::format_real(eo.rho_low) +
                      ", rho_high " + detail::format_real(eo.rho_high));
    const auto vox = voxelize_surface(js, g);
    for (std::size_t p = 0; p < g.size(); ++p) surface_mark[p] |= vox[p];
    append_surface(res.surface, js);
    res.stage_surfaces[static_cast<std::size_t>(s)] = std::move(js);
  }
  const auto band = dilate(surface_mark, g, th.thickening);
  LabelVolume labels = regions_from_mask(band, g);
  // unbounded reach: the search stops at the nearest region anyway
  const int reach = g.dims[0] + g.dims[1] + g.dims[2];
  for (auto& m : merge_small_regions(labels, static_cast<std::size_t>(th.min_region_voxels), reach))
    res.log.push_back(m);
  labels = compact_labels(labels);
  res.labeling = build_interfaces(labels, res.surface, 1.5, th.thickening + 3.0);
  res.labeling.log = res.log;
  return res;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct JumpStats {
  std::vector<double> values;  // plus side minus minus side, oriented larger label minus smaller
  double median = 0.0;
  double median_abs = 0.0;
  double mean = 0.0;
};

/// Two-sided differences of `field` across each interface, sampled by
/// trilinear interpolation at incenter +- distance (voxels) along the normal.
inline std::map<RegionPair, JumpStats> interface_jump_magnitudes(const RegionLabeling& lab, const JumpSurface& surface,
                                                                 const ScalarVolume& field, double distance = 1.5) {
  require_same_grid(lab.labels.grid(), field.grid(), "interface_jump_magnitudes");
  const GridSpec& g = field.grid();
  std::map<RegionPair, JumpStats> out;
  const double d = distance * g.mean_spacing();
  for (const auto& [key, tris] : lab.interfaces) {
    JumpStats js;
    for (const auto& it : tris) {
      const Vec3 y = surface.incenter(it.triangle);
      const Vec3 n = surface.normals[it.triangle];
      const double vp = sample_trilinear(field, g.to_voxel(y + n * d));
      const double vm = sample_trilinear(field, g.to_voxel(y - n * d));
      double diff = vp - vm;
      if (it.plus_label < it.minus_label) diff = -diff;
      js.values.push_back(diff);
    }
    std::vector<double> absv(js.values.size());
    std::transform(js.values.begin(), js.values.end(), absv.begin(), [](double x) { return std::abs(x); });
    js.median = median_of(js.values);
    js.median_abs = median_of(absv);
    double s = 0.0;
    for (double v : js.values) s += v;
    js.mean = js.values.empty() ? 0.0 : s / static_cast<double>(js.values.size());
    out.emplace(key, std::move(js));
  }
  return out;
}

/// Best-match Jaccard overlap of each estimated region with ground truth.
inline std::vector<double> region_jaccard(const LabelVolume& estimated, const LabelVolume& truth) {
  require_same_grid(estimated.grid(), truth.grid(), "region_jaccard");
  const int me = max_label(estimated), mt = max_label(truth);
  std::vector<std::vector<std::size_t>> inter(static_cast<std::size_t>(me) + 1,
                                              std::vector<std::size_t>(static_cast<std::size_t>(mt) + 1, 0));
  const auto ce = label_counts(estimated), ct = label_counts(truth);
  for (std::size_t p = 0; p < estimated.size(); ++p)
    ++inter[static_cast<std::size_t>(estimated[p])][static_cast<std::size_t>(truth[p])];
  std::vector<double> out(static_cast<std::size_t>(me) + 1, 0.0);
  for (int e = 1; e <= me; ++e)
    for (int t = 1; t <= mt; ++t) {
      const double i = static_cast<double>(inter[static_cast<std::size_t>(e)][static_cast<std::size_t>(t)]);
      const double u = static_cast<double>(ce[static_cast<std::size_t>(e)] + ct[static_cast<std::size_t>(t)]) - i;
      if (u > 0.0) out[static_cast<std::size_t>(e)] = std::max(out[static_cast<std::size_t>(e)], i / u);
    }
  return out;
}

/// Best-matching estimated label for each ground-truth label (by overlap).
inline std::vector<int> match_regions(const LabelVolume& estimated, const LabelVolume& truth) {
  const int me = max_label(estimated), mt = max_label(truth);
  std::vector<std::vector<std::size_t>> inter(static_cast<std::size_t>(mt) + 1,
                                              std::vector<std::size_t>(static_cast<std::size_t>(me) + 1, 0));
  for (std::size_t p = 0; p < estimated.size(); ++p)
    ++inter[static_cast<std::size_t>(truth[p])][static_cast<std::size_t>(estimated[p])];
  std::vector<int> out(static_cast<std::size_t>(mt) + 1, 0);
  for (int t = 1; t <= mt; ++t) {
    std::size_t best = 0;
    for (int e = 1; e <= me; ++e)
      if (inter[static_cast<std::size_t>(t)][static_cast<std::size_t>(e)] > best) {
        best = inter[static_cast<std::size_t>(t)][static_cast<std::size_t>(e)];
        out[static_cast<std::size_t>(t)] = e;
      }
  }
  return out;
}

inline void write_segment_report(const RegionLabeling& lab, std::ostream& os) {
  os << "region,voxels,volume,neighbours,interface_areas\n";
  const double vv = lab.labels.grid().voxel_volume();
  for (int m = 1; m <= lab.region_count(); ++m) {
    const double vol = lab.region_volumes[static_cast<std::size_t>(m)];
    os << m << ',' << static_cast<std::size_t>(std::llround(vol / vv)) << ',' << detail::format_real(vol) << ',';
    const auto nb = lab.neighbours(m);
    for (std::size_t q = 0; q < nb.size(); ++q) os << (q ? ";" : "") << nb[q];
    os << ',';
    for (std::size_t q = 0; q < nb.size(); ++q)
      os << (q ? ";" : "") << detail::format_real(lab.interface_areas.at(make_pair_sorted(m, nb[q])));
    os << '\n';
  }
}

}  // namespace qpat
