#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "qpat/error.hpp"
#include "qpat/labeling.hpp"
#include "qpat/scale_space.hpp"
#include "qpat/volume.hpp"

namespace qpat {

struct EdgeOptions {
  double sigma = 1.5;  // voxels
  double rho_low = 0.0;
  double rho_high = 0.0;
  /// Physical area; negative selects the default of 10 voxel faces.
  double min_component_area = -1.0;
  /// Cells touching this many voxels next to the volume boundary are ignored;
  /// negative selects ceil(4 sigma) + 2.
  int margin = -1;
  DerivativeUnits units = DerivativeUnits::Physical;

  void validate() const {
    if (!(sigma >= 0.0)) throw PreconditionError("edge sigma must be >= 0");
    if (!(rho_low > 0.0) || !(rho_low <= rho_high))
      throw PreconditionError("edge thresholds need 0 < rho_low <= rho_high");
  }
  int effective_margin() const {
    const int auto_margin = static_cast<int>(std::ceil(4.0 * sigma)) + 2;
    return std::max(margin < 0 ? auto_margin : margin, third_derivative_margin);
  }
  double effective_min_area(const GridSpec& g) const {
    if (min_component_area >= 0.0) return min_component_area;
    const double face = (g.spacing.x * g.spacing.y + g.spacing.y * g.spacing.z + g.spacing.x * g.spacing.z) / 3.0;
    return 10.0 * face;
  }
};

/// Triangle mesh of an estimated jump set. Triangles are wound so that the
/// right-hand normal points along the smoothed gradient.
struct JumpSurface {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<double> strength;
  std::vector<Vec3> normals;
  /// Pair of voxel indices whose connecting edge generated each vertex
  /// (empty when loaded from file).
  std::vector<std::array<std::size_t, 2>> vertex_edges;

  std::size_t size() const { return triangles.size(); }
  bool empty() const { return triangles.empty(); }

  std::array<Vec3, 3> corners(std::size_t t) const {
    const auto& tr = triangles[t];
    return {vertices[static_cast<std::size_t>(tr[0])], vertices[static_cast<std::size_t>(tr[1])],
            vertices[static_cast<std::size_t>(tr[2])]};
  }
  double area(std::size_t t) const {
    const auto c = corners(t);
    return 0.5 * norm(cross(c[1] - c[0], c[2] - c[0]));
  }
  Vec3 incenter(std::size_t t) const {
    const auto c = corners(t);
    const double a = norm(c[1] - c[2]), b = norm(c[0] - c[2]), d = norm(c[0] - c[1]);
    const double s = a + b + d;
    return (c[0] * a + c[1] * b + c[2] * d) * (1.0 / s);
  }
  double total_area() const {
    double s = 0.0;
    for (std::size_t t = 0; t < size(); ++t) s += area(t);
    return s;
  }
};

inline Vec3 triangle_normal(const Vec3& a, const Vec3& b, const Vec3& c) { return normalized(cross(b - a, c - a)); }

/// Appends `b` to `a`, offsetting indices.
inline void append_surface(JumpSurface& a, const JumpSurface& b) {
  const int off = static_cast<int>(a.vertices.size());
  a.vertices.insert(a.vertices.end(), b.vertices.begin(), b.vertices.end());
  if (a.vertex_edges.size() + b.vertex_edges.size() == a.vertices.size())
    a.vertex_edges.insert(a.vertex_edges.end(), b.vertex_edges.begin(), b.vertex_edges.end());
  else
    a.vertex_edges.clear();
  for (const auto& t : b.triangles) a.triangles.push_back({t[0] + off, t[1] + off, t[2] + off});
  a.strength.insert(a.strength.end(), b.strength.begin(), b.strength.end());
  a.normals.insert(a.normals.end(), b.normals.begin(), b.normals.end());
}

/// Per-voxel quantities of the differential edge definition.
struct CannyFields {
  ScalarVolume g;          // sum v_i v_j f_ij with v = grad f
  ScalarVolume third;      // sum v_i v_j v_k f_ijk, v normalised
  ScalarVolume strength;   // |grad f|
  std::vector<std::uint8_t> valid;
  ScaleSpaceField field;
};

inline CannyFields canny_fields(ScaleSpaceField field) {
  const GridSpec& gr = field.f.grid();
  CannyFields out;
  out.g = ScalarVolume(gr);
  out.third = ScalarVolume(gr);
  out.strength = gradient_magnitude(field);
  out.valid.assign(gr.size(), 0);
  double smax = 0.0;
  for (double s : out.strength.values()) smax = std::max(smax, s);
  const double floor = 1e-12 * smax;
#pragma omp parallel for schedule(static)
  for (int k = 0; k < gr.dims[2]; ++k)
    for (int j = 0; j < gr.dims[1]; ++j)
      for (int i = 0; i < gr.dims[0]; ++i) {
        const std::size_t p = gr.index(i, j, k);
        const Vec3 v = field.gradient_at(p);
        const double s = out.strength[p];
        if (!(s > floor)) continue;
        double g = 0.0;
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) g += v[a] * v[b] * field.hess(a, b)[p];
        out.g[p] = g;
        if (in_interior(gr, {i, j, k}, third_derivative_margin)) {
          out.third[p] = directional_second_third(field, {i, j, k}, v * (1.0 / s)).second;
          out.valid[p] = 1;
        }
      }
  out.field = std::move(field);
  return out;
}

namespace detail {

// Kuhn split of the unit cube spanned by voxel centers; corner bit a is axis a.
inline const std::array<std::array<int, 4>, 6>& cube_tets() {
  static const std::array<std::array<int, 4>, 6> tets = [] {
    std::array<std::array<int, 4>, 6> t{};
    const int perm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (int p = 0; p < 6; ++p) {
      int c = 0;
      t[static_cast<std::size_t>(p)][0] = 0;
      for (int s = 0; s < 3; ++s) {
        c |= 1 << perm[p][s];
        t[static_cast<std::size_t>(p)][static_cast<std::size_t>(s + 1)] = c;
      }
    }
    return t;
  }();
  return tets;
}

struct RawSurface {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 2>> edges;
  std::vector<double> v_strength, v_third;
  std::vector<Vec3> v_grad;
  std::vector<std::array<int, 3>> triangles;
};

}  // namespace detail

/// Zero-crossing surface of g over cells whose eight voxels are valid and
/// not excluded. No sign test or thresholds applied.
inline detail::RawSurface extract_zero_surface(const CannyFields& cf, int margin,
                                               const std::vector<std::uint8_t>* excluded) {
  const GridSpec& gr = cf.g.grid();
  detail::RawSurface rs;
  std::unordered_map<std::uint64_t, int> edge_vertex;
  const std::uint64_t n = gr.size();
  auto vertex_on = [&](std::size_t pa, std::size_t pb) -> int {
    if (pb < pa) std::swap(pa, pb);
    const std::uint64_t key = static_cast<std::uint64_t>(pa) * n + pb;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double ga = cf.g[pa], gb = cf.g[pb];
    const double s = ga / (ga - gb);
    const Index3 ia = gr.unravel(pa), ib = gr.unravel(pb);
    const Vec3 xa = gr.center(ia[0], ia[1], ia[2]), xb = gr.center(ib[0], ib[1], ib[2]);
    const int id = static_cast<int>(rs.vertices.size());
    rs.vertices.push_back(xa + (xb - xa) * s);
    rs.edges.push_back({pa, pb});
    rs.v_strength.push_back((1.0 - s) * cf.strength[pa] + s * cf.strength[pb]);
    rs.v_third.push_back((1.0 - s) * cf.third[pa] + s * cf.third[pb]);
    rs.v_grad.push_back(cf.field.gradient_at(pa) * (1.0 - s) + cf.field.gradient_at(pb) * s);
    edge_vertex.emplace(key, id);
    return id;
  };
  const auto& tets = detail::cube_tets();
  const int lo = margin;
  for (int k = lo; k < gr.dims[2] - 1 - lo; ++k)
    for (int j = lo; j < gr.dims[1] - 1 - lo; ++j)
      for (int i = lo; i < gr.dims[0] - 1 - lo; ++i) {
        std::size_t corner[8];
        bool ok = true;
        int npos = 0;
        for (int c = 0; c < 8 && ok; ++c) {
          corner[c] = gr.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
          if (!cf.valid[corner[c]] || (excluded && (*excluded)[corner[c]])) ok = false;
          npos += cf.g[corner[c]] >= 0.0;
        }
        if (!ok || npos == 0 || npos == 8) continue;
        for (const auto& t : tets) {
          std::array<int, 4> pos{}, neg{};
          int np = 0, nn = 0;
          for (int c : t) {
            if (cf.g[corner[c]] >= 0.0)
              pos[static_cast<std::size_t>(np++)] = c;
            else
              neg[static_cast<std::size_t>(nn++)] = c;
          }
          if (np == 0 || nn == 0) continue;
          if (np == 1 || nn == 1) {
            const int apex = np == 1 ? pos[0] : neg[0];
            const auto& rest = np == 1 ? neg : pos;
            rs.triangles.push_back({vertex_on(corner[apex], corner[rest[0]]), vertex_on(corner[apex], corner[rest[1]]),
                                    vertex_on(corner[apex], corner[rest[2]])});
          } else {
            const int a = vertex_on(corner[pos[0]], corner[neg[0]]);
            const int b = vertex_on(corner[pos[0]], corner[neg[1]]);
            const int c = vertex_on(corner[pos[1]], corner[neg[1]]);
            const int d = vertex_on(corner[pos[1]], corner[neg[0]]);
            rs.triangles.push_back({a, b, c});
            rs.triangles.push_back({a, c, d});
          }
        }
      }
  return rs;
}

/// Hysteresis and size filtering of candidate triangles; returns kept flags.
inline std::vector<std::uint8_t> hysteresis_filter(const std::vector<std::array<int, 3>>& tris,
                                                   const std::vector<double>& strength,
                                                   const std::vector<double>& area, double rho_low,
                                                   double rho_high, double min_area) {
  const std::size_t nt = tris.size();
  UnionFind uf(nt);
  std::unordered_map<std::uint64_t, std::size_t> edge_owner;
  for (std::size_t t = 0; t < nt; ++t) {
    if (!(strength[t] >= rho_low)) continue;
    for (int e = 0; e < 3; ++e) {
      auto a = static_cast<std::uint64_t>(tris[t][static_cast<std::size_t>(e)]);
      auto b = static_cast<std::uint64_t>(tris[t][static_cast<std::size_t>((e + 1) % 3)]);
      if (b < a) std::swap(a, b);
      const std::uint64_t key = (a << 32) | b;
      auto [it, inserted] = edge_owner.emplace(key, t);
      if (!inserted) uf.unite(t, it->second);
    }
  }
  std::vector<std::uint8_t> strong(nt, 0);
  std::vector<double> comp_area(nt, 0.0);
  for (std::size_t t = 0; t < nt; ++t) {
    if (!(strength[t] >= rho_low)) continue;
    const std::size_t r = uf.find(t);
    comp_area[r] += area[t];
    if (strength[t] >= rho_high) strong[r] = 1;
  }
  std::vector<std::uint8_t> keep(nt, 0);
  for (std::size_t t = 0; t < nt; ++t) {
    if (!(strength[t] >= rho_low)) continue;
    const std::size_t r = uf.find(t);
    keep[t] = strong[r] && comp_area[r] >= min_area;
  }
  return keep;
}

/// Edge detection on precomputed fields. `excluded` marks voxels whose cells
/// are skipped (used to restrict later segmentation stages).
inline JumpSurface detect_edges(const CannyFields& cf, const EdgeOptions& opts,
                                const std::vector<std::uint8_t>* excluded = nullptr) {
  opts.validate();
  const GridSpec& gr = cf.g.grid();
  if (excluded && excluded->size() != gr.size()) throw PreconditionError("exclusion mask size mismatch");
  const detail::RawSurface rs = extract_zero_surface(cf, opts.effective_margin(), excluded);

  std::vector<std::array<int, 3>> tris;
  std::vector<double> strength, area;
  std::vector<Vec3> normals;
  const double tiny = 1e-12 * gr.mean_spacing() * gr.mean_spacing();
  for (auto tr : rs.triangles) {
    const Vec3 a = rs.vertices[static_cast<std::size_t>(tr[0])], b = rs.vertices[static_cast<std::size_t>(tr[1])],
               c = rs.vertices[static_cast<std::size_t>(tr[2])];
    const Vec3 cr = cross(b - a, c - a);
    const double ar = 0.5 * norm(cr);
    if (!(ar > tiny)) continue;
    const double la = norm(b - c), lb = norm(a - c), lc = norm(a - b);
    const double ls = la + lb + lc;
    const double w[3] = {la / ls, lb / ls, lc / ls};
    double s = 0.0, third = 0.0;
    Vec3 grad{0, 0, 0};
    for (int q = 0; q < 3; ++q) {
      const auto vi = static_cast<std::size_t>(tr[static_cast<std::size_t>(q)]);
      s += w[q] * rs.v_strength[vi];
      third += w[q] * rs.v_third[vi];
      grad = grad + rs.v_grad[vi] * w[q];
    }
    if (!(third < 0.0)) continue;  // a minimum of |grad f| along v
    if (!(s > 0.0)) continue;
    Vec3 nrm = cr * (1.0 / (2.0 * ar));
    if (dot(nrm, grad) < 0.0) {
      std::swap(tr[1], tr[2]);
      nrm = nrm * -1.0;
    }
    tris.push_back(tr);
    strength.push_back(s);
    area.push_back(ar);
    // the smoothed gradient direction is a steadier normal than the facet's
    const double gn = norm(grad);
    normals.push_back(gn > 0.0 ? grad * (1.0 / gn) : nrm);
  }
  const auto keep = hysteresis_filter(tris, strength, area, opts.rho_low, opts.rho_high, opts.effective_min_area(gr));

  JumpSurface out;
  std::vector<int> remap(rs.vertices.size(), -1);
  for (std::size_t t = 0; t < tris.size(); ++t) {
    if (!keep[t]) continue;
    std::array<int, 3> nt{};
    for (int q = 0; q < 3; ++q) {
      const auto vi = static_cast<std::size_t>(tris[t][static_cast<std::size_t>(q)]);
      if (remap[vi] < 0) {
        remap[vi] = static_cast<int>(out.vertices.size());
        out.vertices.push_back(rs.vertices[vi]);
        out.vertex_edges.push_back(rs.edges[vi]);
      }
      nt[static_cast<std::size_t>(q)] = remap[vi];
    }
    out.triangles.push_back(nt);
    out.strength.push_back(strength[t]);
    out.normals.push_back(normals[t]);
  }
  return out;
}

inline JumpSurface detect_edges(const ScalarVolume& vol, const EdgeOptions& opts,
                                const std::vector<std::uint8_t>* excluded = nullptr) {
  opts.validate();
  for (int a = 0; a < 3; ++a)
    if (vol.grid().dims[a] < 8) throw PreconditionError("detect_edges needs at least 8 voxels per axis");
  if (!all_finite(vol)) throw PreconditionError("detect_edges: input contains non-finite values");
  return detect_edges(canny_fields(derivatives(vol, opts.sigma, opts.units)), opts, excluded);
}

/// Lower bound on the jump of log|grad H| across an interface, given the
/// diffusion and Gamma*mu values on both sides and the minimal cosine between
/// grad u and the interface normal.
inline double predicted_gradient_jump(double Dm, double Dn, double Gmum, double Gmun, double min_cos_alpha) {
  if (!(Dm > 0 && Dn > 0 && Gmum > 0 && Gmun > 0)) throw PreconditionError("predicted_gradient_jump: inputs must be > 0");
  if (!(min_cos_alpha > 0.0 && min_cos_alpha <= 1.0))
    throw PreconditionError("predicted_gradient_jump: min_cos_alpha must lie in (0, 1]");
  const double t = std::abs(std::log(Dm) - std::log(Dn));
  const double gamma = 0.5 * std::log1p(std::expm1(2.0 * t) * min_cos_alpha * min_cos_alpha);
  return gamma - std::abs(std::log(Gmun) - std::log(Gmum));
}

/// Per voxel, the largest normalised |det| over all triples of gradients.
inline ScalarVolume check_determinant_condition(const std::vector<std::array<ScalarVolume, 3>>& grads) {
  if (grads.size() < 3) throw PreconditionError("determinant condition needs at least 3 gradient fields");
  const GridSpec& gr = grads[0][0].grid();
  for (const auto& gf : grads)
    for (const auto& c : gf) require_same_grid(gr, c.grid(), "check_determinant_condition");
  ScalarVolume out(gr, 0.0);
  const std::size_t K = grads.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(gr.size()); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    std::vector<Vec3> v(K);
    std::vector<double> nv(K);
    for (std::size_t q = 0; q < K; ++q) {
      v[q] = {grads[q][0][p], grads[q][1][p], grads[q][2][p]};
      nv[q] = norm(v[q]);
    }
    double best = 0.0;
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a + 1; b < K; ++b)
        for (std::size_t c = b + 1; c < K; ++c) {
          const double den = nv[a] * nv[b] * nv[c];
          if (!(den > 0.0)) continue;
          best = std::max(best, std::abs(dot(v[a], cross(v[b], v[c]))) / den);
        }
    out[p] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Surface I/O: OBJ geometry, CSV sidecar with strength and normal.

inline void write_obj(const JumpSurface& s, std::ostream& os) {
  os << "# qpat jump surface: " << s.vertices.size() << " vertices, " << s.triangles.size() << " triangles\n";
  for (const auto& v : s.vertices)
    os << "v " << detail::format_real(v.x) << ' ' << detail::format_real(v.y) << ' ' << detail::format_real(v.z) << '\n';
  for (const auto& t : s.triangles) os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

inline void write_surface_csv(const JumpSurface& s, std::ostream& os) {
  os << "triangle,strength,nx,ny,nz,area\n";
  for (std::size_t t = 0; t < s.size(); ++t)
    os << t << ',' << detail::format_real(s.strength[t]) << ',' << detail::format_real(s.normals[t].x) << ','
       << detail::format_real(s.normals[t].y) << ',' << detail::format_real(s.normals[t].z) << ','
       << detail::format_real(s.area(t)) << '\n';
}

/// Sidecar path used next to an OBJ file.
inline std::string surface_sidecar_path(const std::string& obj_path) {
  const auto dot_pos = obj_path.rfind('.');
  const auto slash = obj_path.rfind('/');
  const bool has_ext = dot_pos != std::string::npos && (slash == std::string::npos || dot_pos > slash);
  return (has_ext ? obj_path.substr(0, dot_pos) : obj_path) + ".csv";
}

inline void write_surface(const JumpSurface& s, const std::string& obj_path) {
  std::ofstream obj(obj_path);
  if (!obj) throw Error("cannot open '" + obj_path + "' for writing");
  write_obj(s, obj);
  const std::string csv_path = surface_sidecar_path(obj_path);
  std::ofstream csv(csv_path);
  if (!csv) throw Error("cannot open '" + csv_path + "' for writing");
  write_surface_csv(s, csv);
}

/// Reads an OBJ mesh; normals are recomputed from the winding and strength
/// set to 1. read_surface overrides both from the sidecar CSV when present.
inline JumpSurface read_obj(std::istream& is) {
  JumpSurface s;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x >> v.y >> v.z)) throw ParseError("v", "bad vertex on line " + std::to_string(lineno));
      s.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> t{};
      for (int q = 0; q < 3; ++q) {
        std::string tok;
        if (!(ls >> tok)) throw ParseError("f", "bad face on line " + std::to_string(lineno));
        t[static_cast<std::size_t>(q)] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      for (int q : t)
        if (q < 0 || static_cast<std::size_t>(q) >= s.vertices.size())
          throw ParseError("f", "face index out of range on line " + std::to_string(lineno));
      s.triangles.push_back(t);
    }
  }
  for (std::size_t t = 0; t < s.size(); ++t) {
    const auto c = s.corners(t);
    s.normals.push_back(triangle_normal(c[0], c[1], c[2]));
  }
  s.strength.assign(s.size(), 1.0);
  return s;
}

inline void read_surface_csv(JumpSurface& s, std::istream& is) {
  std::string line;
  std::getline(is, line);
  std::size_t n = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::array<std::string, 5> col;
    for (auto& c : col) std::getline(ls, c, ',');
    if (n >= s.size()) throw ParseError("strength", "sidecar has more rows than triangles");
    s.strength[n] = std::stod(col[1]);
    // stored normals carry the smoothed gradient direction, not the facet's
    if (!col[4].empty()) s.normals[n] = {std::stod(col[2]), std::stod(col[3]), std::stod(col[4])};
    ++n;
  }
  if (n != s.size()) throw ParseError("strength", "sidecar row count does not match triangle count");
}

inline JumpSurface read_surface(const std::string& obj_path) {
  std::ifstream obj(obj_path);
  if (!obj) throw Error("cannot open '" + obj_path + "'");
  JumpSurface s = read_obj(obj);
  std::ifstream csv(surface_sidecar_path(obj_path));
  if (csv) read_surface_csv(s, csv);
  return s;
}

}  // namespace qpat
