#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Sparse>

#include "qpat/error.hpp"
#include "qpat/phantom.hpp"
#include "qpat/volume.hpp"

namespace qpat {

/// Conforming linear-tetrahedral mesh of a voxel grid. Vertices sit on the
/// voxel corners; every voxel is split into 6 tetrahedra around its main
/// diagonal (Kuhn/Freudenthal split), all cells using the same diagonal.
struct TetMesh {
  static constexpr int tets_per_cell = 6;

  GridSpec grid;
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> tets;
  std::vector<int> boundary_vertices;
  /// Voxel holding each tet's centroid; parameters are looked up there.
  std::vector<int> tet_voxel;

  Index3 lattice() const { return {grid.dims[0] + 1, grid.dims[1] + 1, grid.dims[2] + 1}; }
  int vertex_index(int i, int j, int k) const {
    const Index3 l = lattice();
    return i + l[0] * (j + l[1] * k);
  }
  Index3 vertex_coords(int v) const {
    const Index3 l = lattice();
    return {v % l[0], (v / l[0]) % l[1], v / (l[0] * l[1])};
  }
  bool is_boundary(int v) const {
    const Index3 c = vertex_coords(v);
    const Index3 l = lattice();
    for (int a = 0; a < 3; ++a)
      if (c[a] == 0 || c[a] == l[a] - 1) return true;
    return false;
  }
};

inline double signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return dot(b - a, cross(c - a, d - a)) / 6.0;
}

inline TetMesh build_mesh(const GridSpec& grid) {
  grid.validate();
  TetMesh mesh;
  mesh.grid = grid;
  const Index3 l = mesh.lattice();
  mesh.vertices.reserve(static_cast<std::size_t>(l[0]) * l[1] * l[2]);
  for (int k = 0; k < l[2]; ++k)
    for (int j = 0; j < l[1]; ++j)
      for (int i = 0; i < l[0]; ++i) {
        mesh.vertices.push_back({grid.origin.x + i * grid.spacing.x, grid.origin.y + j * grid.spacing.y,
                                 grid.origin.z + k * grid.spacing.z});
        if (i == 0 || j == 0 || k == 0 || i == l[0] - 1 || j == l[1] - 1 || k == l[2] - 1)
          mesh.boundary_vertices.push_back(mesh.vertex_index(i, j, k));
      }

  // Path o -> o+e_a -> o+e_a+e_b -> o+(1,1,1) for each axis permutation (a,b,c).
  static constexpr int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  static constexpr bool odd[6] = {false, true, true, false, false, true};
  const std::size_t ncell = grid.size();
  mesh.tets.reserve(ncell * TetMesh::tets_per_cell);
  mesh.tet_voxel.reserve(ncell * TetMesh::tets_per_cell);
  for (int k = 0; k < grid.dims[2]; ++k)
    for (int j = 0; j < grid.dims[1]; ++j)
      for (int i = 0; i < grid.dims[0]; ++i) {
        const int voxel = static_cast<int>(grid.index(i, j, k));
        for (int p = 0; p < 6; ++p) {
          int c[3] = {i, j, k};
          std::array<int, 4> t{};
          t[0] = mesh.vertex_index(c[0], c[1], c[2]);
          for (int s = 0; s < 3; ++s) {
            ++c[perms[p][s]];
            t[static_cast<std::size_t>(s) + 1] = mesh.vertex_index(c[0], c[1], c[2]);
          }
          if (odd[p]) std::swap(t[2], t[3]);
          mesh.tets.push_back(t);
          mesh.tet_voxel.push_back(voxel);
        }
      }
  return mesh;
}

// ---------------------------------------------------------------------------
// Illumination (Dirichlet data)

enum class Face { XMinus, XPlus, YMinus, YPlus, ZMinus, ZPlus };

inline Face parse_face(const std::string& s) {
  static const std::map<std::string, Face> faces = {{"-x", Face::XMinus}, {"+x", Face::XPlus}, {"-y", Face::YMinus},
                                                    {"+y", Face::YPlus},  {"-z", Face::ZMinus}, {"+z", Face::ZPlus}};
  const auto it = faces.find(s);
  if (it == faces.end()) throw ParseError("face", "unknown face '" + s + "' (expected one of +x,-x,+y,-y,+z,-z)");
  return it->second;
}

inline std::string face_name(Face f) {
  static const char* const names[] = {"-x", "+x", "-y", "+y", "-z", "+z"};
  return names[static_cast<int>(f)];
}

struct UniformIllumination {
  double value = 1.0;
};

/// Gaussian bump centred on one box face on top of a constant floor:
/// f(x) = floor + peak * exp(-|x - c_face|^2 / (2 width^2)) on the whole boundary.
/// width <= 0 selects a quarter of the smallest box extent.
struct FaceIllumination {
  Face face = Face::XPlus;
  double peak = 1.0;
  double width = 0.0;
  double floor = 0.05;
};

/// Explicit value per boundary vertex index.
struct CustomIllumination {
  std::unordered_map<int, double> values;
};

using IlluminationPattern = std::variant<UniformIllumination, FaceIllumination, CustomIllumination>;

inline std::string describe(const IlluminationPattern& p) {
  return std::visit(
      [](const auto& s) -> std::string {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, UniformIllumination>)
          return "uniform:" + detail::format_real(s.value);
        else if constexpr (std::is_same_v<S, FaceIllumination>)
          return "face:" + face_name(s.face) + ":" + detail::format_real(s.peak) + ":" + detail::format_real(s.width) +
                 ":" + detail::format_real(s.floor);
        else
          return "custom";
      },
      p);
}

/// Parses "uniform[:value]" or "face:<+x|-x|...>[:peak[:width[:floor]]]".
inline IlluminationPattern parse_illumination(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t pos; (pos = text.find(':', start)) != std::string::npos; start = pos + 1)
    parts.push_back(text.substr(start, pos - start));
  parts.push_back(text.substr(start));
  auto num = [&](std::size_t i, double def) {
    if (i >= parts.size() || parts[i].empty()) return def;
    try {
      return std::stod(parts[i]);
    } catch (const std::exception&) {
      throw ParseError("illumination", "bad number '" + parts[i] + "' in illumination '" + text + "'");
    }
  };
  if (parts[0] == "uniform") {
    if (parts.size() > 2) throw ParseError("illumination", "too many fields in '" + text + "'");
    return UniformIllumination{num(1, 1.0)};
  }
  if (parts[0] == "face") {
    if (parts.size() < 2 || parts.size() > 5) throw ParseError("illumination", "expected face:<face>[:peak[:width[:floor]]]");
    FaceIllumination f;
    f.face = parse_face(parts[1]);
    f.peak = num(2, 1.0);
    f.width = num(3, 0.0);
    f.floor = num(4, 0.05);
    return f;
  }
  throw ParseError("illumination", "unknown illumination '" + text + "'");
}

inline CustomIllumination custom_from_function(const TetMesh& mesh, const std::function<double(const Vec3&)>& f) {
  CustomIllumination c;
  for (int v : mesh.boundary_vertices) c.values[v] = f(mesh.vertices[static_cast<std::size_t>(v)]);
  return c;
}

/// Dirichlet values aligned with mesh.boundary_vertices.
inline std::vector<double> boundary_values(const TetMesh& mesh, const IlluminationPattern& illum) {
  std::vector<double> out(mesh.boundary_vertices.size());
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, UniformIllumination>) {
          std::fill(out.begin(), out.end(), s.value);
        } else if constexpr (std::is_same_v<S, FaceIllumination>) {
          const GridSpec& g = mesh.grid;
          const Vec3 e = g.extent();
          Vec3 c = g.origin + e * 0.5;
          const int axis = static_cast<int>(s.face) / 2;
          c[axis] = (static_cast<int>(s.face) % 2 == 0) ? g.origin[axis] : g.origin[axis] + e[axis];
          const double w = s.width > 0.0 ? s.width : 0.25 * std::min({e.x, e.y, e.z});
          for (std::size_t b = 0; b < out.size(); ++b) {
            const Vec3 d = mesh.vertices[static_cast<std::size_t>(mesh.boundary_vertices[b])] - c;
            out[b] = s.floor + s.peak * std::exp(-dot(d, d) / (2.0 * w * w));
          }
        } else {
          for (std::size_t b = 0; b < out.size(); ++b) {
            const auto it = s.values.find(mesh.boundary_vertices[b]);
            if (it == s.values.end())
              throw PreconditionError("custom illumination misses boundary vertex " +
                                      std::to_string(mesh.boundary_vertices[b]));
            out[b] = it->second;
          }
        }
      },
      illum);
  for (double v : out)
    if (!(v > 0.0) || !std::isfinite(v)) throw PreconditionError("illumination values must be positive");
  return out;
}

struct SolveOptions {
  double cg_tolerance = 1e-10;
  long max_iterations = 20000;
  double noise_level = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(cg_tolerance > 0.0 && cg_tolerance < 1.0)) throw PreconditionError("cg_tolerance must lie in (0, 1)");
    if (max_iterations < 1) throw PreconditionError("max_iterations must be >= 1");
    if (!(noise_level >= 0.0)) throw PreconditionError("noise_level must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Assembly

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor, int>;

/// Interior (non-Dirichlet) system A x = b of the P1 discretisation of
/// -div(D grad u) + mu u = 0.
struct FemSystem {
  SparseMatrix A;
  Eigen::VectorXd b;
  /// Unknown index per vertex, -1 on the boundary.
  std::vector<int> unknown;
  /// Dirichlet value per vertex (0 for interior vertices).
  std::vector<double> dirichlet;
};

namespace detail {

// The 15 lattice offsets coupled by the Kuhn split, ordered by linear offset.
inline const std::array<Index3, 15>& stencil_offsets() {
  static const std::array<Index3, 15> offs = {{{-1, -1, -1},
                                               {0, -1, -1},
                                               {-1, 0, -1},
                                               {0, 0, -1},
                                               {-1, -1, 0},
                                               {0, -1, 0},
                                               {-1, 0, 0},
                                               {0, 0, 0},
                                               {1, 0, 0},
                                               {0, 1, 0},
                                               {1, 1, 0},
                                               {0, 0, 1},
                                               {1, 0, 1},
                                               {0, 1, 1},
                                               {1, 1, 1}}};
  return offs;
}

inline int stencil_slot(int dx, int dy, int dz) {
  static const auto table = [] {
    std::array<int, 27> t{};
    t.fill(-1);
    const auto& offs = stencil_offsets();
    for (int s = 0; s < 15; ++s) t[static_cast<std::size_t>((offs[static_cast<std::size_t>(s)][0] + 1) + 3 * (offs[static_cast<std::size_t>(s)][1] + 1) + 9 * (offs[static_cast<std::size_t>(s)][2] + 1))] = s;
    return t;
  }();
  return table[static_cast<std::size_t>((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1))];
}

}  // namespace detail

inline FemSystem assemble_system(const TetMesh& mesh, const ParameterMaps& params, const IlluminationPattern& illum) {
  require_same_grid(mesh.grid, params.grid(), "assemble_system");
  for (std::size_t i = 0; i < params.mu.size(); ++i)
    if (!(params.mu[i] > 0.0) || !(params.D[i] > 0.0))
      throw PreconditionError("mu and D must be positive everywhere");

  const std::size_t nv = mesh.vertices.size();
  std::vector<double> coef(nv * 15, 0.0);
  for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
    const auto& tet = mesh.tets[t];
    const Vec3& p0 = mesh.vertices[static_cast<std::size_t>(tet[0])];
    const Vec3 e1 = mesh.vertices[static_cast<std::size_t>(tet[1])] - p0;
    const Vec3 e2 = mesh.vertices[static_cast<std::size_t>(tet[2])] - p0;
    const Vec3 e3 = mesh.vertices[static_cast<std::size_t>(tet[3])] - p0;
    const double det = dot(e1, cross(e2, e3));
    const double vol = det / 6.0;
    Vec3 grad[4];
    grad[1] = cross(e2, e3) * (1.0 / det);
    grad[2] = cross(e3, e1) * (1.0 / det);
    grad[3] = cross(e1, e2) * (1.0 / det);
    grad[0] = -(grad[1] + grad[2] + grad[3]);
    const auto voxel = static_cast<std::size_t>(mesh.tet_voxel[t]);
    const double D = params.D[voxel];
    const double mu = params.mu[voxel];
    Index3 vc[4];
    for (int a = 0; a < 4; ++a) vc[a] = mesh.vertex_coords(tet[static_cast<std::size_t>(a)]);
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        const int lo = std::min(a, b), hi = std::max(a, b);
        const double stiff = vol * dot(grad[lo], grad[hi]);
        const double mass = vol * (a == b ? 2.0 : 1.0) / 20.0;
        const int slot = detail::stencil_slot(vc[b][0] - vc[a][0], vc[b][1] - vc[a][1], vc[b][2] - vc[a][2]);
        coef[static_cast<std::size_t>(tet[static_cast<std::size_t>(a)]) * 15 + static_cast<std::size_t>(slot)] +=
            D * stiff + mu * mass;
      }
  }

  FemSystem sys;
  sys.unknown.assign(nv, -1);
  sys.dirichlet.assign(nv, 0.0);
  const std::vector<double> fb = boundary_values(mesh, illum);
  for (std::size_t b = 0; b < fb.size(); ++b) sys.dirichlet[static_cast<std::size_t>(mesh.boundary_vertices[b])] = fb[b];
  int n = 0;
  for (std::size_t v = 0; v < nv; ++v)
    if (!mesh.is_boundary(static_cast<int>(v))) sys.unknown[v] = n++;

  sys.A.resize(n, n);
  sys.A.reserve(Eigen::VectorXi::Constant(n, 15));
  sys.b = Eigen::VectorXd::Zero(n);
  const Index3 l = mesh.lattice();
  const auto& offs = detail::stencil_offsets();
  for (std::size_t v = 0; v < nv; ++v) {
    const int row = sys.unknown[v];
    if (row < 0) continue;
    for (int s = 0; s < 15; ++s) {
      const Index3& o = offs[static_cast<std::size_t>(s)];
      const auto w = static_cast<std::size_t>(static_cast<long>(v) + o[0] + static_cast<long>(l[0]) * (o[1] + static_cast<long>(l[1]) * o[2]));
      const double c = coef[v * 15 + static_cast<std::size_t>(s)];
      if (c == 0.0 && s != 7) continue;
      if (sys.unknown[w] >= 0)
        sys.A.insert(row, sys.unknown[w]) = c;
      else
        sys.b[row] -= c * sys.dirichlet[w];
    }
  }
  sys.A.makeCompressed();
  return sys;
}

struct FluenceSolution {
  ScalarVolume u;
  std::vector<double> nodal;
  long iterations = 0;
  double residual = 0.0;
};

inline FluenceSolution solve_fluence_detailed(const TetMesh& mesh, const ParameterMaps& params,
                                              const IlluminationPattern& illum, const SolveOptions& opts) {
  opts.validate();
  FemSystem sys = assemble_system(mesh, params, illum);

  Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg;
  cg.setTolerance(opts.cg_tolerance);
  cg.setMaxIterations(static_cast<Eigen::Index>(opts.max_iterations));
  cg.compute(sys.A);
  const Eigen::VectorXd x = cg.solve(sys.b);
  if (cg.info() != Eigen::Success)
    throw SolveError("fluence solve did not converge: relative residual " + detail::format_real(cg.error()) + " after " +
                         std::to_string(cg.iterations()) + " iterations",
                     cg.error(), static_cast<long>(cg.iterations()));

  FluenceSolution out;
  out.iterations = static_cast<long>(cg.iterations());
  out.residual = cg.error();
  out.nodal.resize(mesh.vertices.size());
  for (std::size_t v = 0; v < out.nodal.size(); ++v)
    out.nodal[v] = sys.unknown[v] >= 0 ? x[sys.unknown[v]] : sys.dirichlet[v];

  // The voxel centre lies on the shared diagonal edge of its six tets.
  const GridSpec& g = mesh.grid;
  out.u = ScalarVolume(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        out.u.at(i, j, k) = 0.5 * (out.nodal[static_cast<std::size_t>(mesh.vertex_index(i, j, k))] +
                                   out.nodal[static_cast<std::size_t>(mesh.vertex_index(i + 1, j + 1, k + 1))]);
  return out;
}

inline ScalarVolume solve_fluence(const TetMesh& mesh, const ParameterMaps& params, const IlluminationPattern& illum,
                                  const SolveOptions& opts) {
  return solve_fluence_detailed(mesh, params, illum, opts).u;
}

inline ScalarVolume absorbed_energy(const ScalarVolume& u, const ParameterMaps& params) {
  require_same_grid(u.grid(), params.grid(), "absorbed_energy");
  ScalarVolume e(u.grid());
  for (std::size_t i = 0; i < u.size(); ++i) e[i] = params.mu[i] * u[i];
  return e;
}

/// H = Gamma mu u, optionally with i.i.d. multiplicative Gaussian noise.
/// Noisy values are floored at 1e-12 * max(H) so that log H stays defined.
inline ScalarVolume synthesize_pressure(const ScalarVolume& u, const ParameterMaps& params, const SolveOptions& opts) {
  require_same_grid(u.grid(), params.grid(), "synthesize_pressure");
  ScalarVolume h(u.grid());
  double hmax = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    h[i] = params.Gamma[i] * params.mu[i] * u[i];
    hmax = std::max(hmax, h[i]);
  }
  if (opts.noise_level > 0.0) {
    std::mt19937_64 rng(opts.rng_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double floor = 1e-12 * hmax;
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(h[i] * (1.0 + opts.noise_level * normal(rng)), floor);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Transmission-condition diagnostic

struct InterfaceFlux {
  int m = 0;
  int n = 0;
  std::size_t faces = 0;
  std::size_t skipped = 0;
  double area = 0.0;
  /// Area-weighted mean of |D_m du_m/dnu - D_n du_n/dnu|.
  double mean_abs_mismatch = 0.0;
  /// Area-weighted mean of the two-sided mean flux magnitude.
  double mean_abs_flux = 0.0;
  /// mean_abs_mismatch / mean_abs_flux (0 when there is no flux).
  double relative = 0.0;
};

/// Compares the normal flux D grad(u).nu on both sides of every labelled
/// interface, using second-order one-sided differences over three voxels.
/// Faces without three same-label voxels on a side are skipped.
inline std::vector<InterfaceFlux> transmission_residual(const ScalarVolume& u, const ParameterMaps& params,
                                                        const LabelVolume& labels) {
  require_same_grid(u.grid(), params.grid(), "transmission_residual");
  require_same_grid(u.grid(), labels.grid(), "transmission_residual");
  const GridSpec& g = u.grid();
  struct Acc {
    std::size_t faces = 0, skipped = 0;
    double area = 0.0, mismatch = 0.0, flux = 0.0;
  };
  std::map<std::pair<int, int>, Acc> acc;
  for (int axis = 0; axis < 3; ++axis) {
    const double h = g.spacing[axis];
    const double face_area = g.voxel_volume() / h;
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int i = 0; i < g.dims[0]; ++i) {
          Index3 p{i, j, k};
          Index3 q = p;
          ++q[static_cast<std::size_t>(axis)];
          if (!g.contains(q[0], q[1], q[2])) continue;
          const int lm = labels.at(p[0], p[1], p[2]);
          const int ln = labels.at(q[0], q[1], q[2]);
          if (lm == ln) continue;
          Acc& a = acc[{std::min(lm, ln), std::max(lm, ln)}];
          auto side = [&](Index3 start, int step, int label, double out[3]) {
            for (int s = 0; s < 3; ++s) {
              Index3 c = start;
              c[static_cast<std::size_t>(axis)] += step * s;
              if (!g.contains(c[0], c[1], c[2]) || labels.at(c[0], c[1], c[2]) != label) return false;
              out[s] = u.at(c[0], c[1], c[2]);
            }
            return true;
          };
          double fm[3], fn[3];
          if (!side(p, -1, lm, fm) || !side(q, +1, ln, fn)) {
            ++a.skipped;
            continue;
          }
          const double dm = (2.0 * fm[0] - 3.0 * fm[1] + fm[2]) / h;
          const double dn = (-2.0 * fn[0] + 3.0 * fn[1] - fn[2]) / h;
          const double Fm = params.D[g.index(p[0], p[1], p[2])] * dm;
          const double Fn = params.D[g.index(q[0], q[1], q[2])] * dn;
          ++a.faces;
          a.area += face_area;
          a.mismatch += face_area * std::abs(Fm - Fn);
          a.flux += face_area * 0.5 * (std::abs(Fm) + std::abs(Fn));
        }
  }
  std::vector<InterfaceFlux> out;
  for (const auto& [key, a] : acc) {
    InterfaceFlux f;
    f.m = key.first;
    f.n = key.second;
    f.faces = a.faces;
    f.skipped = a.skipped;
    f.area = a.area;
    if (a.area > 0.0) {
      f.mean_abs_mismatch = a.mismatch / a.area;
      f.mean_abs_flux = a.flux / a.area;
      f.relative = a.flux > 0.0 ? a.mismatch / a.flux : 0.0;
    }
    out.push_back(f);
  }
  return out;
}

}  // namespace qpat
