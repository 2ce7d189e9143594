#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "qpat/error.hpp"
#include "qpat/labeling.hpp"
#include "qpat/volume.hpp"

namespace qpat {

struct Sphere {
  Vec3 center;
  double radius = 1.0;
};
struct Box {
  Vec3 min;
  Vec3 max;
};
/// Points with (x - point) . normal >= 0.
struct HalfSpace {
  Vec3 point;
  Vec3 normal{0.0, 0.0, 1.0};
};

using RegionShape = std::variant<Sphere, Box, HalfSpace>;

inline bool contains(const RegionShape& shape, const Vec3& p) {
  return std::visit(
      [&](const auto& s) -> bool {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Sphere>) {
          const Vec3 d = p - s.center;
          return dot(d, d) <= s.radius * s.radius;
        } else if constexpr (std::is_same_v<S, Box>) {
          return p.x >= s.min.x && p.x <= s.max.x && p.y >= s.min.y && p.y <= s.max.y && p.z >= s.min.z &&
                 p.z <= s.max.z;
        } else {
          return dot(p - s.point, s.normal) >= 0.0;
        }
      },
      shape);
}

inline void validate(const RegionShape& shape) {
  std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Sphere>) {
          if (!(s.radius > 0.0)) throw PreconditionError("sphere radius must be positive");
        } else if constexpr (std::is_same_v<S, Box>) {
          if (!(s.min.x < s.max.x && s.min.y < s.max.y && s.min.z < s.max.z))
            throw PreconditionError("box min must be below max componentwise");
        } else {
          if (!(norm(s.normal) > 0.0)) throw PreconditionError("half-space normal must be nonzero");
        }
      },
      shape);
}

/// Optical parameter triple of one constant region.
struct Material {
  double mu = 0.1;     // absorption, 1/length
  double D = 1.0;      // diffusion, length
  double Gamma = 1.0;  // Grueneisen, dimensionless

  friend bool operator==(const Material&, const Material&) = default;
};

struct Inclusion {
  RegionShape shape;
  Material material;
  std::string name;
};

struct PhantomSpec {
  GridSpec grid;
  Material background;
  std::vector<Inclusion> inclusions;

  void validate() const {
    grid.validate();
    auto check = [](const Material& m) {
      if (!(m.mu > 0.0 && m.D > 0.0 && m.Gamma > 0.0))
        throw PreconditionError("mu, D and Gamma must all be positive");
    };
    check(background);
    for (const auto& inc : inclusions) {
      check(inc.material);
      qpat::validate(inc.shape);
    }
  }
};

struct ParameterMaps {
  ScalarVolume mu;
  ScalarVolume D;
  ScalarVolume Gamma;
  /// Ground-truth region id per voxel, 1..M.
  LabelVolume true_labels;
  /// Material of each label; index 0 unused.
  std::vector<Material> label_material;
  std::vector<std::string> warnings;

  const GridSpec& grid() const { return mu.grid(); }
  int region_count() const { return static_cast<int>(label_material.size()) - 1; }
};

inline ParameterMaps rasterize_phantom(const PhantomSpec& spec) {
  spec.validate();
  const GridSpec& g = spec.grid;
  LabelVolume material(g, 0);
  std::vector<std::size_t> hits(spec.inclusions.size(), 0);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 c = g.center(i, j, k);
        int m = 0;
        for (std::size_t s = 0; s < spec.inclusions.size(); ++s)
          if (contains(spec.inclusions[s].shape, c)) m = static_cast<int>(s) + 1;
        material.at(i, j, k) = m;
        if (m > 0) ++hits[static_cast<std::size_t>(m - 1)];
      }

  ParameterMaps out;
  for (std::size_t s = 0; s < spec.inclusions.size(); ++s) {
    bool any = false;
    for (int k = 0; k < g.dims[2] && !any; ++k)
      for (int j = 0; j < g.dims[1] && !any; ++j)
        for (int i = 0; i < g.dims[0] && !any; ++i) any = contains(spec.inclusions[s].shape, g.center(i, j, k));
    if (!any)
      out.warnings.push_back("inclusion " + std::to_string(s) +
                             (spec.inclusions[s].name.empty() ? "" : " (" + spec.inclusions[s].name + ")") +
                             " covers no voxel center");
    else if (hits[s] == 0)
      out.warnings.push_back("inclusion " + std::to_string(s) + " is fully overridden by later inclusions");
  }

  // Components in scan order, then stably reordered by material so that the
  // background comes first and inclusions follow in list order.
  const LabelVolume comp = connected_components(material);
  const int ncomp = max_label(comp);
  std::vector<int> comp_material(static_cast<std::size_t>(ncomp) + 1, -1);
  for (std::size_t p = 0; p < comp.size(); ++p)
    if (comp_material[static_cast<std::size_t>(comp[p])] < 0) comp_material[static_cast<std::size_t>(comp[p])] = material[p];
  std::vector<int> order(static_cast<std::size_t>(ncomp));
  std::iota(order.begin(), order.end(), 1);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return comp_material[static_cast<std::size_t>(a)] < comp_material[static_cast<std::size_t>(b)];
  });
  std::vector<int> remap(static_cast<std::size_t>(ncomp) + 1, 0);
  out.label_material.assign(static_cast<std::size_t>(ncomp) + 1, Material{});
  for (int r = 0; r < ncomp; ++r) {
    const int c = order[static_cast<std::size_t>(r)];
    remap[static_cast<std::size_t>(c)] = r + 1;
    const int m = comp_material[static_cast<std::size_t>(c)];
    out.label_material[static_cast<std::size_t>(r) + 1] =
        m == 0 ? spec.background : spec.inclusions[static_cast<std::size_t>(m - 1)].material;
  }

  out.mu = ScalarVolume(g);
  out.D = ScalarVolume(g);
  out.Gamma = ScalarVolume(g);
  out.true_labels = LabelVolume(g);
  for (std::size_t p = 0; p < g.size(); ++p) {
    const int m = material[p];
    const Material& mat = m == 0 ? spec.background : spec.inclusions[static_cast<std::size_t>(m - 1)].material;
    out.mu[p] = mat.mu;
    out.D[p] = mat.D;
    out.Gamma[p] = mat.Gamma;
    out.true_labels[p] = remap[static_cast<std::size_t>(comp[p])];
  }
  return out;
}

/// Same maps with (mu, D, Gamma) -> (s*mu, s*D, Gamma/s).
inline ParameterMaps scaled(const ParameterMaps& p, double s) {
  ParameterMaps out = p;
  for (std::size_t i = 0; i < out.mu.size(); ++i) {
    out.mu[i] *= s;
    out.D[i] *= s;
    out.Gamma[i] /= s;
  }
  for (auto& m : out.label_material) m = {m.mu * s, m.D * s, m.Gamma / s};
  return out;
}

// ---------------------------------------------------------------------------
// JSON schema (see README):
//   { "grid": {"dims": [nx,ny,nz], "spacing": [sx,sy,sz] | s, "origin": [ox,oy,oz]},
//     "background": {"mu": .., "D": .., "Gamma": ..},
//     "inclusions": [ {"name": "..", "shape": {"type": "sphere", "center": [..], "radius": r},
//                      "mu": .., "D": .., "Gamma": ..}, ... ] }
// Shape types: sphere(center, radius), box(min, max), halfspace(point, normal).

namespace detail {

inline Vec3 json_vec3(const nlohmann::json& j, const std::string& key) {
  if (j.is_number()) {
    const double v = j.get<double>();
    return {v, v, v};
  }
  if (!j.is_array() || j.size() != 3) throw ParseError(key, "'" + key + "' must be an array of 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline double json_num(const nlohmann::json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_number()) throw ParseError(ctx + key, "missing numeric field '" + ctx + key + "'");
  return j[key].get<double>();
}

inline Material json_material(const nlohmann::json& j, const std::string& ctx) {
  return {json_num(j, "mu", ctx), json_num(j, "D", ctx), json_num(j, "Gamma", ctx)};
}

}  // namespace detail

inline GridSpec grid_from_json(const nlohmann::json& j) {
  GridSpec g;
  if (!j.contains("dims")) throw ParseError("grid.dims", "missing 'grid.dims'");
  const auto& d = j["dims"];
  if (!d.is_array() || d.size() != 3) throw ParseError("grid.dims", "'grid.dims' must hold 3 integers");
  for (int a = 0; a < 3; ++a) g.dims[a] = d[static_cast<std::size_t>(a)].get<int>();
  if (j.contains("spacing"))
    g.spacing = detail::json_vec3(j["spacing"], "grid.spacing");
  else if (j.contains("extent")) {
    const Vec3 e = detail::json_vec3(j["extent"], "grid.extent");
    g.spacing = {e.x / g.dims[0], e.y / g.dims[1], e.z / g.dims[2]};
  }
  if (j.contains("origin")) g.origin = detail::json_vec3(j["origin"], "grid.origin");
  return g;
}

inline nlohmann::json to_json(const GridSpec& g) {
  return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"spacing", {g.spacing.x, g.spacing.y, g.spacing.z}},
          {"origin", {g.origin.x, g.origin.y, g.origin.z}}};
}

namespace detail {

inline PhantomSpec phantom_from_json_unchecked(const nlohmann::json& j) {
  PhantomSpec spec;
  if (!j.contains("grid")) throw ParseError("grid", "missing 'grid'");
  spec.grid = grid_from_json(j["grid"]);
  if (!j.contains("background")) throw ParseError("background", "missing 'background'");
  spec.background = detail::json_material(j["background"], "background.");
  if (j.contains("inclusions")) {
    std::size_t idx = 0;
    for (const auto& inc : j["inclusions"]) {
      const std::string ctx = "inclusions[" + std::to_string(idx++) + "].";
      Inclusion out;
      out.material = detail::json_material(inc, ctx);
      out.name = inc.value("name", "");
      if (!inc.contains("shape")) throw ParseError(ctx + "shape", "missing '" + ctx + "shape'");
      const auto& s = inc["shape"];
      const std::string type = s.value("type", "");
      if (type == "sphere") {
        out.shape = Sphere{detail::json_vec3(s.at("center"), ctx + "shape.center"), detail::json_num(s, "radius", ctx + "shape.")};
      } else if (type == "box") {
        out.shape = Box{detail::json_vec3(s.at("min"), ctx + "shape.min"), detail::json_vec3(s.at("max"), ctx + "shape.max")};
      } else if (type == "halfspace") {
        out.shape = HalfSpace{detail::json_vec3(s.at("point"), ctx + "shape.point"),
                              detail::json_vec3(s.at("normal"), ctx + "shape.normal")};
      } else {
        throw ParseError(ctx + "shape.type", "unknown shape type '" + type + "'");
      }
      spec.inclusions.push_back(std::move(out));
    }
  }
  spec.validate();
  return spec;
}

}  // namespace detail

inline PhantomSpec phantom_from_json(const nlohmann::json& j) {
  try {
    return detail::phantom_from_json_unchecked(j);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("json", std::string("phantom JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const PhantomSpec& spec) {
  auto mat = [](const Material& m) { return nlohmann::json{{"mu", m.mu}, {"D", m.D}, {"Gamma", m.Gamma}}; };
  auto v3 = [](const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); };
  nlohmann::json incs = nlohmann::json::array();
  for (const auto& inc : spec.inclusions) {
    nlohmann::json j = mat(inc.material);
    if (!inc.name.empty()) j["name"] = inc.name;
    std::visit(
        [&](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, Sphere>)
            j["shape"] = {{"type", "sphere"}, {"center", v3(s.center)}, {"radius", s.radius}};
          else if constexpr (std::is_same_v<S, Box>)
            j["shape"] = {{"type", "box"}, {"min", v3(s.min)}, {"max", v3(s.max)}};
          else
            j["shape"] = {{"type", "halfspace"}, {"point", v3(s.point)}, {"normal", v3(s.normal)}};
        },
        inc.shape);
    incs.push_back(std::move(j));
  }
  return {{"grid", to_json(spec.grid)}, {"background", mat(spec.background)}, {"inclusions", incs}};
}

inline PhantomSpec read_phantom(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open phantom '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("json", std::string("phantom JSON: ") + e.what());
  }
  return phantom_from_json(j);
}

}  // namespace qpat
