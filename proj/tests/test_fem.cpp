#include <gtest/gtest.h>

#include <cmath>

#include "qpat/fem.hpp"
#include "qpat/phantom.hpp"
#include "qpat/pipeline.hpp"

using namespace qpat;

namespace {

PhantomSpec unit_cube(int n, Material m = {1.0, 1.0, 1.0}) {
  PhantomSpec s;
  s.grid.dims = {n, n, n};
  s.grid.spacing = {1.0 / n, 1.0 / n, 1.0 / n};
  s.background = m;
  return s;
}

double exp_oracle_error(int n) {
  const PhantomSpec s = unit_cube(n);
  const TetMesh mesh = build_mesh(s.grid);
  const ScalarVolume u = solve_fluence(mesh, rasterize_phantom(s),
                                       custom_from_function(mesh, [](const Vec3& x) { return std::exp(x.x); }), {});
  double e = 0.0;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) e = std::max(e, std::abs(u.at(i, j, k) - std::exp(s.grid.center(i, j, k).x)));
  return e;
}

}  // namespace

TEST(Mesh, TwoCubedGridCounts) {
  GridSpec g;
  g.dims = {2, 2, 2};
  const TetMesh m = build_mesh(g);
  EXPECT_EQ(m.tets.size(), 8u * TetMesh::tets_per_cell);
  EXPECT_EQ(m.vertices.size(), 27u);
  EXPECT_EQ(m.boundary_vertices.size(), 26u);
}

TEST(Mesh, TetVolumesPartitionTheBox) {
  GridSpec g;
  g.dims = {5, 3, 4};
  g.spacing = {0.3, 0.7, 0.2};
  const TetMesh m = build_mesh(g);
  double total = 0.0;
  for (const auto& t : m.tets) {
    const double v = signed_volume(m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]], m.vertices[t[3]]);
    ASSERT_GT(v, 0.0);
    total += v;
  }
  const Vec3 e = g.extent();
  EXPECT_NEAR(total, e.x * e.y * e.z, 1e-12 * e.x * e.y * e.z);
}

TEST(Mesh, DeskGridHasNoDegenerateTets) {
  const PhantomSpec s = read_phantom(std::string(QPAT_SOURCE_DIR) + "/configs/desk_phantom.json");
  const TetMesh m = build_mesh(s.grid);
  const double h = s.grid.spacing.x;
  for (const auto& t : m.tets)
    ASSERT_GT(signed_volume(m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]], m.vertices[t[3]]), 1e-3 * h * h * h);
}

TEST(Forward, ExponentialOracleConverges) {
  const double e8 = exp_oracle_error(8), e16 = exp_oracle_error(16);
  EXPECT_LT(e16, 1e-2);
  EXPECT_GT(e8 / e16, 2.5);
}

TEST(Forward, HarmonicLimitKeepsConstant) {
  const PhantomSpec s = unit_cube(10, {1e-8, 0.7, 1.0});
  const ScalarVolume u = solve_fluence(build_mesh(s.grid), rasterize_phantom(s), UniformIllumination{2.5}, {});
  for (std::size_t p = 0; p < u.size(); ++p) ASSERT_NEAR(u[p], 2.5, 1e-6 * 2.5);
}

// Both media have the same exact solution exp(x); the discrete solutions
// differ only through elements straddling y = 0.
TEST(Forward, HalfSpacePairDataAgreeUnderRefinement) {
  auto gap = [](int n) {
    const PhantomSpec a = half_space_phantom(n, 1.0);
    const PhantomSpec b = half_space_phantom(n, 2.0);
    const TetMesh mesh = build_mesh(a.grid);
    const auto f = custom_from_function(mesh, [](const Vec3& x) { return std::exp(x.x); });
    SolveOptions o;
    const ParameterMaps pa = rasterize_phantom(a), pb = rasterize_phantom(b);
    const ScalarVolume ha = synthesize_pressure(solve_fluence(mesh, pa, f, o), pa, o);
    const ScalarVolume hb = synthesize_pressure(solve_fluence(mesh, pb, f, o), pb, o);
    double d = 0.0;
    for (std::size_t p = 0; p < ha.size(); ++p) d = std::max(d, std::abs(ha[p] - hb[p]) / ha[p]);
    return d;
  };
  const double d8 = gap(8), d16 = gap(16);
  EXPECT_LT(d16, 1e-4);
  EXPECT_GT(d8 / d16, 2.5);
}

TEST(Forward, ScalingInvariance) {
  PhantomSpec s = unit_cube(12, {0.5, 0.3, 2.0});
  s.inclusions.push_back({Sphere{{0.5, 0.5, 0.5}, 0.25}, {2.0, 0.1, 0.5}, "in"});
  SolveOptions o;
  for (double lambda : {0.1, 3.0}) EXPECT_LE(scaling_difference(s, UniformIllumination{1.0}, lambda, o), 100 * o.cg_tolerance);
}

TEST(Forward, AbsorbedEnergyAndPressure) {
  PhantomSpec s = unit_cube(8, {0.1, 1.0, 3.0});
  const ParameterMaps p = rasterize_phantom(s);
  const ScalarVolume u(s.grid, 2.0);
  const ScalarVolume E = absorbed_energy(u, p);
  for (std::size_t i = 0; i < E.size(); ++i) EXPECT_DOUBLE_EQ(E[i], 0.2);
  SolveOptions o;
  const ScalarVolume H = synthesize_pressure(u, p, o);
  for (std::size_t i = 0; i < H.size(); ++i) EXPECT_DOUBLE_EQ(H[i] / p.Gamma[i], E[i]);
}

TEST(Forward, NoiselessPressureIsExactProduct) {
  PhantomSpec s = unit_cube(10, {0.3, 0.5, 1.5});
  s.inclusions.push_back({Box{{0.2, 0.2, 0.2}, {0.6, 0.6, 0.6}}, {1.0, 2.0, 0.5}, "box"});
  const ParameterMaps p = rasterize_phantom(s);
  const ScalarVolume u = solve_fluence(build_mesh(s.grid), p, FaceIllumination{}, {});
  const ScalarVolume H = synthesize_pressure(u, p, {});
  for (std::size_t i = 0; i < H.size(); ++i) {
    ASSERT_EQ(H[i], p.Gamma[i] * p.mu[i] * u[i]);
    ASSERT_GT(u[i], 0.0);
  }
}

TEST(Forward, NoiseLevelMatchesSnrAndIsReproducible) {
  PhantomSpec s = unit_cube(40);
  const ParameterMaps p = rasterize_phantom(s);
  const ScalarVolume u(s.grid, 1.0);
  SolveOptions o;
  o.noise_level = 0.05;
  o.rng_seed = 7;
  const ScalarVolume a = synthesize_pressure(u, p, o), b = synthesize_pressure(u, p, o);
  EXPECT_EQ(a, b);
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - 1.0) * (a[i] - 1.0);
  const double snr = 20.0 * std::log10(1.0 / std::sqrt(sq / a.size()));
  EXPECT_NEAR(snr, 26.02, 0.2);
  o.rng_seed = 8;
  EXPECT_NE(synthesize_pressure(u, p, o), a);
}

TEST(Forward, IlluminationParsing) {
  EXPECT_TRUE(std::holds_alternative<UniformIllumination>(parse_illumination("uniform")));
  const auto f = std::get<FaceIllumination>(parse_illumination("face:-y:2:0.5:0.1"));
  EXPECT_EQ(f.face, Face::YMinus);
  EXPECT_EQ(f.peak, 2.0);
  EXPECT_EQ(f.width, 0.5);
  EXPECT_EQ(f.floor, 0.1);
  EXPECT_THROW(parse_illumination("face:+w"), ParseError);
  EXPECT_THROW(parse_illumination("laser"), ParseError);
}

TEST(Forward, SolverRejectsBadOptions) {
  SolveOptions o;
  o.cg_tolerance = 0.0;
  EXPECT_THROW(o.validate(), PreconditionError);
  o = {};
  o.max_iterations = 3;
  const PhantomSpec s = unit_cube(16);
  EXPECT_THROW(solve_fluence(build_mesh(s.grid), rasterize_phantom(s), FaceIllumination{}, o), SolveError);
}

TEST(Transmission, ConstantMediumHasNoInterfaces) {
  const PhantomSpec s = unit_cube(8);
  const ParameterMaps p = rasterize_phantom(s);
  const ScalarVolume u = solve_fluence(build_mesh(s.grid), p, UniformIllumination{1.0}, {});
  EXPECT_TRUE(transmission_residual(u, p, p.true_labels).empty());
}

TEST(Transmission, HalfSpaceMismatchShrinks) {
  const auto steps = half_space_refinement({8, 16, 32}, {});
  ASSERT_EQ(steps.size(), 3u);
  EXPECT_LT(steps[1].mismatch, steps[0].mismatch);
  EXPECT_LT(steps[2].mismatch, steps[1].mismatch);
}
