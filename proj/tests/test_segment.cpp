#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qpat/fem.hpp"
#include "qpat/phantom.hpp"
#include "qpat/segment.hpp"

using namespace qpat;

namespace {

struct Simulated {
  PhantomSpec spec;
  ParameterMaps params;
  ScalarVolume u, H;
};

// 10-unit cube with a mu-contrast sphere and a D-contrast sphere.
Simulated two_spheres(int n = 80) {
  Simulated s;
  s.spec.grid.dims = {n, n, n};
  const double h = 10.0 / n;
  s.spec.grid.spacing = {h, h, h};
  s.spec.background = {0.1, 1.0, 1.0};
  s.spec.inclusions.push_back({Sphere{{2.9, 5.0, 5.0}, 1.6}, {0.2, 1.0, 1.0}, "mu"});
  s.spec.inclusions.push_back({Sphere{{7.1, 5.0, 5.0}, 1.6}, {0.1, 0.25, 1.0}, "D"});
  s.params = rasterize_phantom(s.spec);
  SolveOptions o;
  s.u = solve_fluence(build_mesh(s.spec.grid), s.params, UniformIllumination{1.0}, o);
  s.H = synthesize_pressure(s.u, s.params, o);
  return s;
}

const Simulated& shared() {
  static const Simulated s = two_spheres();
  return s;
}

ScalarVolume log_of(const ScalarVolume& v) {
  ScalarVolume out(v.grid());
  for (std::size_t p = 0; p < v.size(); ++p) out[p] = std::log(v[p]);
  return out;
}

}  // namespace

TEST(Segment, UniformDataIsOneRegion) {
  GridSpec g;
  g.dims = {24, 24, 24};
  g.spacing = {0.1, 0.1, 0.1};
  const SegmentResult r = segment({ScalarVolume(g, 0.7)}, StageThresholds{});
  EXPECT_EQ(r.labeling.region_count(), 1);
  EXPECT_TRUE(r.labeling.interfaces.empty());
  EXPECT_EQ(r.surface.size(), 0u);
}

TEST(Segment, RejectsEmptyAndMismatchedInput) {
  EXPECT_THROW(segment({}, StageThresholds{}), PreconditionError);
  GridSpec a, b;
  a.dims = {10, 10, 10};
  b.dims = {10, 10, 11};
  EXPECT_THROW(segment({ScalarVolume(a, 1.0), ScalarVolume(b, 1.0)}, StageThresholds{}), PreconditionError);
}

TEST(Segment, MuAndDSpheresAreSeparated) {
  const Simulated& s = shared();
  const SegmentResult r = segment({s.H}, StageThresholds{});
  ASSERT_EQ(r.labeling.region_count(), 3);
  // the mu sphere shows in log H, the D sphere only from the gradient on
  EXPECT_GT(r.stage_surfaces[0].size(), 0u);
  EXPECT_GT(r.stage_surfaces[1].size(), 0u);
  const auto jac = region_jaccard(fill_from_surface(r.labeling, r.surface), s.params.true_labels);
  for (int m = 1; m <= 3; ++m) EXPECT_GT(jac[static_cast<std::size_t>(m)], 0.85) << m;
  EXPECT_EQ(r.labeling.adjacency.size(), 2u);
}

TEST(Segment, FromNoiseRaisesThresholds) {
  const StageThresholds t = StageThresholds::from_noise(0.2);
  for (const auto& s : t.stage) EXPECT_GE(s.tau, 0.6);
  const StageThresholds d = StageThresholds::from_noise(0.0);
  EXPECT_EQ(d.stage[0].tau, StageThresholds{}.stage[0].tau);
}

TEST(JumpMagnitudes, TrueLabelsGiveLogTwoForMuContrast) {
  const Simulated& s = shared();
  const JumpSurface surf = label_boundary_surface(s.params.true_labels);
  const RegionLabeling lab = build_interfaces(s.params.true_labels, surf);
  const auto j = interface_jump_magnitudes(lab, surf, log_of(s.H));
  ASSERT_TRUE(j.count({1, 2}));
  EXPECT_NEAR(j.at({1, 2}).median, std::log(2.0), 0.05);
  ASSERT_TRUE(j.count({1, 3}));
  EXPECT_NEAR(j.at({1, 3}).median, 0.0, 0.05);
}

TEST(JumpMagnitudes, GradientJumpRespectsBound) {
  const Simulated& s = shared();
  const JumpSurface surf = label_boundary_surface(s.params.true_labels);
  const RegionLabeling lab = build_interfaces(s.params.true_labels, surf);
  const ScaleSpaceField du = derivatives(s.u, 0.0);
  ScalarVolume loggrad(s.H.grid());
  const ScaleSpaceField dh = derivatives(s.H, 0.0);
  for (std::size_t p = 0; p < loggrad.size(); ++p) loggrad[p] = std::log(norm(dh.gradient_at(p)) + 1e-300);
  double min_cos = 1.0;
  for (const auto& it : lab.interfaces.at({1, 3})) {
    const Vec3 y = surf.incenter(it.triangle);
    const Vec3 gu = {sample_trilinear(du.grad[0], s.u.grid().to_voxel(y)), sample_trilinear(du.grad[1], s.u.grid().to_voxel(y)),
                     sample_trilinear(du.grad[2], s.u.grid().to_voxel(y))};
    min_cos = std::min(min_cos, std::abs(dot(normalized(gu), surf.normals[it.triangle])));
  }
  const double bound = predicted_gradient_jump(1.0, 0.25, 0.1, 0.1, std::max(min_cos, 1e-6));
  const auto j = interface_jump_magnitudes(lab, surf, loggrad, 2.0);
  EXPECT_GE(j.at({1, 3}).median_abs, bound - 0.05);
  EXPECT_GT(j.at({1, 3}).median_abs, 0.5);
}

TEST(JumpMagnitudes, ConstantFieldHasZeroJumps) {
  const Simulated& s = shared();
  const JumpSurface surf = label_boundary_surface(s.params.true_labels);
  const RegionLabeling lab = build_interfaces(s.params.true_labels, surf);
  for (const auto& [k, v] : interface_jump_magnitudes(lab, surf, ScalarVolume(s.H.grid(), 2.0))) {
    EXPECT_EQ(v.median_abs, 0.0);
    EXPECT_NEAR(v.mean, 0.0, 1e-14);
  }
}

TEST(Regions, SmallRegionsMergeIntoNearest) {
  GridSpec g;
  g.dims = {12, 6, 6};
  LabelVolume l(g, 0);
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i < 12; ++i) l.at(i, j, k) = i < 5 ? 1 : (i > 6 ? 2 : 0);
  l.at(5, 2, 2) = 3;  // single voxel next to region 1
  l.at(6, 4, 4) = 4;  // single voxel next to region 2
  const auto msgs = merge_small_regions(l, 27, 100);
  EXPECT_EQ(msgs.size(), 2u);
  EXPECT_EQ(l.at(5, 2, 2), 1);
  EXPECT_EQ(l.at(6, 4, 4), 2);
}

TEST(Regions, ChainedMergeCarriesVoxels) {
  GridSpec g;
  g.dims = {12, 4, 4};
  LabelVolume l(g, 0);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 8; i < 12; ++i) l.at(i, j, k) = 3;
  l.at(1, 1, 1) = 1;  // tiny, nearest is region 2
  l.at(3, 1, 1) = 2;  // tiny, nearest is region 3
  l.at(4, 1, 1) = 2;
  merge_small_regions(l, 10, 100);
  EXPECT_EQ(l.at(1, 1, 1), 3);
  EXPECT_EQ(l.at(3, 1, 1), 3);
}

TEST(Regions, JaccardAndReport) {
  const Simulated& s = shared();
  const auto jac = region_jaccard(s.params.true_labels, s.params.true_labels);
  for (std::size_t m = 1; m < jac.size(); ++m) EXPECT_EQ(jac[m], 1.0);
  const JumpSurface surf = label_boundary_surface(s.params.true_labels);
  const RegionLabeling lab = build_interfaces(s.params.true_labels, surf);
  std::ostringstream os;
  write_segment_report(lab, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "region,voxels,volume,neighbours,interface_areas");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("1,", 0), 0u);
  EXPECT_NE(line.find(",2;3,"), std::string::npos);
}
