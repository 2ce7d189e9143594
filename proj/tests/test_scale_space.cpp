#include <gtest/gtest.h>

#include <cmath>

#include "qpat/scale_space.hpp"

using namespace qpat;

namespace {

GridSpec cube(int n, double h = 1.0) {
  GridSpec g;
  g.dims = {n, n, n};
  g.spacing = {h, h, h};
  return g;
}

template <class F>
ScalarVolume sample(const GridSpec& g, F f) {
  ScalarVolume v(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) v.at(i, j, k) = f(g.center(i, j, k));
  return v;
}

}  // namespace

TEST(Smooth, ZeroSigmaIsIdentity) {
  const GridSpec g = cube(7);
  const ScalarVolume v = sample(g, [](const Vec3& x) { return std::sin(x.x) * x.y + x.z * x.z; });
  EXPECT_EQ(smooth(v, 0.0), v);
}

TEST(Smooth, ConstantIsPreserved) {
  const ScalarVolume v(cube(12), 3.7);
  const ScalarVolume s = smooth(v, 2.3);
  for (std::size_t p = 0; p < s.size(); ++p) ASSERT_NEAR(s[p], 3.7, 1e-14 * 3.7);
}

TEST(Smooth, DiracMatchesSampledGaussian) {
  const GridSpec g = cube(33);
  ScalarVolume v(g, 0.0);
  v.at(16, 16, 16) = 1.0;
  const double sigma = 2.0;
  const ScalarVolume s = smooth(v, sigma);
  // oracle: continuous Gaussian sampled on the lattice and normalised per axis
  double norm1 = 0.0;
  for (int t = -8; t <= 8; ++t) norm1 += std::exp(-0.5 * t * t / (sigma * sigma));
  const double peak = 1.0 / (norm1 * norm1 * norm1);
  double worst = 0.0;
  for (int k = 0; k < 33; ++k)
    for (int j = 0; j < 33; ++j)
      for (int i = 0; i < 33; ++i) {
        const double r2 = (i - 16.0) * (i - 16.0) + (j - 16.0) * (j - 16.0) + (k - 16.0) * (k - 16.0);
        worst = std::max(worst, std::abs(s.at(i, j, k) - peak * std::exp(-0.5 * r2 / (sigma * sigma))));
      }
  EXPECT_LE(worst, 1e-4 * peak);
}

TEST(Derivatives, LinearRampIsExact) {
  const GridSpec g = cube(10, 0.3);
  const ScaleSpaceField f = derivatives(sample(g, [](const Vec3& x) { return x.x; }), 0.0);
  for (int k = 1; k < 9; ++k)
    for (int j = 1; j < 9; ++j)
      for (int i = 1; i < 9; ++i) {
        const std::size_t p = g.index(i, j, k);
        ASSERT_NEAR(f.grad[0][p], 1.0, 1e-10);
        ASSERT_NEAR(f.grad[1][p], 0.0, 1e-10);
        for (int h = 0; h < 6; ++h) ASSERT_NEAR(f.hessian[h][p], 0.0, 1e-10);
      }
}

TEST(Derivatives, QuadraticSecondDerivative) {
  const GridSpec g = cube(10, 0.25);
  const ScaleSpaceField f = derivatives(sample(g, [](const Vec3& x) { return x.x * x.x; }), 0.0);
  for (int i = 1; i < 9; ++i) ASSERT_NEAR(f.hessian[0][g.index(i, 5, 5)], 2.0, 1e-8);
}

TEST(Derivatives, SineTaylorRemainder) {
  const double h = 0.1;
  const GridSpec g = cube(20, h);
  const ScaleSpaceField f = derivatives(sample(g, [](const Vec3& x) { return std::sin(x.x); }), 0.0);
  double worst = 0.0;
  for (int i = 1; i < 19; ++i) worst = std::max(worst, std::abs(f.grad[0][g.index(i, 5, 5)] - std::cos(g.center(i, 5, 5).x)));
  EXPECT_LE(worst, h * h / 6.0 * 1.0001);
  EXPECT_GT(worst, 0.5 * h * h / 6.0 * std::cos(g.center(1, 5, 5).x));
}

TEST(Derivatives, VoxelUnitsScaleWithSpacing) {
  const GridSpec g = cube(20, 0.5);
  const ScalarVolume v = sample(g, [](const Vec3& x) { return 3.0 * x.y; });
  const ScaleSpaceField phys = derivatives(v, 1.0), vox = derivatives(v, 1.0, DerivativeUnits::Voxel);
  const std::size_t p = g.index(10, 10, 10);
  EXPECT_NEAR(phys.grad[1][p], 3.0, 1e-10);
  EXPECT_NEAR(vox.grad[1][p], 1.5, 1e-10);
}

TEST(Directional, QuadraticAlongX) {
  const GridSpec g = cube(11, 0.2);
  const ScaleSpaceField f = derivatives(sample(g, [](const Vec3& x) { return x.x * x.x; }), 0.0);
  const auto [d2, d3] = directional_second_third(f, {5, 5, 5}, {1, 0, 0});
  EXPECT_NEAR(d2, 2.0, 1e-8);
  EXPECT_NEAR(d3, 0.0, 1e-8);
}

TEST(Directional, CubicAtOne) {
  const double h = 0.02;
  GridSpec g = cube(15, h);
  g.origin = {1.0 - 7.5 * h, 0.0, 0.0};  // voxel 7 centred at x = 1
  const ScaleSpaceField f = derivatives(sample(g, [](const Vec3& x) { return x.x * x.x * x.x; }), 0.0);
  const auto [d2, d3] = directional_second_third(f, {7, 7, 7}, {1, 0, 0});
  EXPECT_NEAR(d2, 6.0, 1e-6);
  EXPECT_NEAR(d3, 6.0, 1e-3);
}

TEST(Directional, ParityUnderReversal) {
  const GridSpec g = cube(12, 0.3);
  const ScaleSpaceField f =
      derivatives(sample(g, [](const Vec3& x) { return std::sin(x.x) * std::cos(0.5 * x.y) + x.z * x.x * x.y; }), 1.0);
  const Vec3 v = normalized({0.3, -0.8, 0.5});
  const auto a = directional_second_third(f, {6, 5, 6}, v);
  const auto b = directional_second_third(f, {6, 5, 6}, v * -1.0);
  EXPECT_DOUBLE_EQ(a.first, b.first);
  EXPECT_NEAR(a.second, -b.second, 1e-12 * std::max(1.0, std::abs(a.second)));
  EXPECT_THROW(directional_second_third(f, {1, 5, 5}, v), PreconditionError);
}
