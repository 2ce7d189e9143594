#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "qpat/estimate.hpp"
#include "qpat/segment.hpp"

using namespace qpat;

namespace {

GridSpec cube(int n, double h) {
  GridSpec g;
  g.dims = {n, n, n};
  g.spacing = {h, h, h};
  return g;
}

// Two labels split by the plane y = n h / 2.
LabelVolume split_y(const GridSpec& g) {
  LabelVolume l(g, 1);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = g.dims[1] / 2; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) l.at(i, j, k) = 2;
  return l;
}

template <class F>
ScalarVolume sample(const GridSpec& g, F f) {
  ScalarVolume v(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) v.at(i, j, k) = f(g.center(i, j, k));
  return v;
}

// Random connected graph on M nodes: a random spanning tree plus extra edges.
std::vector<std::pair<int, int>> random_graph(int M, std::mt19937_64& rng) {
  std::vector<std::pair<int, int>> e;
  for (int m = 2; m <= M; ++m) e.push_back({std::uniform_int_distribution<int>(1, m - 1)(rng), m});
  for (int x = 0; x < M; ++x) {
    const int a = std::uniform_int_distribution<int>(1, M)(rng), b = std::uniform_int_distribution<int>(1, M)(rng);
    if (a != b) e.push_back({std::min(a, b), std::max(a, b)});
  }
  return e;
}

}  // namespace

TEST(LogLinearFit, ExactOnLogLinearData) {
  std::vector<Vec3> off;
  std::vector<double> val, w;
  for (int i = -2; i <= 2; ++i)
    for (int j = -2; j <= 2; ++j)
      for (int k = 0; k <= 3; ++k) {
        const Vec3 d{0.1 * i, 0.1 * j, 0.1 * k + 0.05};
        off.push_back(d);
        val.push_back(0.3 + 1.5 * d.x - 2.0 * d.y + 0.25 * d.z);
        w.push_back(1.0 + 0.1 * k);
      }
  for (int order : {1, 2}) {
    const LogLinearFit f = fit_log_linear(off, val, w, 12, order, 0.3, {0, 0, 1});
    ASSERT_TRUE(f.ok);
    EXPECT_NEAR(f.p, 0.3, 1e-10);
    EXPECT_NEAR(f.q.x, 1.5, 1e-9);
    EXPECT_NEAR(f.q.y, -2.0, 1e-9);
    EXPECT_NEAR(f.q.z, 0.25, 1e-9);
  }
  EXPECT_FALSE(fit_log_linear(off, val, w, 1000).ok);
}

TEST(InterfaceFit, ExponentialAcrossPlane) {
  const GridSpec g = cube(16, 0.1);
  const LabelVolume l = split_y(g);
  const JumpSurface s = label_boundary_surface(l);
  const RegionLabeling lab = build_interfaces(l, s);
  const ScalarVolume H = sample(g, [](const Vec3& x) { return std::exp(x.x + 0.5 * x.y); });
  FitOptions o;
  o.radius = 5.0;  // the quadratic normal term needs three layers beyond the gap
  const InterfaceSamples smp = fit_interface_values({H}, lab, l, s, o);
  std::size_t checked = 0;
  for (const auto& ts : smp.per_pair.at({1, 2})[0]) {
    if (!ts.minus.ok || !ts.plus.ok) continue;
    const Vec3 y = s.incenter(ts.triangle);
    const double h = y.x + 0.5 * y.y;
    EXPECT_NEAR(ts.minus.h, h, 1e-8);
    EXPECT_NEAR(ts.plus.h, h, 1e-8);
    EXPECT_NEAR(ts.plus.g, h + std::log(0.5), 1e-8);
    EXPECT_TRUE(ts.g_valid);
    ++checked;
  }
  EXPECT_GT(checked, 50u);
}

TEST(InterfaceFit, ConstantDataIsExcludedFromGradientSystem) {
  const GridSpec g = cube(12, 0.1);
  const LabelVolume l = split_y(g);
  const JumpSurface s = label_boundary_surface(l);
  const RegionLabeling lab = build_interfaces(l, s);
  const InterfaceSamples smp = fit_interface_values({ScalarVolume(g, 2.0)}, lab, l, s, FitOptions{});
  for (const auto& ts : smp.per_pair.at({1, 2})[0]) {
    if (ts.minus.ok) {
      EXPECT_NEAR(ts.minus.h, std::log(2.0), 1e-10);
    }
    EXPECT_FALSE(ts.g_valid);
  }
  const auto [a, b] = jump_observations(smp);
  EXPECT_FALSE(a.empty());
  EXPECT_TRUE(b.empty());
}

TEST(JumpSystem, SingleInterface) {
  const std::vector<JumpObservation> obs = {{1, 2, 1.0, -std::log(2.0)}};
  const LoglinearSolution s = solve_jump_system(2, 1, std::log(0.1), obs, "a");
  EXPECT_NEAR(s.x[2], std::log(0.2), 1e-15);
}

TEST(JumpSystem, StarTopologyIsAreaWeightedMean) {
  std::vector<JumpObservation> obs = {{1, 2, 1.0, 0.5}, {1, 2, 3.0, 0.1}, {1, 3, 2.0, -0.4}, {3, 1, 1.0, 0.2}};
  const LoglinearSolution s = solve_jump_system(3, 1, 0.7, obs, "a");
  // x1 - x2 = jump, so x2 = x1 - weighted mean
  EXPECT_NEAR(s.x[2], 0.7 - (1.0 * 0.5 + 3.0 * 0.1) / 4.0, 1e-14);
  EXPECT_NEAR(s.x[3], 0.7 - (2.0 * -0.4 + 1.0 * -0.2) / 3.0, 1e-14);
}

TEST(JumpSystem, RandomConsistentGraphsAreExact) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int M = std::uniform_int_distribution<int>(2, 10)(rng);
    std::vector<double> x(static_cast<std::size_t>(M) + 1);
    for (auto& v : x) v = std::normal_distribution<double>(0.0, 2.0)(rng);
    std::vector<JumpObservation> obs;
    for (const auto& [m, n] : random_graph(M, rng))
      obs.push_back({m, n, std::uniform_real_distribution<double>(0.1, 5.0)(rng), x[m] - x[n]});
    const int ref = std::uniform_int_distribution<int>(1, M)(rng);
    const LoglinearSolution s = solve_jump_system(M, ref, x[ref], obs, "a");
    for (int m = 1; m <= M; ++m) ASSERT_NEAR(s.x[m], x[m], 1e-10) << trial << " " << m;
  }
}

TEST(JumpSystem, InconsistentGraphsMatchDenseOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const int M = std::uniform_int_distribution<int>(2, 10)(rng);
    std::vector<JumpObservation> obs;
    for (const auto& [m, n] : random_graph(M, rng))
      for (int rep = 0; rep < 3; ++rep)
        obs.push_back({m, n, std::uniform_real_distribution<double>(0.1, 5.0)(rng), std::normal_distribution<double>()(rng)});
    const int ref = 1;
    const double xr = 0.3;
    const LoglinearSolution s = solve_jump_system(M, ref, xr, obs, "a");
    // dense weighted design matrix over the free unknowns, solved by QR
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(obs.size()), M - 1);
    Eigen::VectorXd b(static_cast<Eigen::Index>(obs.size()));
    for (std::size_t r = 0; r < obs.size(); ++r) {
      const double sw = std::sqrt(obs[r].weight);
      double rhs = obs[r].jump;
      if (obs[r].m == ref) rhs -= xr; else A(static_cast<Eigen::Index>(r), obs[r].m - 2) += sw;
      if (obs[r].n == ref) rhs += xr; else A(static_cast<Eigen::Index>(r), obs[r].n - 2) -= sw;
      b[static_cast<Eigen::Index>(r)] = sw * rhs;
    }
    const Eigen::VectorXd y = A.colPivHouseholderQr().solve(b);
    EXPECT_EQ(s.x[1], xr);
    for (int m = 2; m <= M; ++m) ASSERT_NEAR(s.x[m], y[m - 2], 1e-8) << trial << " " << m;
  }
}

TEST(JumpSystem, DisconnectedRegionIsReported) {
  const std::vector<JumpObservation> obs = {{1, 2, 1.0, 0.1}};
  try {
    solve_jump_system(3, 1, 0.0, obs, "b system");
    FAIL();
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
  }
}

TEST(MuOverD, CoshProfile) {
  const GridSpec g = cube(30, 0.1);
  const double k = std::sqrt(0.1);
  const ScalarVolume H = sample(g, [&](const Vec3& x) { return 5.0 * std::cosh(k * (x.x - 1.0)); });
  FitOptions o;
  o.sample_count = 50;
  const MuOverD c = estimate_mu_over_D({H}, LabelVolume(g, 1), o);
  ASSERT_TRUE(c.c[1]);
  EXPECT_NEAR(*c.c[1], std::log(0.1), 1e-3);
}

TEST(MuOverD, QuadraticFitIsExact) {
  std::vector<Vec3> off;
  std::vector<double> val;
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j)
      for (int k = -3; k <= 3; ++k) {
        const Vec3 d{0.1 * i, 0.1 * j, 0.1 * k};
        off.push_back(d);
        val.push_back(3.0 + d.x * d.x + d.y * d.y + d.z * d.z + 0.4 * d.x - d.y * d.z);
      }
  const QuadraticFit f = fit_quadratic(off, val, 0.3, 20);
  ASSERT_TRUE(f.ok);
  EXPECT_NEAR(f.value, 3.0, 1e-12);
  EXPECT_NEAR(std::log(f.laplacian / f.value), std::log(2.0), 1e-12);
}

TEST(MuOverD, SeededSamplingIsDeterministic) {
  const GridSpec g = cube(20, 0.1);
  const ScalarVolume H = sample(g, [](const Vec3& x) { return std::exp(0.3 * x.x) + 0.2 * std::cos(x.y); });
  FitOptions o;
  o.seed = 99;
  const MuOverD a = estimate_mu_over_D({H}, LabelVolume(g, 1), o), b = estimate_mu_over_D({H}, LabelVolume(g, 1), o);
  EXPECT_EQ(a.c[1], b.c[1]);
  EXPECT_EQ(a.samples[1], b.samples[1]);
}

TEST(Assemble, KnownTriples) {
  auto check = [](double A, double B, double C, Material want) {
    const Material m = assemble_parameters(std::log(A), std::log(B), std::log(C));
    EXPECT_NEAR(m.mu, want.mu, 1e-12 * want.mu);
    EXPECT_NEAR(m.D, want.D, 1e-12 * want.D);
    EXPECT_NEAR(m.Gamma, want.Gamma, 1e-12 * want.Gamma);
  };
  check(0.1, 10.0, 0.1, {0.1, 1.0, 1.0});
  check(1.0, 1.0, 1.0, {1.0, 1.0, 1.0});
  check(0.01, 1000.0, 0.1, {1.0, 10.0, 0.01});
}

TEST(Reference, CompletesPairs) {
  const Material a = complete_reference(parse_reference("mu_gamma:0.1,1", 1), std::log(0.1));
  EXPECT_NEAR(a.D, 1.0, 1e-12);
  const Material b = complete_reference(parse_reference("d_gamma:10,0.01", 1), std::log(0.1));
  EXPECT_NEAR(b.mu, 1.0, 1e-12);
  EXPECT_EQ(b.Gamma, 0.01);
  const Material f = complete_reference(parse_reference("full:0.5,0.2,2", 1), 123.0);
  EXPECT_EQ(f.mu, 0.5);
}

TEST(Reference, MuDPairIsUnderdetermined) {
  try {
    complete_reference(parse_reference("mu_d:0.1,1", 1), std::log(0.1));
    FAIL();
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("underdetermined"), std::string::npos);
  }
}

TEST(Reference, ParsingErrors) {
  EXPECT_THROW(parse_reference("d_gamma:1", 1), ParseError);
  EXPECT_THROW(parse_reference("x:1,2", 1), ParseError);
  EXPECT_THROW(parse_reference("d_gamma:1,abc", 1), ParseError);
  EXPECT_THROW(parse_reference("d_gamma:-1,1", 1), PreconditionError);
  EXPECT_THROW(parse_reference("d_gamma 1,1", 1), ParseError);
}

TEST(Estimate, PlanarInterfaceWithKnownJumps) {
  // Both sides carry exp(x) times a per-region factor; the factor ratio sets
  // the a-jump and the gradient ratio the b-jump.
  const GridSpec g = cube(20, 0.1);
  const LabelVolume l = split_y(g);
  const JumpSurface s = label_boundary_surface(l);
  const RegionLabeling lab = build_interfaces(l, s);
  const double k1 = 1.0, k2 = 2.0;  // exp(k y) profiles normal to the plane
  const double yi = 1.0;
  const ScalarVolume H = sample(g, [&](const Vec3& x) {
    return x.y < yi ? 0.1 * std::exp(k1 * (x.y - yi)) : 0.2 * std::exp(k2 * (x.y - yi));
  });
  FitOptions o;
  o.sample_count = 20;
  const InterfaceSamples smp = fit_interface_values({H}, lab, l, s, o);
  const auto [a, b] = jump_observations(smp);
  const LoglinearResult r = solve_loglinear_systems(a, b, 2, 1, std::log(0.1), 0.0);
  EXPECT_NEAR(r.a.x[2], std::log(0.2), 1e-8);
  // g = log(c k) and b + g is continuous: b_2 = g_1 - g_2 = log(0.1 * 1) - log(0.2 * 2)
  EXPECT_NEAR(r.b.x[2], std::log(0.1 / 0.4), 1e-8);
}
