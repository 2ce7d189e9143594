#pragma once

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "qpat/error.hpp"
#include "qpat/volume.hpp"

namespace qpat {

/// Normalised truncated Gaussian, radius ceil(4 sigma); sigma in voxels.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int r = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> w(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int t = -r; t <= r; ++t) {
    w[static_cast<std::size_t>(t + r)] = std::exp(-0.5 * t * t / (sigma * sigma));
    sum += w[static_cast<std::size_t>(t + r)];
  }
  for (double& x : w) x /= sum;
  return w;
}

namespace detail {

// One separable pass along `axis` with edge replication.
inline ScalarVolume convolve_axis(const ScalarVolume& in, const std::vector<double>& w, int axis) {
  const GridSpec& g = in.grid();
  ScalarVolume out(g);
  const int r = static_cast<int>(w.size() / 2);
  const int n = g.dims[axis];
  const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(g.dims[0])
                                                        : static_cast<std::size_t>(g.dims[0]) * static_cast<std::size_t>(g.dims[1]));
  const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
  std::vector<double> line(static_cast<std::size_t>(n));
#pragma omp parallel for collapse(2) firstprivate(line) schedule(static)
  for (int b = 0; b < g.dims[o2]; ++b)
    for (int a = 0; a < g.dims[o1]; ++a) {
      Index3 c{0, 0, 0};
      c[static_cast<std::size_t>(o1)] = a;
      c[static_cast<std::size_t>(o2)] = b;
      const std::size_t base = g.index(c[0], c[1], c[2]);
      for (int t = 0; t < n; ++t) line[static_cast<std::size_t>(t)] = in[base + static_cast<std::size_t>(t) * stride];
      for (int t = 0; t < n; ++t) {
        double acc = 0.0;
        for (int s = -r; s <= r; ++s) {
          const int q = std::clamp(t + s, 0, n - 1);
          acc += w[static_cast<std::size_t>(s + r)] * line[static_cast<std::size_t>(q)];
        }
        out[base + static_cast<std::size_t>(t) * stride] = acc;
      }
    }
  return out;
}

inline std::size_t axis_stride(const GridSpec& g, int axis) {
  return axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(g.dims[0]) : static_cast<std::size_t>(g.dims[0]) * static_cast<std::size_t>(g.dims[1]));
}

// Second-order first derivative along `axis`, one-sided at the ends.
inline ScalarVolume diff1(const ScalarVolume& f, int axis, double h) {
  const GridSpec& g = f.grid();
  ScalarVolume out(g);
  const std::size_t st = axis_stride(g, axis);
  const int n = g.dims[axis];
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Index3 c{i, j, k};
        const int t = c[static_cast<std::size_t>(axis)];
        const std::size_t p = g.index(i, j, k);
        double d;
        if (t == 0)
          d = (-3.0 * f[p] + 4.0 * f[p + st] - f[p + 2 * st]) / (2.0 * h);
        else if (t == n - 1)
          d = (3.0 * f[p] - 4.0 * f[p - st] + f[p - 2 * st]) / (2.0 * h);
        else
          d = (f[p + st] - f[p - st]) / (2.0 * h);
        out[p] = d;
      }
  return out;
}

// Compact second derivative along `axis`, one-sided (second order) at the ends.
inline ScalarVolume diff2(const ScalarVolume& f, int axis, double h) {
  const GridSpec& g = f.grid();
  ScalarVolume out(g);
  const std::size_t st = axis_stride(g, axis);
  const int n = g.dims[axis];
  const double h2 = h * h;
#pragma omp parallel for schedule(static)
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Index3 c{i, j, k};
        const int t = c[static_cast<std::size_t>(axis)];
        const std::size_t p = g.index(i, j, k);
        double d;
        if (t == 0)
          d = (2.0 * f[p] - 5.0 * f[p + st] + 4.0 * f[p + 2 * st] - f[p + 3 * st]) / h2;
        else if (t == n - 1)
          d = (2.0 * f[p] - 5.0 * f[p - st] + 4.0 * f[p - 2 * st] - f[p - 3 * st]) / h2;
        else
          d = (f[p + st] - 2.0 * f[p] + f[p - st]) / h2;
        out[p] = d;
      }
  return out;
}

}  // namespace detail

inline ScalarVolume smooth(const ScalarVolume& vol, double sigma) {
  if (sigma < 0.0) throw PreconditionError("sigma must be >= 0");
  if (sigma == 0.0) return vol;
  const auto w = gaussian_kernel(sigma);
  ScalarVolume out = detail::convolve_axis(vol, w, 0);
  out = detail::convolve_axis(out, w, 1);
  return detail::convolve_axis(out, w, 2);
}

enum class DerivativeUnits { Physical, Voxel };

/// Gaussian-smoothed field with finite-difference gradient and Hessian.
/// Hessian components are stored once per unordered pair, so it is
/// symmetric by construction.
struct ScaleSpaceField {
  double sigma = 0.0;
  ScalarVolume f;
  std::array<ScalarVolume, 3> grad;
  /// xx, yy, zz, xy, xz, yz
  std::array<ScalarVolume, 6> hessian;
  Vec3 step{1.0, 1.0, 1.0};

  static constexpr int hessian_slot(int a, int b) {
    if (a == b) return a;
    const int lo = a < b ? a : b, hi = a < b ? b : a;
    return lo == 0 ? (hi == 1 ? 3 : 4) : 5;
  }
  const ScalarVolume& hess(int a, int b) const { return hessian[static_cast<std::size_t>(hessian_slot(a, b))]; }

  Vec3 gradient_at(std::size_t p) const { return {grad[0][p], grad[1][p], grad[2][p]}; }
  double laplacian_at(std::size_t p) const { return hessian[0][p] + hessian[1][p] + hessian[2][p]; }
};

inline ScaleSpaceField derivatives(const ScalarVolume& vol, double sigma,
                                   DerivativeUnits units = DerivativeUnits::Physical) {
  const GridSpec& g = vol.grid();
  for (int a = 0; a < 3; ++a)
    if (g.dims[a] < 5) throw PreconditionError("derivatives need at least 5 voxels per axis");
  ScaleSpaceField out;
  out.sigma = sigma;
  out.f = smooth(vol, sigma);
  out.step = units == DerivativeUnits::Physical ? g.spacing : Vec3{1.0, 1.0, 1.0};
  for (int a = 0; a < 3; ++a) out.grad[static_cast<std::size_t>(a)] = detail::diff1(out.f, a, out.step[a]);
  for (int a = 0; a < 3; ++a) out.hessian[static_cast<std::size_t>(a)] = detail::diff2(out.f, a, out.step[a]);
  out.hessian[3] = detail::diff1(out.grad[1], 0, out.step[0]);
  out.hessian[4] = detail::diff1(out.grad[2], 0, out.step[0]);
  out.hessian[5] = detail::diff1(out.grad[2], 1, out.step[1]);
  return out;
}

/// Voxels closer than this to the boundary have no central third derivative.
inline constexpr int third_derivative_margin = 2;

inline bool in_interior(const GridSpec& g, const Index3& p, int margin) {
  for (int a = 0; a < 3; ++a)
    if (p[static_cast<std::size_t>(a)] < margin || p[static_cast<std::size_t>(a)] >= g.dims[a] - margin) return false;
  return true;
}

/// Third derivative d^3 f / dx_a dx_b dx_c at voxel p, by central
/// differencing of the stored Hessian along axis c.
inline double third_derivative(const ScaleSpaceField& field, const Index3& p, int a, int b, int c) {
  const ScalarVolume& h = field.hess(a, b);
  Index3 lo = p, hi = p;
  --lo[static_cast<std::size_t>(c)];
  ++hi[static_cast<std::size_t>(c)];
  return (h.at(hi[0], hi[1], hi[2]) - h.at(lo[0], lo[1], lo[2])) / (2.0 * field.step[c]);
}

/// Returns (sum v_i v_j f_ij, sum v_i v_j v_k f_ijk) at voxel p.
inline std::pair<double, double> directional_second_third(const ScaleSpaceField& field, const Index3& p,
                                                          const Vec3& v) {
  const GridSpec& g = field.f.grid();
  if (!in_interior(g, p, third_derivative_margin))
    throw PreconditionError("directional_second_third: point lies in the boundary margin");
  if (!(norm(v) > 0.0)) throw PreconditionError("directional_second_third: direction must be nonzero");
  const std::size_t idx = g.index(p[0], p[1], p[2]);
  double second = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) second += v[a] * v[b] * field.hess(a, b)[idx];
  double third = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c) third += v[a] * v[b] * v[c] * third_derivative(field, p, a, b, c);
  return {second, third};
}

inline ScalarVolume gradient_magnitude(const ScaleSpaceField& field) {
  ScalarVolume out(field.f.grid());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = norm(field.gradient_at(p));
  return out;
}

inline ScalarVolume laplacian(const ScaleSpaceField& field) {
  ScalarVolume out(field.f.grid());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = field.laplacian_at(p);
  return out;
}

}  // namespace qpat
