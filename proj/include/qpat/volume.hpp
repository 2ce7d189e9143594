#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qpat/error.hpp"
#include "qpat/geometry.hpp"

namespace qpat {

/// Regular voxel grid. `origin` is the lower corner of the box; voxel
/// (i,j,k) covers [origin + (i,j,k)*spacing, origin + (i+1,j+1,k+1)*spacing]
/// and is sampled at its center.
struct GridSpec {
  Index3 dims{2, 2, 2};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }
  Index3 unravel(std::size_t idx) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  Vec3 center(int i, int j, int k) const {
    return {origin.x + (i + 0.5) * spacing.x, origin.y + (j + 0.5) * spacing.y, origin.z + (k + 0.5) * spacing.z};
  }
  Vec3 extent() const { return {dims[0] * spacing.x, dims[1] * spacing.y, dims[2] * spacing.z}; }
  /// Continuous voxel coordinate of a physical point (voxel centers at integers).
  Vec3 to_voxel(const Vec3& p) const {
    return {(p.x - origin.x) / spacing.x - 0.5, (p.y - origin.y) / spacing.y - 0.5,
            (p.z - origin.z) / spacing.z - 0.5};
  }
  double mean_spacing() const { return (spacing.x + spacing.y + spacing.z) / 3.0; }
  double voxel_volume() const { return spacing.x * spacing.y * spacing.z; }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 2) throw PreconditionError("grid dims must be >= 2 on every axis");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw PreconditionError("grid spacing must be positive and finite");
      if (!std::isfinite(origin[a])) throw PreconditionError("grid origin must be finite");
    }
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// Dense field on a GridSpec, x-fastest.
template <typename T>
class Volume {
public:
  Volume() = default;
  explicit Volume(GridSpec grid, T fill = T{}) : grid_(grid), data_(grid.size(), fill) {}
  Volume(GridSpec grid, std::vector<T> values) : grid_(grid), data_(std::move(values)) {
    if (data_.size() != grid_.size()) throw PreconditionError("volume size does not match grid dims");
  }

  const GridSpec& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(int i, int j, int k) { return data_[grid_.index(i, j, k)]; }
  const T& at(int i, int j, int k) const { return data_[grid_.index(i, j, k)]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  friend bool operator==(const Volume&, const Volume&) = default;

private:
  GridSpec grid_{};
  std::vector<T> data_;
};

using ScalarVolume = Volume<double>;
using LabelVolume = Volume<int>;

inline bool all_finite(const ScalarVolume& v) {
  return std::all_of(v.values().begin(), v.values().end(), [](double x) { return std::isfinite(x); });
}

inline void require_same_grid(const GridSpec& a, const GridSpec& b, const char* what) {
  if (!(a == b)) throw PreconditionError(std::string(what) + ": grids do not match");
}

/// Trilinear interpolation at a continuous voxel coordinate, clamped to the grid.
template <typename T>
double sample_trilinear(const Volume<T>& v, const Vec3& vc) {
  const auto& g = v.grid();
  double c[3] = {vc.x, vc.y, vc.z};
  int i0[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const double hi = g.dims[a] - 1.0;
    c[a] = std::clamp(c[a], 0.0, hi);
    i0[a] = std::min(static_cast<int>(std::floor(c[a])), g.dims[a] - 2);
    t[a] = c[a] - i0[a];
  }
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? t[0] : 1.0 - t[0]) * (dy ? t[1] : 1.0 - t[1]) * (dz ? t[2] : 1.0 - t[2]);
        acc += w * static_cast<double>(v.at(i0[0] + dx, i0[1] + dy, i0[2] + dz));
      }
  return acc;
}

/// Nearest voxel holding a physical point, or -1 components if outside.
inline bool voxel_of(const GridSpec& g, const Vec3& p, Index3& out) {
  const Vec3 vc = g.to_voxel(p);
  for (int a = 0; a < 3; ++a) {
    const int i = static_cast<int>(std::lround(vc[a]));
    if (i < 0 || i >= g.dims[a]) return false;
    out[a] = i;
  }
  return true;
}

// ---------------------------------------------------------------------------
// QPATVOL1 file format:
//   "QPATVOL1 <nx> <ny> <nz> <sx> <sy> <sz> <ox> <oy> <oz> float64\n"
// followed by nx*ny*nz little-endian IEEE-754 doubles, x fastest.

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint64_t to_little(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int b = 0; b < 8; ++b) r |= ((bits >> (8 * b)) & 0xffu) << (8 * (7 - b));
    return r;
  } else {
    return bits;
  }
}

}  // namespace detail

inline std::string volume_header(const GridSpec& g) {
  std::string h = "QPATVOL1";
  for (int a = 0; a < 3; ++a) h += " " + std::to_string(g.dims[a]);
  for (int a = 0; a < 3; ++a) h += " " + detail::format_real(g.spacing[a]);
  for (int a = 0; a < 3; ++a) h += " " + detail::format_real(g.origin[a]);
  h += " float64\n";
  return h;
}

inline void write_volume(const ScalarVolume& vol, std::ostream& os) {
  const std::string header = volume_header(vol.grid());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<char> payload(vol.size() * 8);
  for (std::size_t i = 0; i < vol.size(); ++i) {
    const std::uint64_t bits = detail::to_little(std::bit_cast<std::uint64_t>(vol[i]));
    std::memcpy(payload.data() + 8 * i, &bits, 8);
  }
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw Error("failed writing volume payload");
}

inline void write_volume(const ScalarVolume& vol, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_volume(vol, os);
}

inline ScalarVolume read_volume(std::istream& is) {
  std::string header;
  for (char c; header.size() < 4096 && is.get(c);) {
    if (c == '\n') break;
    header.push_back(c);
  }
  if (header.size() >= 4096) throw ParseError("header", "header line too long");

  std::istringstream hs(header);
  std::vector<std::string> tok{std::istream_iterator<std::string>(hs), std::istream_iterator<std::string>()};
  static const char* const names[] = {"magic", "nx", "ny", "nz", "sx", "sy", "sz", "ox", "oy", "oz", "dtype"};
  if (tok.empty() || tok[0] != "QPATVOL1") throw ParseError("magic", "bad magic: expected QPATVOL1");
  if (tok.size() != 11) {
    const std::size_t missing = std::min<std::size_t>(tok.size(), 10);
    throw ParseError(names[missing], std::string("header field count mismatch at '") + names[missing] + "'");
  }

  GridSpec g;
  for (int a = 0; a < 3; ++a) {
    const std::string& t = tok[1 + a];
    char* end = nullptr;
    const long n = std::strtol(t.c_str(), &end, 10);
    if (end == t.c_str() || *end != '\0' || n < 2 || n > (1L << 20))
      throw ParseError(names[1 + a], std::string("invalid dimension field '") + names[1 + a] + "'");
    g.dims[a] = static_cast<int>(n);
  }
  for (int f = 0; f < 6; ++f) {
    const std::string& t = tok[4 + f];
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end == t.c_str() || *end != '\0' || !std::isfinite(v) || (f < 3 && !(v > 0.0)))
      throw ParseError(names[4 + f], std::string("invalid real field '") + names[4 + f] + "'");
    if (f < 3)
      g.spacing[f] = v;
    else
      g.origin[f - 3] = v;
  }
  if (tok[10] != "float64") throw ParseError("dtype", "unsupported dtype '" + tok[10] + "'");

  const std::size_t n = g.size();
  std::vector<char> payload(n * 8);
  is.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got != payload.size())
    throw ParseError("payload", "payload length mismatch: header declares " + std::to_string(n) +
                                    " voxels, file holds " + std::to_string(got / 8));
  if (is.peek() != std::char_traits<char>::eof())
    throw ParseError("payload", "payload length mismatch: trailing bytes after " + std::to_string(n) + " voxels");

  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, payload.data() + 8 * i, 8);
    values[i] = std::bit_cast<double>(detail::to_little(bits));
    if (!std::isfinite(values[i])) throw ParseError("payload", "non-finite value at voxel " + std::to_string(i));
  }
  return ScalarVolume(g, std::move(values));
}

inline ScalarVolume read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  return read_volume(is);
}

inline ScalarVolume to_scalar(const LabelVolume& labels) {
  ScalarVolume out(labels.grid());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i];
  return out;
}

inline LabelVolume to_labels(const ScalarVolume& vol) {
  LabelVolume out(vol.grid());
  for (std::size_t i = 0; i < vol.size(); ++i) {
    const double r = std::round(vol[i]);
    if (r != vol[i] || r < 0.0 || r > 2.0e9) throw ParseError("payload", "label volume holds a non-integer value");
    out[i] = static_cast<int>(r);
  }
  return out;
}

}  // namespace qpat
