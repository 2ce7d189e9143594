#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "qpat/volume.hpp"

namespace qpat {

class UnionFind {
public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }

  std::size_t find(std::size_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  // The smaller root wins so the result does not depend on union order.
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

private:
  std::vector<std::size_t> parent_;
};

/// Face-connected components of voxels sharing the same class value.
/// Voxels whose class is `skip` get label 0; components are numbered 1..N in
/// the scan order of their first voxel.
inline LabelVolume connected_components(const LabelVolume& cls, int skip = -1) {
  const GridSpec& g = cls.grid();
  const std::size_t n = g.size();
  UnionFind uf(n);
  const std::size_t sx = 1, sy = static_cast<std::size_t>(g.dims[0]),
                    sz = static_cast<std::size_t>(g.dims[0]) * static_cast<std::size_t>(g.dims[1]);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t p = g.index(i, j, k);
        const int c = cls[p];
        if (c == skip) continue;
        if (i > 0 && cls[p - sx] == c) uf.unite(p, p - sx);
        if (j > 0 && cls[p - sy] == c) uf.unite(p, p - sy);
        if (k > 0 && cls[p - sz] == c) uf.unite(p, p - sz);
      }
  LabelVolume out(g, 0);
  std::vector<int> root_label(n, 0);
  int next = 0;
  for (std::size_t p = 0; p < n; ++p) {
    if (cls[p] == skip) continue;
    const std::size_t r = uf.find(p);
    if (root_label[r] == 0) root_label[r] = ++next;
    out[p] = root_label[r];
  }
  return out;
}

inline int max_label(const LabelVolume& labels) {
  int m = 0;
  for (int v : labels.values()) m = std::max(m, v);
  return m;
}

/// Voxel count per label, indexed 0..max_label.
inline std::vector<std::size_t> label_counts(const LabelVolume& labels) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(max_label(labels)) + 1, 0);
  for (int v : labels.values()) ++counts[static_cast<std::size_t>(v)];
  return counts;
}

/// Assigns every label-0 voxel the most frequent nonzero label among its face
/// neighbours (ties to the smaller label), sweeping until nothing changes.
inline LabelVolume fill_unassigned(LabelVolume labels) {
  const GridSpec& g = labels.grid();
  static const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::pair<std::size_t, int>> updates;
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int i = 0; i < g.dims[0]; ++i) {
          if (labels.at(i, j, k) != 0) continue;
          int cand[6];
          int nc = 0;
          for (const auto& o : off) {
            const int a = i + o[0], b = j + o[1], c = k + o[2];
            if (!g.contains(a, b, c)) continue;
            const int l = labels.at(a, b, c);
            if (l != 0) cand[nc++] = l;
          }
          if (nc == 0) continue;
          std::sort(cand, cand + nc);
          int best = cand[0], best_n = 0;
          for (int s = 0; s < nc;) {
            int e = s;
            while (e < nc && cand[e] == cand[s]) ++e;
            if (e - s > best_n) {
              best_n = e - s;
              best = cand[s];
            }
            s = e;
          }
          updates.emplace_back(g.index(i, j, k), best);
        }
    for (const auto& [p, l] : updates) labels[p] = l;
    changed = !updates.empty();
  }
  return labels;
}

}  // namespace qpat
