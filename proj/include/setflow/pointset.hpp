#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "setflow/common.hpp"
#include "setflow/tensor.hpp"

namespace setflow {

// One realization of a point process: ordered storage of an unordered set of
// d-dimensional points.
struct PointSet {
  size_t dim = 0;
  std::vector<double> coords;  // row-major, size() x dim

  PointSet() = default;
  explicit PointSet(size_t d) : dim(d) {}
  PointSet(size_t d, std::vector<double> c) : dim(d), coords(std::move(c)) {
    require(d > 0 && coords.size() % d == 0, "PointSet: coords not a multiple of dim");
  }

  size_t size() const { return dim ? coords.size() / dim : 0; }
  bool empty() const { return coords.empty(); }

  std::span<const double> point(size_t i) const { return {coords.data() + i * dim, dim}; }

  void push(std::span<const double> p) {
    require(p.size() == dim, "PointSet::push: dimension mismatch");
    coords.insert(coords.end(), p.begin(), p.end());
  }
  void push2(double x, double y) {
    require(dim == 2, "PointSet::push2 on non-2d set");
    coords.push_back(x);
    coords.push_back(y);
  }

  PointSet with_extra(std::span<const double> p) const {
    PointSet out = *this;
    out.push(p);
    return out;
  }
};

// Padded stack of point sets: the unit of batched evaluation. Padded slots
// hold zeros and are flagged off in the mask.
struct Batch {
  size_t batch = 0, n_max = 0, dim = 0;
  Tensor points;                 // [B, n_max, d]
  std::vector<size_t> lengths;   // valid points per set
  Tensor mask;                   // [B, n_max], 1 for valid slots

  size_t slot_rows() const { return batch * n_max; }

  PointSet extract(size_t b) const {
    PointSet ps(dim);
    for (size_t i = 0; i < lengths[b]; ++i)
      for (size_t j = 0; j < dim; ++j)
        ps.coords.push_back(points.values[(b * n_max + i) * dim + j]);
    return ps;
  }
};

namespace detail {
// Lexicographic order over point coordinates; ties keep the original index so
// the layout is deterministic.
inline bool lex_less(const double* a, const double* b, size_t d) {
  for (size_t j = 0; j < d; ++j) {
    if (a[j] < b[j]) return true;
    if (a[j] > b[j]) return false;
  }
  return false;
}
}  // namespace detail

// Stacks sets into a padded batch. Within each set the points are placed in
// a canonical (lexicographically sorted) order; every aggregation downstream
// reduces in slot order, so densities and losses cannot depend on how the
// caller happened to order the points.
inline Batch pad_batch(std::span<const PointSet> sets) {
  require(!sets.empty(), "pad_batch: empty list");
  const size_t d = sets[0].dim;
  size_t n_max = 1;
  for (const auto& s : sets) {
    require(s.dim == d, "pad_batch: mixed point dimensions");
    n_max = std::max(n_max, s.size());
  }
  Batch out;
  out.batch = sets.size();
  out.n_max = n_max;
  out.dim = d;
  out.points = Tensor::zeros({sets.size(), n_max, d});
  out.mask = Tensor::zeros({sets.size(), n_max});
  out.lengths.resize(sets.size());
  for (size_t b = 0; b < sets.size(); ++b) {
    const PointSet& s = sets[b];
    const size_t n = s.size();
    out.lengths[b] = n;
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) {
      return detail::lex_less(s.coords.data() + i * d, s.coords.data() + j * d, d);
    });
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < d; ++j)
        out.points.values[(b * n_max + i) * d + j] = s.coords[order[i] * d + j];
      out.mask.values[b * n_max + i] = 1.0;
    }
  }
  return out;
}

inline Batch batch_of_one(const PointSet& ps) { return pad_batch(std::span(&ps, 1)); }

// Canonical reordering of an existing batch. `perm[b*n_max + k]` is the
// original slot that canonical slot k of set b came from; used to map
// per-slot outputs back to the caller's layout.
struct CanonicalBatch {
  Batch batch;
  std::vector<size_t> perm;
};

inline CanonicalBatch canonicalize(const Batch& in) {
  CanonicalBatch out;
  out.batch = in;
  out.perm.assign(in.batch * in.n_max, 0);
  const size_t d = in.dim, n_max = in.n_max;
  for (size_t b = 0; b < in.batch; ++b) {
    const size_t n = in.lengths[b];
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const double* base = in.points.values.data() + b * n_max * d;
    std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) {
      return detail::lex_less(base + i * d, base + j * d, d);
    });
    for (size_t k = 0; k < n_max; ++k) {
      size_t src = k < n ? order[k] : k;
      out.perm[b * n_max + k] = src;
      for (size_t j = 0; j < d; ++j)
        out.batch.points.values[(b * n_max + k) * d + j] =
            k < n ? in.points.values[(b * n_max + src) * d + j] : 0.0;
      out.batch.mask.values[b * n_max + k] = k < n ? 1.0 : 0.0;
    }
  }
  return out;
}

// Undoes canonicalize() on a per-slot tensor of width `w`.
inline Tensor scatter_to_original(const Tensor& sorted_rows, const std::vector<size_t>& perm,
                                  size_t B, size_t n_max, size_t w) {
  Tensor out = Tensor::zeros(sorted_rows.shape);
  for (size_t b = 0; b < B; ++b)
    for (size_t k = 0; k < n_max; ++k) {
      size_t dst = b * n_max + perm[b * n_max + k];
      size_t src = b * n_max + k;
      for (size_t j = 0; j < w; ++j) out.values[dst * w + j] = sorted_rows.values[src * w + j];
    }
  return out;
}

// Row/column bookkeeping shared by the equivariant ops: masks as fixed row
// weights, per-set lengths, and the derived constants they need.
struct SetLayout {
  size_t B = 0, n = 0, d = 0;
  std::vector<size_t> lengths;
  std::shared_ptr<const std::vector<double>> point_mask;  // [B*n]
  std::shared_ptr<const std::vector<double>> slot_mask;   // [B*n*d]
  std::shared_ptr<const std::vector<double>> inv_nm1;     // [B*n]: 1/(len-1), 0 when len<2
  std::shared_ptr<const std::vector<double>> lone_set;    // [B*n]: 1 when len<2 else 0

  size_t valid_points() const {
    size_t s = 0;
    for (size_t l : lengths) s += l;
    return s;
  }
};

inline SetLayout make_layout(const Batch& b) {
  SetLayout lay;
  lay.B = b.batch;
  lay.n = b.n_max;
  lay.d = b.dim;
  lay.lengths = b.lengths;
  auto pm = std::make_shared<std::vector<double>>(b.batch * b.n_max, 0.0);
  auto sm = std::make_shared<std::vector<double>>(b.batch * b.n_max * b.dim, 0.0);
  auto inv = std::make_shared<std::vector<double>>(b.batch * b.n_max, 0.0);
  auto lone = std::make_shared<std::vector<double>>(b.batch * b.n_max, 0.0);
  for (size_t i = 0; i < b.batch; ++i) {
    const size_t len = b.lengths[i];
    for (size_t k = 0; k < b.n_max; ++k) {
      const size_t r = i * b.n_max + k;
      const bool valid = k < len;
      (*pm)[r] = valid ? 1.0 : 0.0;
      (*inv)[r] = len >= 2 ? 1.0 / static_cast<double>(len - 1) : 0.0;
      (*lone)[r] = len < 2 ? 1.0 : 0.0;
      for (size_t j = 0; j < b.dim; ++j) (*sm)[r * b.dim + j] = valid ? 1.0 : 0.0;
    }
  }
  lay.point_mask = pm;
  lay.slot_mask = sm;
  lay.inv_nm1 = inv;
  lay.lone_set = lone;
  return lay;
}

}  // namespace setflow
