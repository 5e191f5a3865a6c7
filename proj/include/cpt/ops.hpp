#pragma once

// Differentiable tensor operations. Every op records a backward closure on the
// thread's active tape when at least one input requires a gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// C = A · B for `items` stacked row blocks: A (items·m, k), C (items·m, n),
// shared B (k, n). Each item gets its own product call of identical shape, so
// an item's result never depends on which other items share the batch.
template <typename T>
void gemm_items(const T* A, const T* B, T* C, std::size_t items, std::size_t m, std::size_t k, std::size_t n) {
  const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  const CMapMat<T> b(B, E(k), E(n));
  for (std::size_t q = 0; q < items; ++q)
    MapMat<T>(C + q * m * n, E(m), E(n)).noalias() = CMapMat<T>(A + q * m * k, E(m), E(k)) * b;
}

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T, typename F>
void record(Tensor<T>& out, std::string_view op, F&& fn) {
  out.set_requires_grad(true);
  active_tape<T>()->record(op, std::forward<F>(fn));
}

template <typename T>
Tensor<T> finish(Tensor<T> out, std::string_view op) {
  if (debug_checks_enabled()) check_finite(out, op);
  return out;
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat source index for every element of `out` when `in` is broadcast to it.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    const std::size_t k = i + in.size();
    if (k >= r) {
      const std::size_t d = in[k - r];
      stride[i] = d == 1 ? 0 : s;
      s *= d;
    }
  }
  std::vector<std::size_t> idx(numel_of(out));
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < idx.size(); ++flat) {
    idx[flat] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      off += stride[ax];
      if (counter[ax] < out[ax]) break;
      off -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return idx;
}

// True when `b` equals a trailing block of `a` (e.g. a bias over the last axis).
inline bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

enum class BinOp { kAdd, kSub, kMul };

template <BinOp Op, typename T>
inline T apply_op(T x, T y) {
  if constexpr (Op == BinOp::kAdd) return x + y;
  else if constexpr (Op == BinOp::kSub) return x - y;
  else return x * y;
}

// Forward kernel for the three layouts: equal shapes, trailing-suffix bias
// (rows of length m), and general broadcast through index tables.
template <BinOp Op, typename T>
void binary_forward(const T* a, const T* b, T* o, std::size_t n, std::size_t m, bool same, bool bias,
                    const std::vector<std::size_t>& ia, const std::vector<std::size_t>& ib) {
  if (same) {
    for (std::size_t i = 0; i < n; ++i) o[i] = apply_op<Op>(a[i], b[i]);
  } else if (bias) {
    for (std::size_t r = 0; r < n; r += m)
      for (std::size_t j = 0; j < m; ++j) o[r + j] = apply_op<Op>(a[r + j], b[j]);
  } else {
    for (std::size_t i = 0; i < n; ++i) o[i] = apply_op<Op>(a[ia[i]], b[ib[i]]);
  }
}

template <BinOp Op, typename T>
void binary_backward(const T* g, std::size_t n, std::size_t m, bool same, bool bias,
                     const std::vector<std::size_t>& ia, const std::vector<std::size_t>& ib, const T* av,
                     const T* bv, T* ga, T* gb) {
  // d(out)/da is b for mul and 1 otherwise; d(out)/db is a, −1 or 1.
  auto da = [&](std::size_t i, std::size_t bi) { return Op == BinOp::kMul ? g[i] * bv[bi] : g[i]; };
  auto db = [&](std::size_t i, std::size_t ai) {
    return Op == BinOp::kMul ? g[i] * av[ai] : Op == BinOp::kSub ? -g[i] : g[i];
  };
  if (same) {
    if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += da(i, i);
    if (gb) for (std::size_t i = 0; i < n; ++i) gb[i] += db(i, i);
  } else if (bias) {
    for (std::size_t r = 0; r < n; r += m) {
      if (ga) for (std::size_t j = 0; j < m; ++j) ga[r + j] += da(r + j, j);
      if (gb) for (std::size_t j = 0; j < m; ++j) gb[j] += db(r + j, r + j);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      if (ga) ga[ia[i]] += da(i, ib[i]);
      if (gb) gb[ib[i]] += db(i, ia[i]);
    }
  }
}

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op, std::string_view name) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name);
  Tensor<T> out(out_shape);
  const bool same = a.shape() == b.shape();
  const bool bias = !same && a.shape() == out_shape && is_suffix(a.shape(), b.shape());
  std::vector<std::size_t> ia, ib;
  if (!same && !bias) {
    ia = broadcast_index(a.shape(), out_shape);
    ib = broadcast_index(b.shape(), out_shape);
  }
  const std::size_t n = out.numel(), m = b.numel();
  T* o = out.mutable_data().data();
  switch (op) {
    case BinOp::kAdd: binary_forward<BinOp::kAdd>(a.data().data(), b.data().data(), o, n, m, same, bias, ia, ib); break;
    case BinOp::kSub: binary_forward<BinOp::kSub>(a.data().data(), b.data().data(), o, n, m, same, bias, ia, ib); break;
    case BinOp::kMul: binary_forward<BinOp::kMul>(a.data().data(), b.data().data(), o, n, m, same, bias, ia, ib); break;
  }
  if (tracking<T>({&a, &b})) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr(), po = out.impl_ptr();
    record(out, name, [pa, pb, po, op, same, bias, n, m, ia = std::move(ia), ib = std::move(ib)] {
      if (po->grad.empty()) return;
      const T* g = po->grad.data();
      T* ga = pa->requires_grad ? pa->grad_buffer() : nullptr;
      T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
      const T* av = pa->data->data();
      const T* bv = pb->data->data();
      switch (op) {
        case BinOp::kAdd: binary_backward<BinOp::kAdd>(g, n, m, same, bias, ia, ib, av, bv, ga, gb); break;
        case BinOp::kSub: binary_backward<BinOp::kSub>(g, n, m, same, bias, ia, ib, av, bv, ga, gb); break;
        case BinOp::kMul: binary_backward<BinOp::kMul>(g, n, m, same, bias, ia, ib, av, bv, ga, gb); break;
      }
    });
  }
  return finish(std::move(out), name);
}

}  // namespace detail

/// Elementwise sum with numpy-style broadcasting.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, detail::BinOp::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * s;
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "scale", [px, po, s] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t i = 0; i < po->grad.size(); ++i) g[i] += po->grad[i] * s;
    });
  }
  return detail::finish(std::move(out), "scale");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "relu", [px, po] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      const auto& xv = *px->data;
      for (std::size_t i = 0; i < po->grad.size(); ++i)
        if (xv[i] > T(0)) g[i] += po->grad[i];
    });
  }
  return detail::finish(std::move(out), "relu");
}

/// Shares storage with `x`; only the shape changes.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = x.impl()->data;
  auto out = Tensor<T>::from_impl(impl);
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "reshape", [px, po] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t i = 0; i < po->grad.size(); ++i) g[i] += po->grad[i];
    });
  }
  return out;
}

/// Reorders axes: output axis i is input axis `axes[i]`.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.shape()[i + 1];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  // src[flat] is the input offset feeding output element `flat`.
  std::vector<std::size_t> src(x.numel());
  {
    std::vector<std::size_t> counter(r, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
      src[flat] = off;
      for (std::size_t ax = r; ax-- > 0;) {
        ++counter[ax];
        off += stride[ax];
        if (counter[ax] < out_shape[ax]) break;
        off -= stride[ax] * counter[ax];
        counter[ax] = 0;
      }
    }
  }
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[src[i]];
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "permute", [px, po, src = std::move(src)] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += po->grad[i];
    });
  }
  return detail::finish(std::move(out), "permute");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int a0, int a1) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.normalize_axis(a0)], axes[x.normalize_axis(a1)]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = xs[0].normalize_axis(axis);
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch at " + shape_str(x.shape()));
    for (std::size_t i = 0; i < x.rank(); ++i)
      if (i != ax && x.shape()[i] != xs[0].shape()[i])
        throw DimensionError("concat: shapes " + shape_str(xs[0].shape()) + " and " + shape_str(x.shape()) +
                             " differ off the concat axis");
    out_shape[ax] += x.shape()[ax];
  }
  const auto sp = detail::split_at(out_shape, ax);
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  std::vector<std::size_t> col_off;
  std::size_t col = 0;
  for (const auto& x : xs) {
    col_off.push_back(col);
    const std::size_t w = x.shape()[ax] * sp.inner;
    auto xd = x.data();
    for (std::size_t r = 0; r < sp.outer; ++r)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  o.begin() + static_cast<std::ptrdiff_t>(r * sp.n * sp.inner + col));
    col += w;
  }
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (any && active_tape<T>()) {
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> ins;
    for (const auto& x : xs) ins.push_back(x.impl_ptr());
    auto po = out.impl_ptr();
    const std::size_t row = sp.n * sp.inner;
    detail::record(out, "concat", [ins, po, col_off, row, outer = sp.outer] {
      if (po->grad.empty()) return;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (!ins[k]->requires_grad) continue;
        T* g = ins[k]->grad_buffer();
        const std::size_t w = ins[k]->data->size() / outer;
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t j = 0; j < w; ++j) g[r * w + j] += po->grad[r * row + col_off[k] + j];
      }
    });
  }
  return detail::finish(std::move(out), "concat");
}

/// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = x.normalize_axis(axis);
  if (begin >= end || end > x.shape()[ax])
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                         std::to_string(ax) + " of " + shape_str(x.shape()));
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t w = (end - begin) * sp.inner, row = sp.n * sp.inner, off = begin * sp.inner;
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < sp.outer; ++r)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * row + off), w,
                o.begin() + static_cast<std::ptrdiff_t>(r * w));
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "slice", [px, po, w, row, off, outer = sp.outer] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * row + off + j] += po->grad[r * w + j];
    });
  }
  return detail::finish(std::move(out), "slice");
}

/// Repeats a length-1 axis `n` times.
template <typename T>
Tensor<T> expand(const Tensor<T>& x, int axis, std::size_t n) {
  const std::size_t ax = x.normalize_axis(axis);
  if (x.shape()[ax] != 1) throw DimensionError("expand: axis must have length 1 in " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[ax] = n;
  const auto sp = detail::split_at(x.shape(), ax);
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < sp.outer; ++r)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(r * sp.inner), sp.inner,
                  o.begin() + static_cast<std::ptrdiff_t>((r * n + k) * sp.inner));
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "expand", [px, po, sp, n] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t j = 0; j < sp.inner; ++j) g[r * sp.inner + j] += po->grad[(r * n + k) * sp.inner + j];
    });
  }
  return detail::finish(std::move(out), "expand");
}

template <typename T>
struct MaxResult {
  Tensor<T> values;
  std::vector<std::size_t> argmax;  // index along the reduced axis, one per output element
};

/// Max over `axis` (removed from the shape). Ties go to the lowest index, and
/// the subgradient flows only to that winner.
template <typename T>
MaxResult<T> max_reduce(const Tensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != ax) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> arg(out.numel(), 0);
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < sp.outer; ++r)
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const std::size_t base = r * sp.n * sp.inner + j;
      std::size_t best = 0;
      T bv = xd[base];
      for (std::size_t k = 1; k < sp.n; ++k) {
        const T v = xd[base + k * sp.inner];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      o[r * sp.inner + j] = bv;
      arg[r * sp.inner + j] = best;
    }
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "max_reduce", [px, po, arg, sp] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t j = 0; j < sp.inner; ++j) {
          const std::size_t q = r * sp.inner + j;
          g[r * sp.n * sp.inner + arg[q] * sp.inner + j] += po->grad[q];
        }
    });
  }
  return {detail::finish(std::move(out), "max_reduce"), std::move(arg)};
}

template <typename T>
Tensor<T> mean_reduce(const Tensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != ax) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  auto xd = x.data();
  const T inv = T(1) / static_cast<T>(sp.n);
  for (std::size_t r = 0; r < sp.outer; ++r)
    for (std::size_t j = 0; j < sp.inner; ++j) {
      T s = 0;
      for (std::size_t k = 0; k < sp.n; ++k) s += xd[(r * sp.n + k) * sp.inner + j];
      o[r * sp.inner + j] = s * inv;
    }
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "mean_reduce", [px, po, sp, inv] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t k = 0; k < sp.n; ++k)
          for (std::size_t j = 0; j < sp.inner; ++j)
            g[(r * sp.n + k) * sp.inner + j] += po->grad[r * sp.inner + j] * inv;
    });
  }
  return detail::finish(std::move(out), "mean_reduce");
}

/// Sum of all elements as a shape-(1,) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto out = Tensor<T>::scalar(s);
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "sum", [px, po] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      const T go = po->grad[0];
      for (std::size_t i = 0; i < px->data->size(); ++i) g[i] += go;
    });
  }
  return detail::finish(std::move(out), "sum");
}

/// Per-batch row gather: x (B, N, F), index (B, M) flattened → (B, M, F).
template <typename T>
Tensor<T> batched_gather(const Tensor<T>& x, std::span<const std::size_t> index, std::size_t per_batch) {
  if (x.rank() != 3) throw DimensionError("batched_gather: expected (B, N, F), got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), N = x.dim(1), F = x.dim(2);
  if (index.size() != B * per_batch) throw DimensionError("batched_gather: index count does not match batch");
  for (auto i : index)
    if (i >= N) throw DimensionError("batched_gather: index " + std::to_string(i) + " out of range");
  Tensor<T> out(Shape{B, per_batch, F});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t m = 0; m < per_batch; ++m)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((b * N + index[b * per_batch + m]) * F), F,
                  o.begin() + static_cast<std::ptrdiff_t>((b * per_batch + m) * F));
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    std::vector<std::size_t> idx(index.begin(), index.end());
    detail::record(out, "gather", [px, po, idx = std::move(idx), B, N, F, per_batch] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < per_batch; ++m) {
          const T* src = po->grad.data() + (b * per_batch + m) * F;
          T* dst = g + (b * N + idx[b * per_batch + m]) * F;
          for (std::size_t f = 0; f < F; ++f) dst[f] += src[f];
        }
    });
  }
  return detail::finish(std::move(out), "gather");
}

/// Inverted dropout: kept units are scaled by 1/(1-rate); identity when not training.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!train || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1) / static_cast<T>(1.0 - rate);
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * mask[i];
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "dropout", [px, po, mask = std::move(mask)] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += po->grad[i] * mask[i];
    });
  }
  return detail::finish(std::move(out), "dropout");
}

/// Numerically stable softmax (max-subtracted) along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < sp.outer; ++r)
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const std::size_t base = r * sp.n * sp.inner + j;
      T m = xd[base];
      for (std::size_t k = 1; k < sp.n; ++k) m = std::max(m, xd[base + k * sp.inner]);
      T s = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(xd[base + k * sp.inner] - m);
        o[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) o[base + k * sp.inner] /= s;
    }
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "softmax", [px, po, sp] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      const auto& y = *po->data;
      const auto& gy = po->grad;
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t j = 0; j < sp.inner; ++j) {
          const std::size_t base = r * sp.n * sp.inner + j;
          T dot = 0;
          for (std::size_t k = 0; k < sp.n; ++k) dot += gy[base + k * sp.inner] * y[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t q = base + k * sp.inner;
            g[q] += y[q] * (gy[q] - dot);
          }
        }
    });
  }
  return detail::finish(std::move(out), "softmax");
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < sp.outer; ++r)
    for (std::size_t j = 0; j < sp.inner; ++j) {
      const std::size_t base = r * sp.n * sp.inner + j;
      T m = xd[base];
      for (std::size_t k = 1; k < sp.n; ++k) m = std::max(m, xd[base + k * sp.inner]);
      T s = 0;
      for (std::size_t k = 0; k < sp.n; ++k) s += std::exp(xd[base + k * sp.inner] - m);
      const T lse = m + std::log(s);
      for (std::size_t k = 0; k < sp.n; ++k) o[base + k * sp.inner] = xd[base + k * sp.inner] - lse;
    }
  if (detail::tracking<T>({&x})) {
    auto px = x.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "log_softmax", [px, po, sp] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      const auto& y = *po->data;
      const auto& gy = po->grad;
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t j = 0; j < sp.inner; ++j) {
          const std::size_t base = r * sp.n * sp.inner + j;
          T total = 0;
          for (std::size_t k = 0; k < sp.n; ++k) total += gy[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.n; ++k) {
            const std::size_t q = base + k * sp.inner;
            g[q] += gy[q] - std::exp(y[q]) * total;
          }
        }
    });
  }
  return detail::finish(std::move(out), "log_softmax");
}

/// Mean negative log-likelihood of rows of `log_probs` (R, C) at `targets`.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, std::span<const std::size_t> targets) {
  if (log_probs.rank() != 2) throw DimensionError("nll_loss: expected (R, C), got " + shape_str(log_probs.shape()));
  const std::size_t R = log_probs.dim(0), C = log_probs.dim(1);
  if (targets.size() != R) throw DimensionError("nll_loss: target count does not match rows");
  for (auto t : targets)
    if (t >= C) throw ConfigError("nll_loss: target id " + std::to_string(t) + " out of range for " +
                                  std::to_string(C) + " classes");
  auto lp = log_probs.data();
  T s = 0;
  for (std::size_t r = 0; r < R; ++r) s -= lp[r * C + targets[r]];
  auto out = Tensor<T>::scalar(s / static_cast<T>(R));
  if (detail::tracking<T>({&log_probs})) {
    auto px = log_probs.impl_ptr(), po = out.impl_ptr();
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    detail::record(out, "nll_loss", [px, po, tg = std::move(tg), C] {
      if (po->grad.empty() || !px->requires_grad) return;
      T* g = px->grad_buffer();
      const T d = po->grad[0] / static_cast<T>(tg.size());
      for (std::size_t r = 0; r < tg.size(); ++r) g[r * C + tg[r]] -= d;
    });
  }
  return detail::finish(std::move(out), "nll_loss");
}

/// Normalizes over the last axis, then applies the affine pair (gamma, beta).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D)
    throw DimensionError("layer_norm: affine parameters must match last axis of " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / D;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(rows);
  auto o = out.mutable_data();
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * D;
    T mean = 0;
    for (std::size_t i = 0; i < D; ++i) mean += xr[i];
    mean /= static_cast<T>(D);
    T var = 0;
    for (std::size_t i = 0; i < D; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < D; ++i) {
      const T h = (xr[i] - mean) * is;
      xhat[r * D + i] = h;
      o[r * D + i] = h * gd[i] + bd[i];
    }
  }
  if (detail::tracking<T>({&x, &gamma, &beta})) {
    auto px = x.impl_ptr(), pg = gamma.impl_ptr(), pb = beta.impl_ptr(), po = out.impl_ptr();
    detail::record(out, "layer_norm",
                   [px, pg, pb, po, xhat = std::move(xhat), inv_std = std::move(inv_std), D, rows] {
                     if (po->grad.empty()) return;
                     const auto& gy = po->grad;
                     const auto& gm = *pg->data;
                     if (pg->requires_grad || pb->requires_grad) {
                       T* gg = pg->requires_grad ? pg->grad_buffer() : nullptr;
                       T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < D; ++i) {
                           if (gg) gg[i] += gy[r * D + i] * xhat[r * D + i];
                           if (gb) gb[i] += gy[r * D + i];
                         }
                     }
                     if (!px->requires_grad) return;
                     T* gx = px->grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       T m1 = 0, m2 = 0;
                       for (std::size_t i = 0; i < D; ++i) {
                         const T dh = gy[r * D + i] * gm[i];
                         m1 += dh;
                         m2 += dh * xhat[r * D + i];
                       }
                       m1 /= static_cast<T>(D);
                       m2 /= static_cast<T>(D);
                       for (std::size_t i = 0; i < D; ++i) {
                         const T dh = gy[r * D + i] * gm[i];
                         gx[r * D + i] += inv_std[r] * (dh - m1 - xhat[r * D + i] * m2);
                       }
                     }
                   });
  }
  return detail::finish(std::move(out), "layer_norm");
}

/// Batched matrix product a (..., m, k) × b (..., k, n) with broadcast batch axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch axes of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcastable");
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  // A shared right operand folds every batch into the row dimension: one GEMM.
  const bool fold = b_batch.empty() || numel_of(b_batch) == 1;
  const std::size_t nb = numel_of(batch);
  std::vector<std::size_t> ia, ib;
  if (!fold) {
    ia = a_batch.empty() ? std::vector<std::size_t>(nb, 0) : detail::broadcast_index(a_batch, batch);
    ib = detail::broadcast_index(b_batch, batch);
  }
  using detail::CMapMat;
  using detail::MapMat;
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.mutable_data().data();
  if (fold && a_batch == batch) {
    // Leading axis = batch item; everything after it is one product.
    const std::size_t items = batch.empty() ? 1 : batch[0];
    detail::gemm_items(ad, bd, od, items, nb / items * m, k, n);
  } else {
    if (fold) {
      ia = a_batch.empty() ? std::vector<std::size_t>(nb, 0) : detail::broadcast_index(a_batch, batch);
      ib.assign(nb, 0);
    }
    for (std::size_t q = 0; q < nb; ++q)
      detail::gemm_items(ad + ia[q] * m * k, bd + ib[q] * k * n, od + q * m * n, 1, m, k, n);
  }
  if (detail::tracking<T>({&a, &b})) {
    auto pa = a.impl_ptr(), pb = b.impl_ptr(), po = out.impl_ptr();
    const bool folded = fold && a_batch == batch;
    detail::record(out, "matmul", [pa, pb, po, m, k, n, nb, folded, ia = std::move(ia), ib = std::move(ib)] {
      if (po->grad.empty()) return;
      const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
      const T* g = po->grad.data();
      const T* av = pa->data->data();
      const T* bv = pb->data->data();
      if (folded) {
        if (pa->requires_grad)
          MapMat<T>(pa->grad_buffer(), E(nb * m), E(k)).noalias() +=
              CMapMat<T>(g, E(nb * m), E(n)) * CMapMat<T>(bv, E(k), E(n)).transpose();
        if (pb->requires_grad)
          MapMat<T>(pb->grad_buffer(), E(k), E(n)).noalias() +=
              CMapMat<T>(av, E(nb * m), E(k)).transpose() * CMapMat<T>(g, E(nb * m), E(n));
        return;
      }
      for (std::size_t q = 0; q < nb; ++q) {
        if (pa->requires_grad)
          MapMat<T>(pa->grad_buffer() + ia[q] * m * k, E(m), E(k)).noalias() +=
              CMapMat<T>(g + q * m * n, E(m), E(n)) * CMapMat<T>(bv + ib[q] * k * n, E(k), E(n)).transpose();
        if (pb->requires_grad)
          MapMat<T>(pb->grad_buffer() + ib[q] * k * n, E(k), E(n)).noalias() +=
              CMapMat<T>(av + ia[q] * m * k, E(m), E(k)).transpose() * CMapMat<T>(g + q * m * n, E(m), E(n));
      }
    });
  }
  return detail::finish(std::move(out), "matmul");
}

/// x (..., in) · weight (in, out) + bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

/// Grouped 1-D cross-correlation. x (B, C, L), weight (O, C/groups, kernel),
/// optional bias (O). Output length floor((L + 2·padding − kernel)/stride) + 1.
template <typename T>
Tensor<T> conv_grouped(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, std::size_t stride,
                       std::size_t padding, std::size_t groups) {
  if (x.rank() != 3 || weight.rank() != 3)
    throw DimensionError("conv_grouped: expected x (B, C, L) and weight (O, C/g, k), got " + shape_str(x.shape()) +
                         " and " + shape_str(weight.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const std::size_t O = weight.dim(0), Cg = weight.dim(1), kw = weight.dim(2);
  if (groups == 0 || stride == 0) throw DimensionError("conv_grouped: groups and stride must be positive");
  if (C % groups != 0 || O % groups != 0 || Cg != C / groups)
    throw DimensionError("conv_grouped: channels " + std::to_string(C) + " / outputs " + std::to_string(O) +
                         " incompatible with groups " + std::to_string(groups) + " and weight " +
                         shape_str(weight.shape()));
  if (L + 2 * padding < kw)
    throw DimensionError("conv_grouped: kernel " + std::to_string(kw) + " exceeds padded length " +
                         std::to_string(L + 2 * padding));
  if (bias && bias->numel() != O) throw DimensionError("conv_grouped: bias must have one entry per output channel");
  const std::size_t Lo = (L + 2 * padding - kw) / stride + 1;
  const std::size_t Og = O / groups;
  Tensor<T> out(Shape{B, O, Lo});
  T* od = out.mutable_data().data();
  const T* xd = x.data().data();
  const T* wd = weight.data().data();

  // Column matrix (B·Lo, C·kw) for the dense case; the GEMM does the heavy lifting.
  std::vector<T> cols;
  const bool dense = groups == 1;
  if (dense) {
    cols.assign(B * Lo * C * kw, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < Lo; ++l) {
        T* row = cols.data() + (b * Lo + l) * C * kw;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t t = 0; t < kw; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) - static_cast<std::ptrdiff_t>(padding);
            if (src >= 0 && src < static_cast<std::ptrdiff_t>(L)) row[c * kw + t] = xd[(b * C + c) * L + static_cast<std::size_t>(src)];
          }
      }
    std::vector<T> wt(C * kw * O);
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t q = 0; q < C * kw; ++q) wt[q * O + o] = wd[o * C * kw + q];
    std::vector<T> res(B * Lo * O);
    detail::gemm_items(cols.data(), wt.data(), res.data(), B, Lo, C * kw, O);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t l = 0; l < Lo; ++l) od[(b * O + o) * Lo + l] = res[(b * Lo + l) * O + o];
  } else {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o) {
        const std::size_t gidx = o / Og;
        T* orow = od + (b * O + o) * Lo;
        for (std::size_t ci = 0; ci < Cg; ++ci) {
          const T* xr = xd + (b * C + gidx * Cg + ci) * L;
          const T* wr = wd + (o * Cg + ci) * kw;
          for (std::size_t l = 0; l < Lo; ++l) {
            T s = 0;
            for (std::size_t t = 0; t < kw; ++t) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) - static_cast<std::ptrdiff_t>(padding);
              if (src >= 0 && src < static_cast<std::ptrdiff_t>(L)) s += wr[t] * xr[src];
            }
            orow[l] += s;
          }
        }
      }
  }
  if (bias) {
    auto bd = bias->data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t l = 0; l < Lo; ++l) od[(b * O + o) * Lo + l] += bd[o];
  }

  const bool track = bias ? detail::tracking<T>({&x, &weight, bias}) : detail::tracking<T>({&x, &weight});
  if (track) {
    auto px = x.impl_ptr(), pw = weight.impl_ptr(), po = out.impl_ptr();
    std::shared_ptr<detail::TensorImpl<T>> pbias = bias ? bias->impl_ptr() : nullptr;
    detail::record(out, "conv_grouped",
                   [px, pw, pbias, po, cols = std::move(cols), dense, B, C, L, O, Cg, kw, Lo, Og, stride, padding] {
                     if (po->grad.empty()) return;
                     const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
                     const T* g = po->grad.data();
                     if (pbias && pbias->requires_grad) {
                       T* gb = pbias->grad_buffer();
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t l = 0; l < Lo; ++l) gb[o] += g[(b * O + o) * Lo + l];
                     }
                     const T* xd = px->data->data();
                     const T* wd = pw->data->data();
                     if (dense) {
                       detail::RowMat<T> gmat(E(B * Lo), E(O));
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t o = 0; o < O; ++o)
                           for (std::size_t l = 0; l < Lo; ++l) gmat(E(b * Lo + l), E(o)) = g[(b * O + o) * Lo + l];
                       if (pw->requires_grad)
                         detail::MapMat<T>(pw->grad_buffer(), E(O), E(C * kw)).noalias() +=
                             gmat.transpose() * detail::CMapMat<T>(cols.data(), E(B * Lo), E(C * kw));
                       if (px->requires_grad) {
                         detail::RowMat<T> gcols = gmat * detail::CMapMat<T>(wd, E(O), E(C * kw));
                         T* gx = px->grad_buffer();
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t l = 0; l < Lo; ++l)
                             for (std::size_t c = 0; c < C; ++c)
                               for (std::size_t t = 0; t < kw; ++t) {
                                 const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) -
                                                            static_cast<std::ptrdiff_t>(padding);
                                 if (src >= 0 && src < static_cast<std::ptrdiff_t>(L))
                                   gx[(b * C + c) * L + static_cast<std::size_t>(src)] +=
                                       gcols(E(b * Lo + l), E(c * kw + t));
                               }
                       }
                       return;
                     }
                     T* gx = px->requires_grad ? px->grad_buffer() : nullptr;
                     T* gw = pw->requires_grad ? pw->grad_buffer() : nullptr;
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t o = 0; o < O; ++o) {
                         const std::size_t gidx = o / Og;
                         const T* grow = g + (b * O + o) * Lo;
                         for (std::size_t ci = 0; ci < Cg; ++ci) {
                           const std::size_t xoff = (b * C + gidx * Cg + ci) * L;
                           const std::size_t woff = (o * Cg + ci) * kw;
                           for (std::size_t l = 0; l < Lo; ++l)
                             for (std::size_t t = 0; t < kw; ++t) {
                               const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) -
                                                          static_cast<std::ptrdiff_t>(padding);
                               if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                               const std::size_t s = static_cast<std::size_t>(src);
                               if (gw) gw[woff + t] += grow[l] * xd[xoff + s];
                               if (gx) gx[xoff + s] += grow[l] * wd[woff + t];
                             }
                         }
                       }
                   });
  }
  return detail::finish(std::move(out), "conv_grouped");
}

}  // namespace cpt
