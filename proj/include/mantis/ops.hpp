#pragma once

// Differentiable operator set over BasicTensor. Every op computes its forward
// value eagerly and, when a tape is active and an input is connected to a
// requires_grad leaf, records a backward closure. Reductions accumulate in
// double regardless of the tensor scalar type.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>

#include "mantis/gemm.hpp"
#include "mantis/tensor.hpp"

namespace mantis {

namespace detail {

template <class S>
void check_finite(const char* op, const BasicTensor<S>& t) {
#if !defined(NDEBUG) || defined(MANTIS_CHECK_FINITE)
  for (S v : t.vec())
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string(op) +
                               ": non-finite value in forward output");
#else
  (void)op;
  (void)t;
#endif
}

template <class S>
void record(const char* name, std::initializer_list<BasicTensor<S>> inputs,
            const BasicTensor<S>& out, std::function<void()> bw) {
  auto* tape = GradTape<S>::active();
  if (!tape) return;
  bool connected = false;
  for (const auto& t : inputs) connected = connected || t.grad_connected();
  if (!connected) return;
  out.node()->grad_connected = true;
  typename GradTape<S>::Entry e;
  e.op = name;
  e.output = out.node();
  e.backward = std::move(bw);
  for (const auto& t : inputs) e.inputs.push_back(t.node());
  tape->record(std::move(e));
}

// Right-aligned broadcasting walk over two operands.
struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  std::size_t n = 1;
};

inline BroadcastPlan broadcast_plan(const char* op, const Shape& a,
                                    const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out_shape.resize(rank);
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1)
      throw std::invalid_argument(std::string(op) +
                                  ": shapes not broadcastable: " +
                                  shape_str(a) + " vs " + shape_str(b));
    p.out_shape[d] = std::max(pa[d], pb[d]);
  }
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
    p.stride_a[d] = (pa[d] == 1) ? 0 : sa;
    p.stride_b[d] = (pb[d] == 1) ? 0 : sb;
    sa *= static_cast<std::size_t>(pa[d]);
    sb *= static_cast<std::size_t>(pb[d]);
  }
  p.n = numel_of(p.out_shape);
  return p;
}

// Calls fn(out_index, a_offset, b_offset) for every output element.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  const int rank = static_cast<int>(p.out_shape.size());
  if (p.n == 0) return;
  std::vector<int> ctr(rank, 0);
  std::size_t ao = 0, bo = 0;
  for (std::size_t i = 0;;) {
    fn(i, ao, bo);
    if (++i == p.n) break;
    for (int d = rank - 1; d >= 0; --d) {
      ++ctr[d];
      ao += p.stride_a[d];
      bo += p.stride_b[d];
      if (ctr[d] < p.out_shape[d]) break;
      ctr[d] = 0;
      ao -= p.stride_a[d] * static_cast<std::size_t>(p.out_shape[d]);
      bo -= p.stride_b[d] * static_cast<std::size_t>(p.out_shape[d]);
    }
  }
}

// Broadcast layouts with dedicated fast loops.
enum class BroadcastCase {
  same,      // identical shapes
  suffix_b,  // b's shape right-aligns with a's trailing dims
  col_b,     // same rank, b's last dim is 1, leading dims equal
  general,
};

inline BroadcastCase classify_broadcast(const Shape& a, const Shape& b) {
  if (a == b) return BroadcastCase::same;
  if (b.size() <= a.size() &&
      std::equal(b.begin(), b.end(), a.end() - b.size()))
    return BroadcastCase::suffix_b;
  if (a.size() == b.size() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin()))
    return BroadcastCase::col_b;
  return BroadcastCase::general;
}

// Generic broadcasting binary op. FwdFn(a,b) -> out value; DaFn(g,a,b) and
// DbFn(g,a,b) give the elementwise partial contributions.
template <class S, class FwdFn, class DaFn, class DbFn>
BasicTensor<S> binary_op(const char* name, const BasicTensor<S>& a,
                         const BasicTensor<S>& b, FwdFn f, DaFn da, DbFn db) {
  const auto plan = broadcast_plan(name, a.shape(), b.shape());
  const auto layout = classify_broadcast(a.shape(), b.shape());
  BasicTensor<S> out(plan.out_shape);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  const std::size_t n = out.numel();
  switch (layout) {
    case BroadcastCase::same:
      for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
      break;
    case BroadcastCase::suffix_b: {
      const std::size_t inner = b.numel();
      for (std::size_t o = 0; o < n / inner; ++o)
        for (std::size_t i = 0; i < inner; ++i)
          po[o * inner + i] = f(pa[o * inner + i], pb[i]);
      break;
    }
    case BroadcastCase::col_b: {
      const std::size_t len = n / b.numel();
      for (std::size_t r = 0; r < b.numel(); ++r) {
        const S bv = pb[r];
        for (std::size_t i = 0; i < len; ++i)
          po[r * len + i] = f(pa[r * len + i], bv);
      }
      break;
    }
    case BroadcastCase::general:
      for_each_broadcast(plan,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           po[i] = f(pa[ia], pb[ib]);
                         });
      break;
  }
  check_finite(name, out);
  record(name, {a, b}, out,
         [plan, layout, an = a.node(), bn = b.node(), on = out.node(), da,
          db]() {
           const S* g = on->grad.data();
           const S* xa = an->data.data();
           const S* xb = bn->data.data();
           S* ga = an->grad_connected ? an->ensure_grad().data() : nullptr;
           S* gb = bn->grad_connected ? bn->ensure_grad().data() : nullptr;
           const std::size_t n2 = on->data.size();
           switch (layout) {
             case BroadcastCase::same:
               for (std::size_t i = 0; i < n2; ++i) {
                 if (ga) ga[i] += da(g[i], xa[i], xb[i]);
                 if (gb) gb[i] += db(g[i], xa[i], xb[i]);
               }
               break;
             case BroadcastCase::suffix_b: {
               const std::size_t inner = bn->data.size();
               for (std::size_t o = 0; o < n2 / inner; ++o)
                 for (std::size_t i = 0; i < inner; ++i) {
                   const std::size_t idx = o * inner + i;
                   if (ga) ga[idx] += da(g[idx], xa[idx], xb[i]);
                   if (gb) gb[i] += db(g[idx], xa[idx], xb[i]);
                 }
               break;
             }
             case BroadcastCase::col_b: {
               const std::size_t rows = bn->data.size();
               const std::size_t len = n2 / rows;
               for (std::size_t r = 0; r < rows; ++r) {
                 const S bv = xb[r];
                 for (std::size_t i = 0; i < len; ++i) {
                   const std::size_t idx = r * len + i;
                   if (ga) ga[idx] += da(g[idx], xa[idx], bv);
                   if (gb) gb[r] += db(g[idx], xa[idx], bv);
                 }
               }
               break;
             }
             case BroadcastCase::general:
               for_each_broadcast(
                   plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     if (ga) ga[ia] += da(g[i], xa[ia], xb[ib]);
                     if (gb) gb[ib] += db(g[i], xa[ia], xb[ib]);
                   });
               break;
           }
         });
  return out;
}

// Elementwise unary op with out = f(x), dx = dfn(g, x, out).
template <class S, class FwdFn, class DxFn>
BasicTensor<S> unary_op(const char* name, const BasicTensor<S>& x, FwdFn f,
                        DxFn dfn) {
  BasicTensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = f(px[i]);
  check_finite(name, out);
  record(name, {x}, out, [xn = x.node(), on = out.node(), dfn, n]() {
    if (!xn->grad_connected) return;
    const S* g = on->grad.data();
    const S* px2 = xn->data.data();
    const S* po2 = on->data.data();
    S* gx = xn->ensure_grad().data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += dfn(g[i], px2[i], po2[i]);
  });
  return out;
}

// Rational tanh approximation (float path); double falls back to std::tanh
// so the 64-bit shadow evaluation stays exact.
inline float fast_tanh(float x) {
  constexpr float bound = 7.90531110763549805f;
  x = std::clamp(x, -bound, bound);
  const float x2 = x * x;
  // Odd polynomial numerator / even polynomial denominator.
  const float a1 = 4.89352455891786e-03f, a3 = 6.37261928875436e-04f,
              a5 = 1.48572235717979e-05f, a7 = 5.12229709037114e-08f,
              a9 = -8.60467152213735e-11f, a11 = 2.00018790482477e-13f,
              a13 = -2.76076847742355e-16f;
  const float b0 = 4.89352518554385e-03f, b2 = 2.26843463243900e-03f,
              b4 = 1.18534705686654e-04f, b6 = 1.19825839466702e-06f;
  const float num =
      x * (a1 + x2 * (a3 + x2 * (a5 + x2 * (a7 + x2 * (a9 + x2 * (a11 + x2 * a13))))));
  const float den = b0 + x2 * (b2 + x2 * (b4 + x2 * b6));
  return num / den;
}
inline double fast_tanh(double x) { return std::tanh(x); }

inline void axis_extents(const Shape& s, int axis, std::size_t& outer,
                         std::size_t& len, std::size_t& inner) {
  outer = 1;
  inner = 1;
  len = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(s[d]);
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < s.size(); ++d)
    inner *= static_cast<std::size_t>(s[d]);
}

inline int normalize_axis(const char* op, int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument(std::string(op) + ": axis " +
                                std::to_string(axis) + " out of range for rank " +
                                std::to_string(rank));
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <class S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::binary_op(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <class S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::binary_op(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <class S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::binary_op(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S g, S, S y) { return g * y; }, [](S g, S x, S) { return g * x; });
}

template <class S>
BasicTensor<S> div(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  return detail::binary_op(
      "div", a, b, [](S x, S y) { return x / y; },
      [](S g, S, S y) { return g / y; },
      [](S g, S x, S y) { return -g * x / (y * y); });
}

// out = x * scale + shift; covers scalar add/sub/mul/div.
template <class S>
BasicTensor<S> affine(const BasicTensor<S>& x, S scale, S shift = S(0)) {
  return detail::unary_op(
      "affine", x, [scale, shift](S v) { return v * scale + shift; },
      [scale](S g, S, S) { return g * scale; });
}

template <class S>
BasicTensor<S> add(const BasicTensor<S>& x, S c) {
  return affine(x, S(1), c);
}
template <class S>
BasicTensor<S> mul(const BasicTensor<S>& x, S c) {
  return affine(x, c, S(0));
}

// ---------------------------------------------------------------------------
// elementwise functions
// ---------------------------------------------------------------------------

template <class S>
BasicTensor<S> sqrt(const BasicTensor<S>& x) {
  return detail::unary_op(
      "sqrt", x, [](S v) { return std::sqrt(v); },
      [](S g, S, S y) { return g / std::max(S(2) * y, S(1e-12)); });
}

template <class S>
BasicTensor<S> tanh(const BasicTensor<S>& x) {
  return detail::unary_op(
      "tanh", x, [](S v) { return detail::fast_tanh(v); },
      [](S g, S, S y) { return g * (S(1) - y * y); });
}

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class S>
BasicTensor<S> gelu(const BasicTensor<S>& x) {
  constexpr S kAlpha = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S kBeta = S(0.044715);
  return detail::unary_op(
      "gelu", x,
      [](S v) {
        const S u = kAlpha * (v + kBeta * v * v * v);
        return S(0.5) * v * (S(1) + detail::fast_tanh(u));
      },
      [](S g, S v, S) {
        const S u = kAlpha * (v + kBeta * v * v * v);
        const S t = detail::fast_tanh(u);
        const S du = kAlpha * (S(1) + S(3) * kBeta * v * v);
        return g * (S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du);
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
BasicTensor<S> sum(const BasicTensor<S>& x) {
  double acc = 0;
  for (S v : x.vec()) acc += static_cast<double>(v);
  BasicTensor<S> out = BasicTensor<S>::scalar(static_cast<S>(acc));
  detail::record("sum", {x}, out, [xn = x.node(), on = out.node()]() {
    if (!xn->grad_connected) return;
    const S g = on->grad[0];
    for (auto& v : xn->ensure_grad()) v += g;
  });
  return out;
}

template <class S>
BasicTensor<S> mean(const BasicTensor<S>& x) {
  const std::size_t n = x.numel();
  double acc = 0;
  for (S v : x.vec()) acc += static_cast<double>(v);
  BasicTensor<S> out = BasicTensor<S>::scalar(static_cast<S>(acc / double(n)));
  detail::record("mean", {x}, out, [xn = x.node(), on = out.node(), n]() {
    if (!xn->grad_connected) return;
    const S g = on->grad[0] / static_cast<S>(n);
    for (auto& v : xn->ensure_grad()) v += g;
  });
  return out;
}

namespace detail {
template <class S>
BasicTensor<S> reduce_axis(const char* name, const BasicTensor<S>& x, int axis,
                           bool keepdim, bool take_mean) {
  axis = normalize_axis(name, axis, x.rank());
  std::size_t outer, len, inner;
  axis_extents(x.shape(), axis, outer, len, inner);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[static_cast<std::size_t>(axis)] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  BasicTensor<S> out(out_shape);
  const S* px = x.data();
  S* po = out.data();
  const double inv = take_mean ? 1.0 / double(len) : 1.0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0;
      const S* base = px + (o * len) * inner + i;
      for (std::size_t l = 0; l < len; ++l) acc += double(base[l * inner]);
      po[o * inner + i] = static_cast<S>(acc * inv);
    }
  record(name, {x}, out,
         [xn = x.node(), on = out.node(), outer, len, inner, inv]() {
           if (!xn->grad_connected) return;
           const S* g = on->grad.data();
           S* gx = xn->ensure_grad().data();
           for (std::size_t o = 0; o < outer; ++o)
             for (std::size_t i = 0; i < inner; ++i) {
               const S gv = g[o * inner + i] * static_cast<S>(inv);
               S* base = gx + (o * len) * inner + i;
               for (std::size_t l = 0; l < len; ++l) base[l * inner] += gv;
             }
         });
  return out;
}
}  // namespace detail

template <class S>
BasicTensor<S> sum_axis(const BasicTensor<S>& x, int axis, bool keepdim = false) {
  return detail::reduce_axis("sum_axis", x, axis, keepdim, false);
}

template <class S>
BasicTensor<S> mean_axis(const BasicTensor<S>& x, int axis, bool keepdim = false) {
  return detail::reduce_axis("mean_axis", x, axis, keepdim, true);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(x.shape()) + " as " +
                                shape_str(shape));
  BasicTensor<S> out(std::move(shape), x.vec());
  detail::record("reshape", {x}, out, [xn = x.node(), on = out.node()]() {
    if (!xn->grad_connected) return;
    const auto& g = on->grad;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

template <class S>
BasicTensor<S> permute(const BasicTensor<S>& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  if (static_cast<int>(perm.size()) != rank)
    throw std::invalid_argument("permute: perm rank mismatch");
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int d = 0; d < rank; ++d) out_shape[d] = x.dim(perm[d]);
  // strides of x, reordered to out iteration order
  std::vector<std::size_t> xs(static_cast<std::size_t>(rank), 1);
  for (int d = rank - 2; d >= 0; --d)
    xs[d] = xs[d + 1] * static_cast<std::size_t>(x.dim(d + 1));
  std::vector<std::size_t> stride(static_cast<std::size_t>(rank));
  for (int d = 0; d < rank; ++d) stride[d] = xs[static_cast<std::size_t>(perm[d])];

  BasicTensor<S> out(out_shape);
  const S* px = x.data();
  S* po = out.data();
  const std::size_t n = out.numel();
  std::vector<int> ctr(static_cast<std::size_t>(rank), 0);
  std::size_t xo = 0;
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = px[xo];
    for (int d = rank - 1; d >= 0; --d) {
      ++ctr[d];
      xo += stride[d];
      if (ctr[d] < out_shape[d]) break;
      ctr[d] = 0;
      xo -= stride[d] * static_cast<std::size_t>(out_shape[d]);
    }
  }
  detail::record("permute", {x}, out,
                 [xn = x.node(), on = out.node(), out_shape, stride, rank]() {
                   if (!xn->grad_connected) return;
                   const S* g = on->grad.data();
                   S* gx = xn->ensure_grad().data();
                   const std::size_t n2 = on->grad.size();
                   std::vector<int> c(static_cast<std::size_t>(rank), 0);
                   std::size_t xo2 = 0;
                   for (std::size_t i = 0; i < n2; ++i) {
                     gx[xo2] += g[i];
                     for (int d = rank - 1; d >= 0; --d) {
                       ++c[d];
                       xo2 += stride[d];
                       if (c[d] < out_shape[d]) break;
                       c[d] = 0;
                       xo2 -= stride[d] * static_cast<std::size_t>(out_shape[d]);
                     }
                   }
                 });
  return out;
}

template <class S>
BasicTensor<S> transpose(const BasicTensor<S>& x) {
  if (x.rank() != 2)
    throw std::invalid_argument("transpose: expected rank-2, got " +
                                shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <class S>
BasicTensor<S> concat(const std::vector<BasicTensor<S>>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  const int rank = xs[0].rank();
  axis = detail::normalize_axis("concat", axis, rank);
  Shape out_shape = xs[0].shape();
  int total = 0;
  for (const auto& t : xs) {
    if (t.rank() != rank)
      throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && t.dim(d) != out_shape[d])
        throw std::invalid_argument("concat: shape mismatch: " +
                                    shape_str(t.shape()) + " vs " +
                                    shape_str(xs[0].shape()));
    total += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  BasicTensor<S> out(out_shape);

  std::size_t outer, len_out, inner;
  detail::axis_extents(out_shape, axis, outer, len_out, inner);
  S* po = out.data();
  std::size_t off_len = 0;
  for (const auto& t : xs) {
    const std::size_t len_t = static_cast<std::size_t>(t.dim(axis));
    const S* pt = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(pt + o * len_t * inner, pt + (o + 1) * len_t * inner,
                po + (o * len_out + off_len) * inner);
    off_len += len_t;
  }

  std::vector<std::shared_ptr<TensorNode<S>>> in_nodes;
  for (const auto& t : xs) in_nodes.push_back(t.node());
  auto* tape = GradTape<S>::active();
  bool connected = false;
  for (const auto& t : xs) connected = connected || t.grad_connected();
  if (tape && connected) {
    out.node()->grad_connected = true;
    typename GradTape<S>::Entry e;
    e.op = "concat";
    e.inputs = in_nodes;
    e.output = out.node();
    e.backward = [in_nodes, on = out.node(), outer, len_out, inner]() {
      const S* g = on->grad.data();
      std::size_t off = 0;
      for (const auto& node : in_nodes) {
        std::size_t len_t = node->data.size() / (outer * inner);
        if (node->grad_connected) {
          S* gx = node->ensure_grad().data();
          for (std::size_t o = 0; o < outer; ++o) {
            const S* src = g + (o * len_out + off) * inner;
            S* dst = gx + o * len_t * inner;
            for (std::size_t i = 0; i < len_t * inner; ++i) dst[i] += src[i];
          }
        }
        off += len_t;
      }
    };
    tape->record(std::move(e));
  }
  return out;
}

template <class S>
BasicTensor<S> slice(const BasicTensor<S>& x, int axis, int start, int stop) {
  axis = detail::normalize_axis("slice", axis, x.rank());
  const int len = x.dim(axis);
  if (start < 0 || stop > len || start >= stop)
    throw std::invalid_argument("slice: range [" + std::to_string(start) +
                                ", " + std::to_string(stop) +
                                ") invalid for axis of size " +
                                std::to_string(len));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = stop - start;
  std::size_t outer, len_in, inner;
  detail::axis_extents(x.shape(), axis, outer, len_in, inner);
  const std::size_t len_out = static_cast<std::size_t>(stop - start);
  BasicTensor<S> out(out_shape);
  const S* px = x.data();
  S* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(px + (o * len_in + start) * inner,
              px + (o * len_in + start + len_out) * inner,
              po + o * len_out * inner);
  detail::record("slice", {x}, out,
                 [xn = x.node(), on = out.node(), outer, len_in, len_out,
                  inner, start]() {
                   if (!xn->grad_connected) return;
                   const S* g = on->grad.data();
                   S* gx = xn->ensure_grad().data();
                   for (std::size_t o = 0; o < outer; ++o) {
                     const S* src = g + o * len_out * inner;
                     S* dst = gx + (o * len_in + start) * inner;
                     for (std::size_t i = 0; i < len_out * inner; ++i)
                       dst[i] += src[i];
                   }
                 });
  return out;
}

// (s...) -> (count, s...), replicating the input.
template <class S>
BasicTensor<S> expand_leading(const BasicTensor<S>& x, int count) {
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin(), count);
  BasicTensor<S> out(out_shape);
  const std::size_t n = x.numel();
  S* po = out.data();
  for (int c = 0; c < count; ++c)
    std::copy(x.data(), x.data() + n, po + static_cast<std::size_t>(c) * n);
  detail::record("expand_leading", {x}, out,
                 [xn = x.node(), on = out.node(), count, n]() {
                   if (!xn->grad_connected) return;
                   const S* g = on->grad.data();
                   S* gx = xn->ensure_grad().data();
                   for (int c = 0; c < count; ++c) {
                     const S* src = g + static_cast<std::size_t>(c) * n;
                     for (std::size_t i = 0; i < n; ++i) gx[i] += src[i];
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <class S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<S> out({m, n});
  gemm(false, false, m, n, k, S(1), a.data(), k, b.data(), n, S(0), out.data(),
       n);
  detail::check_finite("matmul", out);
  detail::record("matmul", {a, b}, out,
                 [an = a.node(), bn = b.node(), on = out.node(), m, n, k]() {
                   const S* g = on->grad.data();
                   if (an->grad_connected) {
                     S* ga = an->ensure_grad().data();
                     gemm(false, true, m, k, n, S(1), g, n, bn->data.data(), n,
                          S(1), ga, k);
                   }
                   if (bn->grad_connected) {
                     S* gb = bn->ensure_grad().data();
                     gemm(true, false, k, n, m, S(1), an->data.data(), k, g, n,
                          S(1), gb, n);
                   }
                 });
  return out;
}

// Batched matmul over matching leading dimension: (B,m,k) @ (B,k,n).
template <class S>
BasicTensor<S> bmm(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  BasicTensor<S> out({bs, m, n});
  const std::size_t sa = std::size_t(m) * k, sb = std::size_t(k) * n,
                    so = std::size_t(m) * n;
  for (int i = 0; i < bs; ++i)
    gemm(false, false, m, n, k, S(1), a.data() + i * sa, k, b.data() + i * sb,
         n, S(0), out.data() + i * so, n);
  detail::check_finite("bmm", out);
  detail::record(
      "bmm", {a, b}, out,
      [an = a.node(), bn = b.node(), on = out.node(), bs, m, n, k, sa, sb, so]() {
        const S* g = on->grad.data();
        if (an->grad_connected) {
          S* ga = an->ensure_grad().data();
          for (int i = 0; i < bs; ++i)
            gemm(false, true, m, k, n, S(1), g + i * so, n,
                 bn->data.data() + i * sb, n, S(1), ga + i * sa, k);
        }
        if (bn->grad_connected) {
          S* gb = bn->ensure_grad().data();
          for (int i = 0; i < bs; ++i)
            gemm(true, false, k, n, m, S(1), an->data.data() + i * sa, k,
                 g + i * so, n, S(1), gb + i * sb, n);
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// neural-net ops
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis` (max-subtraction).
template <class S>
BasicTensor<S> softmax(const BasicTensor<S>& x, int axis = -1) {
  const int ax = detail::normalize_axis("softmax", axis, x.rank());
  std::size_t outer, len, inner;
  detail::axis_extents(x.shape(), ax, outer, len, inner);
  BasicTensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const S* xb = px + o * len * inner + i;
      S* ob = po + o * len * inner + i;
      S mx = xb[0];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xb[l * inner]);
      double denom = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const S e = std::exp(xb[l * inner] - mx);
        ob[l * inner] = e;
        denom += double(e);
      }
      const S inv = static_cast<S>(1.0 / denom);
      for (std::size_t l = 0; l < len; ++l) ob[l * inner] *= inv;
    }
  detail::check_finite("softmax", out);
  detail::record("softmax", {x}, out,
                 [xn = x.node(), on = out.node(), outer, len, inner]() {
                   if (!xn->grad_connected) return;
                   const S* g = on->grad.data();
                   const S* y = on->data.data();
                   S* gx = xn->ensure_grad().data();
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t i = 0; i < inner; ++i) {
                       const std::size_t base = o * len * inner + i;
                       double dot = 0;
                       for (std::size_t l = 0; l < len; ++l)
                         dot += double(g[base + l * inner]) *
                                double(y[base + l * inner]);
                       for (std::size_t l = 0; l < len; ++l)
                         gx[base + l * inner] +=
                             y[base + l * inner] *
                             (g[base + l * inner] - static_cast<S>(dot));
                     }
                 });
  return out;
}

// Layer normalization over the last axis with population variance:
// y = (x - mean) / sqrt(var + eps) * gamma + beta.
template <class S>
BasicTensor<S> layer_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta, S eps = S(1e-5)) {
  const int d = x.dim(x.rank() - 1);
  if (gamma.numel() != static_cast<std::size_t>(d) ||
      beta.numel() != static_cast<std::size_t>(d))
    throw std::invalid_argument(
        "layer_norm: gamma/beta must have " + std::to_string(d) +
        " elements, got " + shape_str(gamma.shape()) + " and " +
        shape_str(beta.shape()));
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  BasicTensor<S> out(x.shape());
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S* orow = po + r * d;
    double m = 0;
    for (int j = 0; j < d; ++j) m += double(xr[j]);
    m /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) {
      const double c = double(xr[j]) - m;
      var += c * c;
    }
    var /= d;
    const S inv = static_cast<S>(1.0 / std::sqrt(var + double(eps)));
    const S mu = static_cast<S>(m);
    for (int j = 0; j < d; ++j)
      orow[j] = (xr[j] - mu) * inv * pg[j] + pb[j];
  }
  detail::check_finite("layer_norm", out);
  detail::record(
      "layer_norm", {x, gamma, beta}, out,
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(),
       rows, d, eps]() {
        const S* g = on->grad.data();
        const S* px2 = xn->data.data();
        const S* pg2 = gn->data.data();
        S* gx = xn->grad_connected ? xn->ensure_grad().data() : nullptr;
        S* gg = gn->grad_connected ? gn->ensure_grad().data() : nullptr;
        S* gb = bn->grad_connected ? bn->ensure_grad().data() : nullptr;
        std::vector<S> xhat(static_cast<std::size_t>(d));
        for (std::size_t r = 0; r < rows; ++r) {
          const S* xr = px2 + r * d;
          const S* gr = g + r * d;
          double m = 0;
          for (int j = 0; j < d; ++j) m += double(xr[j]);
          m /= d;
          double var = 0;
          for (int j = 0; j < d; ++j) {
            const double c = double(xr[j]) - m;
            var += c * c;
          }
          var /= d;
          const double inv = 1.0 / std::sqrt(var + double(eps));
          for (int j = 0; j < d; ++j)
            xhat[j] = static_cast<S>((double(xr[j]) - m) * inv);
          if (gg || gb) {
            for (int j = 0; j < d; ++j) {
              if (gg) gg[j] += gr[j] * xhat[j];
              if (gb) gb[j] += gr[j];
            }
          }
          if (gx) {
            double s1 = 0, s2 = 0;
            for (int j = 0; j < d; ++j) {
              const double t = double(gr[j]) * double(pg2[j]);
              s1 += t;
              s2 += t * double(xhat[j]);
            }
            s1 /= d;
            s2 /= d;
            S* gxr = gx + r * d;
            for (int j = 0; j < d; ++j)
              gxr[j] += static_cast<S>(
                  inv * (double(gr[j]) * double(pg2[j]) - s1 -
                         double(xhat[j]) * s2));
          }
        }
      });
  return out;
}

// Inverted dropout: scales kept activations by 1/(1-rate) during training so
// inference is a no-op. Mask bits come from a splitmix64 stream seeded once
// per call from the supplied generator (cheap and order-independent).
template <class S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double rate, bool train,
                       std::mt19937& rng) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const std::size_t n = x.numel();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(n);
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  BasicTensor<S> out(x.shape());
  std::uint64_t state =
      (std::uint64_t(rng()) << 32) ^ std::uint64_t(rng());
  const std::uint64_t threshold =
      static_cast<std::uint64_t>(rate * 9007199254740992.0);  // rate * 2^53
  const S* px = x.data();
  S* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t z = state + (i + 1) * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    const bool keep = (z >> 11) >= threshold;
    (*mask)[i] = keep;
    po[i] = keep ? px[i] * scale : S(0);
  }
  detail::record("dropout", {x}, out,
                 [xn = x.node(), on = out.node(), mask, scale, n]() {
                   if (!xn->grad_connected) return;
                   const S* g = on->grad.data();
                   S* gx = xn->ensure_grad().data();
                   for (std::size_t i = 0; i < n; ++i)
                     if ((*mask)[i]) gx[i] += g[i] * scale;
                 });
  return out;
}

// Mean cross-entropy of row-wise logits against integer targets, fused with
// log-sum-exp for stability.
template <class S>
BasicTensor<S> cross_entropy(const BasicTensor<S>& logits,
                             const std::vector<int>& targets) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy: logits must be rank-2, got " +
                                shape_str(logits.shape()));
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(n) +
                                " rows vs " + std::to_string(targets.size()) +
                                " targets");
  for (int t : targets)
    if (t < 0 || t >= k)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " outside [0, " + std::to_string(k) + ")");
  const S* pz = logits.data();
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const S* row = pz + std::size_t(i) * k;
    S mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (int j = 0; j < k; ++j) denom += std::exp(double(row[j]) - double(mx));
    total += double(mx) + std::log(denom) - double(row[targets[std::size_t(i)]]);
  }
  BasicTensor<S> out = BasicTensor<S>::scalar(static_cast<S>(total / n));
  detail::record("cross_entropy", {logits}, out,
                 [zn = logits.node(), on = out.node(), targets, n, k]() {
                   if (!zn->grad_connected) return;
                   const S g = on->grad[0] / static_cast<S>(n);
                   const S* pz2 = zn->data.data();
                   S* gz = zn->ensure_grad().data();
                   for (int i = 0; i < n; ++i) {
                     const S* row = pz2 + std::size_t(i) * k;
                     S* grow = gz + std::size_t(i) * k;
                     S mx = row[0];
                     for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                     double denom = 0;
                     for (int j = 0; j < k; ++j)
                       denom += std::exp(double(row[j]) - double(mx));
                     for (int j = 0; j < k; ++j) {
                       const S p = static_cast<S>(
                           std::exp(double(row[j]) - double(mx)) / denom);
                       grow[j] += g * (p - S(j == targets[std::size_t(i)]));
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

// 1-D cross-correlation. x: (C_in, T) or (B, C_in, T); kernels:
// (C_out, C_in, K). Symmetric zero padding.
template <class S>
BasicTensor<S> conv1d(const BasicTensor<S>& x, const BasicTensor<S>& kernels,
                      int stride, int padding) {
  if (kernels.rank() != 3)
    throw std::invalid_argument("conv1d: kernels must be (C_out, C_in, K), got " +
                                shape_str(kernels.shape()));
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2)
    throw std::invalid_argument("conv1d: input must be (C_in, T) or (B, C_in, T), got " +
                                shape_str(x.shape()));
  const int b = batched ? x.dim(0) : 1;
  const int c_in = batched ? x.dim(1) : x.dim(0);
  const int t = batched ? x.dim(2) : x.dim(1);
  const int c_out = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != c_in)
    throw std::invalid_argument("conv1d: input channels " + std::to_string(c_in) +
                                " vs kernel channels " +
                                std::to_string(kernels.dim(1)));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv1d: stride must be >= 1, padding >= 0");
  if (t + 2 * padding < k)
    throw std::invalid_argument("conv1d: kernel of size " + std::to_string(k) +
                                " longer than padded input of size " +
                                std::to_string(t + 2 * padding));
  const int t_out = (t + 2 * padding - k) / stride + 1;

  // im2col: rows indexed by (b, t_out), columns by (c_in, k)
  const std::size_t rows = std::size_t(b) * t_out;
  const std::size_t ck = std::size_t(c_in) * k;
  auto cols = std::make_shared<std::vector<S>>(rows * ck, S(0));
  const S* px = x.data();
  for (int bi = 0; bi < b; ++bi)
    for (int to = 0; to < t_out; ++to) {
      S* crow = cols->data() + (std::size_t(bi) * t_out + to) * ck;
      const int t0 = to * stride - padding;
      for (int ci = 0; ci < c_in; ++ci) {
        const S* xrow = px + (std::size_t(bi) * c_in + ci) * t;
        for (int kk = 0; kk < k; ++kk) {
          const int ti = t0 + kk;
          if (ti >= 0 && ti < t) crow[std::size_t(ci) * k + kk] = xrow[ti];
        }
      }
    }

  // out2 (rows, c_out) = cols @ W^T with W viewed as (c_out, ck)
  std::vector<S> out2(rows * c_out);
  gemm(false, true, static_cast<int>(rows), c_out, static_cast<int>(ck), S(1),
       cols->data(), static_cast<int>(ck), kernels.data(),
       static_cast<int>(ck), S(0), out2.data(), c_out);

  Shape out_shape = batched ? Shape{b, c_out, t_out} : Shape{c_out, t_out};
  BasicTensor<S> out(out_shape);
  S* po = out.data();
  for (int bi = 0; bi < b; ++bi)
    for (int to = 0; to < t_out; ++to) {
      const S* src = out2.data() + (std::size_t(bi) * t_out + to) * c_out;
      for (int co = 0; co < c_out; ++co)
        po[(std::size_t(bi) * c_out + co) * t_out + to] = src[co];
    }
  detail::check_finite("conv1d", out);

  detail::record(
      "conv1d", {x, kernels}, out,
      [xn = x.node(), kn = kernels.node(), on = out.node(), cols, b, c_in, t,
       c_out, k, t_out, stride, padding, rows, ck]() {
        // regroup output grad to (rows, c_out)
        std::vector<S> g2(rows * c_out);
        const S* g = on->grad.data();
        for (int bi = 0; bi < b; ++bi)
          for (int to = 0; to < t_out; ++to) {
            S* dst = g2.data() + (std::size_t(bi) * t_out + to) * c_out;
            for (int co = 0; co < c_out; ++co)
              dst[co] = g[(std::size_t(bi) * c_out + co) * t_out + to];
          }
        if (kn->grad_connected) {
          S* gk = kn->ensure_grad().data();
          gemm(true, false, c_out, static_cast<int>(ck),
               static_cast<int>(rows), S(1), g2.data(), c_out, cols->data(),
               static_cast<int>(ck), S(1), gk, static_cast<int>(ck));
        }
        if (xn->grad_connected) {
          std::vector<S> dcols(rows * ck);
          gemm(false, false, static_cast<int>(rows), static_cast<int>(ck),
               c_out, S(1), g2.data(), c_out, kn->data.data(),
               static_cast<int>(ck), S(0), dcols.data(),
               static_cast<int>(ck));
          S* gx = xn->ensure_grad().data();
          for (int bi = 0; bi < b; ++bi)
            for (int to = 0; to < t_out; ++to) {
              const S* crow = dcols.data() + (std::size_t(bi) * t_out + to) * ck;
              const int t0 = to * stride - padding;
              for (int ci = 0; ci < c_in; ++ci) {
                S* xrow = gx + (std::size_t(bi) * c_in + ci) * t;
                for (int kk = 0; kk < k; ++kk) {
                  const int ti = t0 + kk;
                  if (ti >= 0 && ti < t)
                    xrow[ti] += crow[std::size_t(ci) * k + kk];
                }
              }
            }
        }
      });
  return out;
}

// Mean-pools (B, C, T) to (B, C, out_len) over contiguous segments
// [floor(p*T/P), ceil((p+1)*T/P)).
template <class S>
BasicTensor<S> adaptive_avg_pool1d(const BasicTensor<S>& x, int out_len) {
  if (x.rank() != 3)
    throw std::invalid_argument("adaptive_avg_pool1d: expected (B, C, T), got " +
                                shape_str(x.shape()));
  const int b = x.dim(0), c = x.dim(1), t = x.dim(2);
  if (out_len < 1 || out_len > t)
    throw std::invalid_argument("adaptive_avg_pool1d: out_len " +
                                std::to_string(out_len) +
                                " invalid for input length " + std::to_string(t));
  BasicTensor<S> out({b, c, out_len});
  const S* px = x.data();
  S* po = out.data();
  const std::size_t bc = std::size_t(b) * c;
  for (std::size_t r = 0; r < bc; ++r) {
    const S* xr = px + r * t;
    S* orow = po + r * out_len;
    for (int p = 0; p < out_len; ++p) {
      const int s0 = (p * t) / out_len;
      const int s1 = ((p + 1) * t + out_len - 1) / out_len;
      double acc = 0;
      for (int i = s0; i < s1; ++i) acc += double(xr[i]);
      orow[p] = static_cast<S>(acc / (s1 - s0));
    }
  }
  detail::record("adaptive_avg_pool1d", {x}, out,
                 [xn = x.node(), on = out.node(), bc, t, out_len]() {
                   if (!xn->grad_connected) return;
                   const S* g = on->grad.data();
                   S* gx = xn->ensure_grad().data();
                   for (std::size_t r = 0; r < bc; ++r) {
                     const S* grow = g + r * out_len;
                     S* xrow = gx + r * t;
                     for (int p = 0; p < out_len; ++p) {
                       const int s0 = (p * t) / out_len;
                       const int s1 = ((p + 1) * t + out_len - 1) / out_len;
                       const S gv = grow[p] / static_cast<S>(s1 - s0);
                       for (int i = s0; i < s1; ++i) xrow[i] += gv;
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

// x @ w + bias, where x may be rank-2 (N, in) or rank-3 (B, T, in).
template <class S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& w,
                      const BasicTensor<S>& bias) {
  if (x.rank() == 2) return add(matmul(x, w), bias);
  if (x.rank() == 3) {
    const int b = x.dim(0), t = x.dim(1), in = x.dim(2);
    auto flat = reshape(x, {b * t, in});
    auto y = add(matmul(flat, w), bias);
    return reshape(y, {b, t, w.dim(1)});
  }
  throw std::invalid_argument("linear: expected rank-2/3 input, got " +
                              shape_str(x.shape()));
}

// Rows scaled to unit L2 norm (eps-guarded denominators).
template <class S>
BasicTensor<S> l2_normalize_rows(const BasicTensor<S>& x, S eps = S(1e-8)) {
  auto norms = sqrt(sum_axis(mul(x, x), -1, /*keepdim=*/true));
  return div(x, add(norms, eps));
}

}  // namespace mantis
