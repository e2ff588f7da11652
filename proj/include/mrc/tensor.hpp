#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mrc/common.hpp"

namespace mrc {

namespace detail {

/// One node of the dynamic computation graph. Built fresh on every forward
/// pass; backward() walks parents in reverse topological order.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily allocated, same length as value once present
  bool requires_grad = false;
  bool consumed = false;  // set once a backward pass has run through this node
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

inline std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * static_cast<size_t>(s[i + 1]);
  return st;
}

// Trailing-dimension broadcast of two shapes; throws on incompatibility.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` aligned to the rank of `out`, zero where broadcast.
inline std::vector<size_t> bcast_strides(const Shape& in, const Shape& out) {
  auto st = row_major_strides(in);
  std::vector<size_t> r(out.size(), 0);
  for (size_t i = 0; i < in.size(); ++i) {
    size_t oi = out.size() - in.size() + i;
    r[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : st[i];
  }
  return r;
}

// Calls visit(i_out, ia, ib) for every element of `out`, where ia/ib are the
// broadcast-mapped offsets into tensors of shape `a` and `b`.
template <class F>
void for_each_bcast2(const Shape& out, const Shape& a, const Shape& b, F&& visit) {
  size_t n = shape_numel(out);
  if (n == 0) return;
  size_t r = out.size();
  if (r == 0) {
    visit(0, 0, 0);
    return;
  }
  auto sa = bcast_strides(a, out);
  auto sb = bcast_strides(b, out);
  std::vector<int> idx(r, 0);
  size_t ia = 0, ib = 0;
  for (size_t i = 0;;) {
    visit(i, ia, ib);
    if (++i == n) break;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      ia -= sa[d] * static_cast<size_t>(out[d]);
      ib -= sb[d] * static_cast<size_t>(out[d]);
    }
  }
}

}  // namespace detail

/// Dense row-major tensor participating in reverse-mode differentiation.
/// Cheap to copy: a handle sharing the underlying graph node.
template <typename T>
class TensorT {
 public:
  using Node = detail::TensorNode<T>;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static TensorT full(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT uniform(Shape shape, Rng& rng, double lo, double hi,
                         bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.value()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const {
    int r = static_cast<int>(node_->shape.size());
    return node_->shape[i < 0 ? r + i : i];
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  size_t numel() const { return node_->value.size(); }

  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }
  std::vector<T>& grad() { return node_->grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (rg && node_->backward)
      throw GraphError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = rg;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }

  T at(std::initializer_list<int> idx) const {
    auto st = detail::row_major_strides(node_->shape);
    size_t off = 0;
    size_t d = 0;
    for (int i : idx) off += static_cast<size_t>(i) * st[d++];
    return node_->value[off];
  }

  T grad_at(std::initializer_list<int> idx) const {
    auto st = detail::row_major_strides(node_->shape);
    size_t off = 0;
    size_t d = 0;
    for (int i : idx) off += static_cast<size_t>(i) * st[d++];
    return node_->grad.empty() ? T(0) : node_->grad[off];
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
TensorT<T> make_result(Shape shape, std::vector<T> value,
                       std::vector<std::shared_ptr<TensorNode<T>>> parents,
                       std::function<void(TensorNode<T>&)> backward) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents)
    if (p->requires_grad) needs = true;
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return TensorT<T>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (trailing-dimension broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// fwd(a, b) -> out; dfa/dfb accumulate input grads given (gout, a, b).
template <typename T, class Fwd, class Da, class Db>
TensorT<T> broadcast_binary(const TensorT<T>& a, const TensorT<T>& b, const char* name, Fwd fwd,
                            Da dfa, Db dfb) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<T> out(shape_numel(out_shape));
  const auto& av = a.value();
  const auto& bv = b.value();
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_bcast2(out_shape, a.shape(), b.shape(),
                    [&](size_t i, size_t ia, size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  }
  auto an = a.node();
  auto bn = b.node();
  Shape os = out_shape;
  return make_result<T>(
      std::move(out_shape), std::move(out), {an, bn},
      [an, bn, os, dfa, dfb](TensorNode<T>& self) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for_each_bcast2(os, an->shape, bn->shape, [&](size_t i, size_t ia, size_t ib) {
          T g = self.grad[i];
          if (an->requires_grad) an->grad[ia] += dfa(g, an->value[ia], bn->value[ib]);
          if (bn->requires_grad) bn->grad[ib] += dfb(g, an->value[ia], bn->value[ib]);
        });
      });
}

template <typename T, class Fwd, class Dx>
TensorT<T> unary_op(const TensorT<T>& x, Fwd fwd, Dx dfx) {
  std::vector<T> out(x.numel());
  const auto& xv = x.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {xn}, [xn, dfx](TensorNode<T>& self) {
    xn->ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i)
      xn->grad[i] += dfx(self.grad[i], xn->value[i], self.value[i]);
  });
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::broadcast_binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::broadcast_binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::broadcast_binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::broadcast_binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, double c) {
  T cc = static_cast<T>(c);
  return detail::unary_op(
      x, [cc](T v) { return v * cc; }, [cc](T g, T, T) { return g * cc; });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, double c) {
  T cc = static_cast<T>(c);
  return detail::unary_op(
      x, [cc](T v) { return v + cc; }, [](T g, T, T) { return g; });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& x) {
  return scale(x, -1.0);
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::tanh(v); }, [](T g, T, T y) { return g * (T(1) - y * y); });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

template <typename T>
TensorT<T> log(const TensorT<T>& x) {
  if (checked_mode()) {
    // NaN passes through so numeric aborts surface at the loss check instead
    for (T v : x.value())
      if (v <= T(0))
        throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(v)));
  }
  return detail::unary_op(
      x, [](T v) { return std::log(v); }, [](T g, T v, T) { return g / v; });
}

template <typename T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) {
  return add(a, b);
}
template <typename T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) {
  return sub(a, b);
}
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Matmul: a [.., M, K] x b [.., K, N] -> [.., M, N], batch dims broadcastable
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] (+)= A[m,k] B[k,n], with optional transposes realized by index swap.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int M, int K, int N, bool ta, bool tb) {
  for (int m = 0; m < M; ++m) {
    for (int k = 0; k < K; ++k) {
      T av = ta ? a[k * M + m] : a[m * K + k];
      if (av == T(0)) continue;
      const T* brow = tb ? nullptr : b + static_cast<size_t>(k) * N;
      T* crow = c + static_cast<size_t>(m) * N;
      if (!tb) {
        for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
      } else {
        for (int n = 0; n < N; ++n) crow[n] += av * b[static_cast<size_t>(n) * K + k];
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: ranks must be >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int M = a.dim(-2), K = a.dim(-1);
  int Kb = b.dim(-2), N = b.dim(-1);
  if (K != Kb)
    throw ShapeError("matmul: inner extents disagree for shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch = detail::broadcast_shape(ba, bb, "matmul");
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);

  size_t nbatch = shape_numel(batch);
  std::vector<T> out(nbatch * static_cast<size_t>(M) * N, T(0));
  const size_t a_mat = static_cast<size_t>(M) * K;
  const size_t b_mat = static_cast<size_t>(K) * N;
  const size_t c_mat = static_cast<size_t>(M) * N;

  // batch offsets with broadcasting
  std::vector<size_t> aoff(nbatch, 0), boff(nbatch, 0);
  detail::for_each_bcast2(batch, ba, bb, [&](size_t i, size_t ia, size_t ib) {
    aoff[i] = ia * a_mat;
    boff[i] = ib * b_mat;
  });

  const auto& av = a.value();
  const auto& bv = b.value();
  for (size_t i = 0; i < nbatch; ++i)
    detail::gemm_acc(av.data() + aoff[i], bv.data() + boff[i], out.data() + i * c_mat, M, K, N,
                     false, false);

  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {an, bn},
      [an, bn, aoff, boff, M, K, N, c_mat](detail::TensorNode<T>& self) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (size_t i = 0; i < aoff.size(); ++i) {
          const T* g = self.grad.data() + i * c_mat;
          // dA += dC . B^T ; dB += A^T . dC
          if (an->requires_grad)
            detail::gemm_acc(g, bn->value.data() + boff[i], an->grad.data() + aoff[i], M, N, K,
                             false, true);
          if (bn->requires_grad)
            detail::gemm_acc(an->value.data() + aoff[i], g, bn->grad.data() + boff[i], K, M, N,
                             true, false);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  auto xn = x.node();
  return detail::make_result<T>(std::move(new_shape), x.value(), {xn},
                                [xn](detail::TensorNode<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                    xn->grad[i] += self.grad[i];
                                });
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& x, int ax0, int ax1) {
  int r = x.rank();
  if (ax0 < 0) ax0 += r;
  if (ax1 < 0) ax1 += r;
  Shape out_shape = x.shape();
  std::swap(out_shape[ax0], out_shape[ax1]);
  auto src_str = detail::row_major_strides(x.shape());
  std::swap(src_str[ax0], src_str[ax1]);  // stride of source under out index order

  size_t n = x.numel();
  std::vector<T> out(n);
  const auto& xv = x.value();
  std::vector<int> idx(r, 0);
  size_t is = 0;
  for (size_t i = 0; i < n; ++i) {
    out[i] = xv[is];
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      is += src_str[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      is -= src_str[d] * static_cast<size_t>(out_shape[d]);
    }
  }
  auto xn = x.node();
  Shape os = out_shape;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {xn}, [xn, os, src_str](detail::TensorNode<T>& self) {
        xn->ensure_grad();
        int r = static_cast<int>(os.size());
        std::vector<int> idx(r, 0);
        size_t is = 0;
        for (size_t i = 0; i < self.grad.size(); ++i) {
          xn->grad[is] += self.grad[i];
          for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            is += src_str[d];
            if (idx[d] < os[d]) break;
            idx[d] = 0;
            is -= src_str[d] * static_cast<size_t>(os[d]);
          }
        }
      });
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
  return transpose(x, -2, -1);
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || len < 0 || start + len > x.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") invalid for axis " + std::to_string(axis) +
                     " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(x.shape()[d]);
  for (int d = axis + 1; d < r; ++d) inner *= static_cast<size_t>(x.shape()[d]);
  size_t src_axis = static_cast<size_t>(x.shape()[axis]);

  std::vector<T> out(shape_numel(out_shape));
  const auto& xv = x.value();
  for (size_t o = 0; o < outer; ++o) {
    const T* src = xv.data() + (o * src_axis + start) * inner;
    T* dst = out.data() + o * static_cast<size_t>(len) * inner;
    std::copy(src, src + static_cast<size_t>(len) * inner, dst);
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {xn},
                                [xn, outer, inner, src_axis, start,
                                 len](detail::TensorNode<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t o = 0; o < outer; ++o) {
                                    const T* g =
                                        self.grad.data() + o * static_cast<size_t>(len) * inner;
                                    T* dst = xn->grad.data() + (o * src_axis + start) * inner;
                                    for (size_t i = 0; i < static_cast<size_t>(len) * inner; ++i)
                                      dst[i] += g[i];
                                  }
                                });
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int r = parts[0].rank();
  if (axis < 0) axis += r;
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && p.shape()[d] != out_shape[d])
        throw ShapeError("concat: shapes " + shape_str(out_shape) + " and " +
                         shape_str(p.shape()) + " differ off axis " + std::to_string(axis));
    total += p.shape()[axis];
  }
  out_shape[axis] = total;

  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(out_shape[d]);
  for (int d = axis + 1; d < r; ++d) inner *= static_cast<size_t>(out_shape[d]);

  std::vector<T> out(shape_numel(out_shape));
  size_t off = 0;  // offset along axis
  for (const auto& p : parts) {
    size_t pa = static_cast<size_t>(p.shape()[axis]);
    const auto& pv = p.value();
    for (size_t o = 0; o < outer; ++o)
      std::copy(pv.data() + o * pa * inner, pv.data() + (o + 1) * pa * inner,
                out.data() + (o * static_cast<size_t>(total) + off) * inner);
    off += pa;
  }

  std::vector<std::shared_ptr<detail::TensorNode<T>>> parents;
  std::vector<size_t> axis_sizes;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    axis_sizes.push_back(static_cast<size_t>(p.shape()[axis]));
  }
  auto ps = parents;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), std::move(parents),
      [ps, axis_sizes, outer, inner, total](detail::TensorNode<T>& self) {
        size_t off = 0;
        for (size_t k = 0; k < ps.size(); ++k) {
          auto& p = *ps[k];
          size_t pa = axis_sizes[k];
          if (p.requires_grad) {
            p.ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
              const T* g = self.grad.data() + (o * static_cast<size_t>(total) + off) * inner;
              T* dst = p.grad.data() + o * pa * inner;
              for (size_t i = 0; i < pa * inner; ++i) dst[i] += g[i];
            }
          }
          off += pa;
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& in, int axis, bool keepdims) {
  Shape out = in;
  if (keepdims) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

}  // namespace detail

template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& x, int axis, bool keepdims = true) {
  int r = x.rank();
  if (axis < 0) axis += r;
  Shape keep = x.shape();
  keep[axis] = 1;
  Shape out_shape = detail::reduced_shape(x.shape(), axis, keepdims);

  std::vector<T> out(shape_numel(out_shape), T(0));
  const auto& xv = x.value();
  detail::for_each_bcast2(x.shape(), x.shape(), keep,
                          [&](size_t, size_t ix, size_t io) { out[io] += xv[ix]; });
  auto xn = x.node();
  Shape k = keep;
  return detail::make_result<T>(std::move(out_shape), std::move(out), {xn},
                                [xn, k](detail::TensorNode<T>& self) {
                                  xn->ensure_grad();
                                  detail::for_each_bcast2(
                                      xn->shape, xn->shape, k,
                                      [&](size_t, size_t ix, size_t io) {
                                        xn->grad[ix] += self.grad[io];
                                      });
                                });
}

template <typename T>
TensorT<T> reduce_max(const TensorT<T>& x, int axis, bool keepdims = true) {
  int r = x.rank();
  if (axis < 0) axis += r;
  Shape keep = x.shape();
  keep[axis] = 1;
  Shape out_shape = detail::reduced_shape(x.shape(), axis, keepdims);

  size_t n_out = shape_numel(out_shape);
  std::vector<T> out(n_out, std::numeric_limits<T>::lowest());
  auto argmax = std::make_shared<std::vector<size_t>>(n_out, size_t(0));
  const auto& xv = x.value();
  detail::for_each_bcast2(x.shape(), x.shape(), keep, [&](size_t, size_t ix, size_t io) {
    if (xv[ix] > out[io]) {  // strict: first max wins on ties
      out[io] = xv[ix];
      (*argmax)[io] = ix;
    }
  });
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {xn},
                                [xn, argmax](detail::TensorNode<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t io = 0; io < self.grad.size(); ++io)
                                    xn->grad[(*argmax)[io]] += self.grad[io];
                                });
}

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  T acc = T(0);
  for (T v : x.value()) acc += v;
  auto xn = x.node();
  return detail::make_result<T>(Shape{1}, std::vector<T>{acc}, {xn},
                                [xn](detail::TensorNode<T>& self) {
                                  xn->ensure_grad();
                                  for (auto& g : xn->grad) g += self.grad[0];
                                });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// out[b] = x[b, idx[b]] for x of shape (B, N); backward scatters.
template <typename T>
TensorT<T> select_index(const TensorT<T>& x, const std::vector<int>& idx) {
  if (x.rank() != 2)
    throw ShapeError("select_index: expected rank-2 input, got " + shape_str(x.shape()));
  int B = x.dim(0), N = x.dim(1);
  if (static_cast<int>(idx.size()) != B)
    throw ShapeError("select_index: index count " + std::to_string(idx.size()) +
                     " != batch " + std::to_string(B));
  std::vector<T> out(B);
  for (int b = 0; b < B; ++b) {
    if (idx[b] < 0 || idx[b] >= N)
      throw ShapeError("select_index: index " + std::to_string(idx[b]) + " out of [0, " +
                       std::to_string(N) + ")");
    out[b] = x.value()[static_cast<size_t>(b) * N + idx[b]];
  }
  auto xn = x.node();
  auto ids = idx;
  return detail::make_result<T>(Shape{B}, std::move(out), {xn},
                                [xn, ids, N](detail::TensorNode<T>& self) {
                                  xn->ensure_grad();
                                  for (size_t b = 0; b < ids.size(); ++b)
                                    xn->grad[b * N + ids[b]] += self.grad[b];
                                });
}

/// Row lookup out[i] = matrix[ids[i]] with shape (rows..., d). Gradients flow
/// only to rows with index < trainable_top_k plus the UNK row; the PAD row is
/// always skipped. trainable_top_k == 0 freezes the matrix entirely.
template <typename T>
TensorT<T> embedding_lookup(const TensorT<T>& matrix, const std::vector<int>& ids,
                            Shape out_batch_shape, int trainable_top_k, int pad_index = 0,
                            int unk_index = 1) {
  if (matrix.rank() != 2)
    throw ShapeError("embedding_lookup: matrix must be rank 2, got " +
                     shape_str(matrix.shape()));
  int V = matrix.dim(0), d = matrix.dim(1);
  if (ids.size() != shape_numel(out_batch_shape))
    throw ShapeError("embedding_lookup: got " + std::to_string(ids.size()) + " ids for shape " +
                     shape_str(out_batch_shape));
  std::vector<T> out(ids.size() * static_cast<size_t>(d));
  const auto& mv = matrix.value();
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= V)
      throw ShapeError("embedding_lookup: id " + std::to_string(id) + " out of [0, " +
                       std::to_string(V) + ")");
    std::copy(mv.begin() + static_cast<size_t>(id) * d, mv.begin() + (static_cast<size_t>(id) + 1) * d,
              out.begin() + i * d);
  }
  Shape out_shape = out_batch_shape;
  out_shape.push_back(d);
  auto mn = matrix.node();
  auto idv = ids;
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {mn},
      [mn, idv, d, trainable_top_k, pad_index, unk_index](detail::TensorNode<T>& self) {
        if (trainable_top_k <= 0) return;
        mn->ensure_grad();
        for (size_t i = 0; i < idv.size(); ++i) {
          int id = idv[i];
          if (id == pad_index) continue;
          if (id >= trainable_top_k && id != unk_index) continue;
          T* dst = mn->grad.data() + static_cast<size_t>(id) * d;
          const T* g = self.grad.data() + i * d;
          for (int j = 0; j < d; ++j) dst[j] += g[j];
        }
      });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Visits the recorded graph in exact
/// reverse topological order, accumulating into .grad of every reachable
/// requires_grad tensor. Backward rules are released afterwards; running a
/// second sweep through the same graph is rejected.
template <typename T>
void backward(const TensorT<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  using Node = detail::TensorNode<T>;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    // consumed is only ever set on interior nodes; leaves stay reusable
    if (node->consumed)
      throw GraphError("backward: graph already consumed by a previous backward pass");
    if (child < node->parents.size()) {
      Node* next = node->parents[child++].get();
      if (seen.insert(next).second) stack.emplace_back(next, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto* ln = loss.node().get();
  ln->ensure_grad();
  ln->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
      n->consumed = true;
      n->backward = nullptr;  // release closures (and their parent references)
    }
  }
}

using Tensor = TensorT<float>;

}  // namespace mrc
