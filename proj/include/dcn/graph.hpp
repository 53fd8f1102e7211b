#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dcn/errors.hpp"
#include "dcn/tensor.hpp"

namespace dcn {

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
};

/// Reverse-mode tape. Forward values are computed eagerly as ops are
/// recorded; backward() replays node closures in exact reverse insertion
/// order, so gradient summation order is deterministic. Gradients accumulate
/// additively into leaf tensors; callers zero them between steps.
template <typename T>
class Graph {
 public:
  /// Registers an existing tensor as a leaf. Gradients flow into it iff it
  /// already carries a grad buffer (see param()/constant()).
  Var leaf(Tensor<T> t) {
    return push("leaf", {}, std::move(t), nullptr);
  }

  Var constant(Tensor<T> t) {
    if (t.has_grad()) t = t.clone();  // never write grads into a shared constant
    if (t.has_grad()) t.drop_grad();
    return leaf(std::move(t));
  }

  Var param(Tensor<T> t) {
    t.ensure_grad();
    return leaf(std::move(t));
  }

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].out; }
  Tensor<T>& tensor(Var v) { return nodes_[check(v)].out; }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor<T>&ta = value(a), &tb = value(b);
    require_same_shape("add", ta, tb);
    Tensor<T> out(ta.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = ta[i] + tb[i];
    return push("add", {a, b}, std::move(out), [](Node& nd) {
      accumulate_identity(nd.out, nd.in[0]);
      accumulate_identity(nd.out, nd.in[1]);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor<T>&ta = value(a), &tb = value(b);
    require_same_shape("sub", ta, tb);
    Tensor<T> out(ta.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = ta[i] - tb[i];
    return push("sub", {a, b}, std::move(out), [](Node& nd) {
      accumulate_identity(nd.out, nd.in[0]);
      if (nd.in[1].has_grad()) {
        const T* g = nd.out.grad_data();
        T* d = nd.in[1].grad_data();
        for (std::size_t i = 0; i < nd.out.size(); ++i) d[i] -= g[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor<T>&ta = value(a), &tb = value(b);
    require_same_shape("mul", ta, tb);
    Tensor<T> out(ta.shape());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = ta[i] * tb[i];
    return push("mul", {a, b}, std::move(out), [](Node& nd) {
      const T* g = nd.out.grad_data();
      Tensor<T>&ia = nd.in[0], &ib = nd.in[1];
      if (ia.has_grad()) {
        T* d = ia.grad_data();
        const T* vb = ib.data();
        for (std::size_t i = 0; i < nd.out.size(); ++i) d[i] += g[i] * vb[i];
      }
      if (ib.has_grad()) {
        T* d = ib.grad_data();
        const T* va = ia.data();
        for (std::size_t i = 0; i < nd.out.size(); ++i) d[i] += g[i] * va[i];
      }
    });
  }

  /// alpha * a + beta, elementwise.
  Var affine(Var a, T alpha, T beta) {
    const Tensor<T>& ta = value(a);
    Tensor<T> out(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = alpha * ta[i] + beta;
    return push("affine", {a}, std::move(out), [alpha](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      T* d = nd.in[0].grad_data();
      for (std::size_t i = 0; i < nd.out.size(); ++i) d[i] += alpha * g[i];
    });
  }

  Var scale(Var a, T alpha) { return affine(a, alpha, T(0)); }

  Var relu(Var a) {
    const Tensor<T>& ta = value(a);
    Tensor<T> out(ta.shape());
    for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] > T(0) ? ta[i] : T(0);
    return push("relu", {a}, std::move(out), [](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      const T* x = nd.in[0].data();
      T* d = nd.in[0].grad_data();
      for (std::size_t i = 0; i < nd.out.size(); ++i)
        if (x[i] > T(0)) d[i] += g[i];
    });
  }

  // ---- convolution / pooling ----

  /// NHWC convolution with kernel [kh,kw,Cin,Cout], no bias.
  Var conv2d(Var x, Var w, int stride, int pad) {
    const Tensor<T>&tx = value(x), &tw = value(w);
    if (tx.ndim() != 4 || tw.ndim() != 4) {
      throw ShapeError("conv2d expects NHWC input and [kh,kw,Cin,Cout] kernel, got " +
                       shape_str(tx.shape()) + " and " + shape_str(tw.shape()));
    }
    if (stride < 1 || pad < 0) throw ValidationError("conv2d: bad stride/pad");
    const int N = tx.dim(0), H = tx.dim(1), W = tx.dim(2), Ci = tx.dim(3);
    const int KH = tw.dim(0), KW = tw.dim(1), Co = tw.dim(3);
    if (tw.dim(2) != Ci) {
      throw ShapeError("conv2d channel mismatch: input " + shape_str(tx.shape()) +
                       " vs kernel " + shape_str(tw.shape()));
    }
    if (KH > H + 2 * pad || KW > W + 2 * pad) {
      throw ShapeError("conv2d kernel " + shape_str(tw.shape()) +
                       " larger than padded input " + shape_str(tx.shape()));
    }
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    Tensor<T> out({N, OH, OW, Co});
    conv2d_forward(tx, tw, out, stride, pad);
    return push("conv2d", {x, w}, std::move(out), [stride, pad](Node& nd) {
      if (nd.in[0].has_grad()) conv2d_backward_input(nd.in[0], nd.in[1], nd.out, stride, pad);
      if (nd.in[1].has_grad()) conv2d_backward_kernel(nd.in[0], nd.in[1], nd.out, stride, pad);
    });
  }

  /// Adds a per-channel bias over the last axis.
  Var bias_add(Var x, Var b) {
    const Tensor<T>&tx = value(x), &tb = value(b);
    if (tb.ndim() != 1 || tb.dim(0) != tx.dim(tx.ndim() - 1)) {
      throw ShapeError("bias_add: bias " + shape_str(tb.shape()) +
                       " does not match channels of " + shape_str(tx.shape()));
    }
    const int C = tb.dim(0);
    Tensor<T> out(tx.shape());
    const std::size_t n = tx.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = tx[i] + tb[i % C];
    return push("bias_add", {x, b}, std::move(out), [C](Node& nd) {
      accumulate_identity(nd.out, nd.in[0]);
      if (nd.in[1].has_grad()) {
        const T* g = nd.out.grad_data();
        T* db = nd.in[1].grad_data();
        const std::size_t n = nd.out.size();
        for (int c = 0; c < C; ++c) {
          T s = T(0);
          for (std::size_t i = static_cast<std::size_t>(c); i < n; i += C) s += g[i];
          db[c] += s;
        }
      }
    });
  }

  Var maxpool2d(Var x, int k, int stride, int pad) {
    const Tensor<T>& tx = value(x);
    if (tx.ndim() != 4) throw ShapeError("maxpool2d expects NHWC, got " + shape_str(tx.shape()));
    const int N = tx.dim(0), H = tx.dim(1), W = tx.dim(2), C = tx.dim(3);
    const int OH = (H + 2 * pad - k) / stride + 1;
    const int OW = (W + 2 * pad - k) / stride + 1;
    if (OH < 1 || OW < 1) throw ShapeError("maxpool2d window exceeds input");
    Tensor<T> out({N, OH, OW, C});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* xv = tx.data();
    T* ov = out.data();
    for (int n = 0; n < N; ++n)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox)
          for (int c = 0; c < C; ++c) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_idx = 0;
            bool any = false;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                const std::size_t idx =
                    ((static_cast<std::size_t>(n) * H + iy) * W + ix) * C + c;
                if (!any || xv[idx] > best) {
                  best = xv[idx];
                  best_idx = idx;
                  any = true;
                }
              }
            }
            const std::size_t oidx =
                ((static_cast<std::size_t>(n) * OH + oy) * OW + ox) * C + c;
            ov[oidx] = best;
            (*argmax)[oidx] = best_idx;
          }
    return push("maxpool2d", {x}, std::move(out), [argmax](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      T* d = nd.in[0].grad_data();
      for (std::size_t i = 0; i < nd.out.size(); ++i) d[(*argmax)[i]] += g[i];
    });
  }

  // ---- linear algebra ----

  /// x [B,I] (or [I]) times w [I,O] plus b [O].
  Var fully_connected(Var x, Var w, Var b) {
    const Tensor<T>&tx = value(x), &tw = value(w), &tb = value(b);
    const bool batched = tx.ndim() == 2;
    if (!batched && tx.ndim() != 1)
      throw ShapeError("fully_connected expects 1-D or 2-D input, got " + shape_str(tx.shape()));
    const int B = batched ? tx.dim(0) : 1;
    const int I = batched ? tx.dim(1) : tx.dim(0);
    if (tw.ndim() != 2 || tw.dim(0) != I)
      throw ShapeError("fully_connected: weight " + shape_str(tw.shape()) +
                       " does not match input " + shape_str(tx.shape()));
    const int O = tw.dim(1);
    if (tb.ndim() != 1 || tb.dim(0) != O)
      throw ShapeError("fully_connected: bias " + shape_str(tb.shape()) + " expected [" +
                       std::to_string(O) + "]");
    Tensor<T> out(batched ? Shape{B, O} : Shape{O});
    const T* xv = tx.data();
    const T* wv = tw.data();
    const T* bv = tb.data();
    T* ov = out.data();
    for (int r = 0; r < B; ++r) {
      T* orow = ov + static_cast<std::size_t>(r) * O;
      for (int o = 0; o < O; ++o) orow[o] = bv[o];
      const T* xrow = xv + static_cast<std::size_t>(r) * I;
      for (int i = 0; i < I; ++i) {
        const T a = xrow[i];
        const T* wrow = wv + static_cast<std::size_t>(i) * O;
        for (int o = 0; o < O; ++o) orow[o] += a * wrow[o];
      }
    }
    return push("fully_connected", {x, w, b}, std::move(out), [B, I, O](Node& nd) {
      const T* g = nd.out.grad_data();
      Tensor<T>&ix = nd.in[0], &iw = nd.in[1], &ib = nd.in[2];
      if (ix.has_grad()) {
        T* dx = ix.grad_data();
        const T* wv = iw.data();
        for (int r = 0; r < B; ++r) {
          const T* grow = g + static_cast<std::size_t>(r) * O;
          T* dxrow = dx + static_cast<std::size_t>(r) * I;
          for (int i = 0; i < I; ++i) {
            const T* wrow = wv + static_cast<std::size_t>(i) * O;
            T s = T(0);
            for (int o = 0; o < O; ++o) s += grow[o] * wrow[o];
            dxrow[i] += s;
          }
        }
      }
      if (iw.has_grad()) {
        T* dw = iw.grad_data();
        const T* xv = ix.data();
        for (int r = 0; r < B; ++r) {
          const T* grow = g + static_cast<std::size_t>(r) * O;
          const T* xrow = xv + static_cast<std::size_t>(r) * I;
          for (int i = 0; i < I; ++i) {
            const T a = xrow[i];
            T* dwrow = dw + static_cast<std::size_t>(i) * O;
            for (int o = 0; o < O; ++o) dwrow[o] += a * grow[o];
          }
        }
      }
      if (ib.has_grad()) {
        T* db = ib.grad_data();
        for (int r = 0; r < B; ++r) {
          const T* grow = g + static_cast<std::size_t>(r) * O;
          for (int o = 0; o < O; ++o) db[o] += grow[o];
        }
      }
    });
  }

  // ---- reductions / normalizations ----

  /// Softmax jointly over the given axes, stabilized by max subtraction over
  /// the same axes. Output sums to 1 over the axes for every fixed setting of
  /// the remaining axes.
  Var softmax_over(Var x, const std::vector<int>& axes) {
    const Tensor<T>& tx = value(x);
    auto split = make_axis_split(tx.shape(), axes, "softmax_over");
    Tensor<T> out(tx.shape());
    const T* xv = tx.data();
    T* ov = out.data();
    for (std::size_t outer : split.outer_offsets) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t inner : split.inner_offsets) mx = std::max(mx, xv[outer + inner]);
      T sum = T(0);
      for (std::size_t inner : split.inner_offsets) {
        const T e = std::exp(xv[outer + inner] - mx);
        ov[outer + inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t inner : split.inner_offsets) ov[outer + inner] *= inv;
    }
    auto sp = std::make_shared<AxisSplit>(std::move(split));
    return push("softmax_over", {x}, std::move(out), [sp](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      const T* y = nd.out.data();
      T* d = nd.in[0].grad_data();
      for (std::size_t outer : sp->outer_offsets) {
        T dot = T(0);
        for (std::size_t inner : sp->inner_offsets) {
          const std::size_t i = outer + inner;
          dot += g[i] * y[i];
        }
        for (std::size_t inner : sp->inner_offsets) {
          const std::size_t i = outer + inner;
          d[i] += y[i] * (g[i] - dot);
        }
      }
    });
  }

  /// Max over one axis. keepdim keeps a size-1 axis in place.
  Var max_reduce(Var x, int axis, bool keepdim = false) {
    const Tensor<T>& tx = value(x);
    if (axis < 0 || axis >= tx.ndim())
      throw ValidationError("max_reduce: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(tx.shape()));
    auto split = make_axis_split(tx.shape(), {axis}, "max_reduce");
    Shape oshape;
    for (int d = 0; d < tx.ndim(); ++d) {
      if (d == axis) {
        if (keepdim) oshape.push_back(1);
      } else {
        oshape.push_back(tx.dim(d));
      }
    }
    if (oshape.empty()) oshape.push_back(1);
    Tensor<T> out(std::move(oshape));
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* xv = tx.data();
    T* ov = out.data();
    std::size_t o = 0;
    for (std::size_t outer : split.outer_offsets) {
      T best = -std::numeric_limits<T>::infinity();
      std::size_t best_idx = 0;
      bool first = true;
      for (std::size_t inner : split.inner_offsets) {
        const std::size_t i = outer + inner;
        if (first || xv[i] > best) {
          best = xv[i];
          best_idx = i;
          first = false;
        }
      }
      ov[o] = best;
      (*argmax)[o] = best_idx;
      ++o;
    }
    return push("max_reduce", {x}, std::move(out), [argmax](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      T* d = nd.in[0].grad_data();
      for (std::size_t i = 0; i < nd.out.size(); ++i) d[(*argmax)[i]] += g[i];
    });
  }

  /// Concatenate along the last axis; all other extents must agree.
  Var concat_last(Var a, Var b) {
    const Tensor<T>&ta = value(a), &tb = value(b);
    if (ta.ndim() != tb.ndim())
      throw ShapeError("concat_last rank mismatch: " + shape_str(ta.shape()) + " vs " +
                       shape_str(tb.shape()));
    for (int d = 0; d + 1 < ta.ndim(); ++d) {
      if (ta.dim(d) != tb.dim(d))
        throw ShapeError("concat_last extent mismatch: " + shape_str(ta.shape()) + " vs " +
                         shape_str(tb.shape()));
    }
    const int la = ta.dim(ta.ndim() - 1), lb = tb.dim(tb.ndim() - 1);
    Shape oshape = ta.shape();
    oshape.back() = la + lb;
    Tensor<T> out(std::move(oshape));
    const std::size_t rows = ta.size() / static_cast<std::size_t>(la);
    const T* av = ta.data();
    const T* bv = tb.data();
    T* ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(av + r * la, av + (r + 1) * la, ov + r * (la + lb));
      std::copy(bv + r * lb, bv + (r + 1) * lb, ov + r * (la + lb) + la);
    }
    return push("concat_last", {a, b}, std::move(out), [la, lb, rows](Node& nd) {
      const T* g = nd.out.grad_data();
      if (nd.in[0].has_grad()) {
        T* d = nd.in[0].grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int i = 0; i < la; ++i) d[r * la + i] += g[r * (la + lb) + i];
      }
      if (nd.in[1].has_grad()) {
        T* d = nd.in[1].grad_data();
        for (std::size_t r = 0; r < rows; ++r)
          for (int i = 0; i < lb; ++i) d[r * lb + i] += g[r * (la + lb) + la + i];
      }
    });
  }

  /// Extract row r of a 2-D tensor as a 1-D vector.
  Var take_row(Var m, int row) {
    const Tensor<T>& tm = value(m);
    if (tm.ndim() != 2) throw ShapeError("take_row expects 2-D, got " + shape_str(tm.shape()));
    if (row < 0 || row >= tm.dim(0)) throw ValidationError("take_row: row out of range");
    const int C = tm.dim(1);
    Tensor<T> out({C});
    const T* mv = tm.data() + static_cast<std::size_t>(row) * C;
    std::copy(mv, mv + C, out.data());
    return push("take_row", {m}, std::move(out), [row, C](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      T* d = nd.in[0].grad_data() + static_cast<std::size_t>(row) * C;
      for (int i = 0; i < C; ++i) d[i] += g[i];
    });
  }

  /// L2-normalizes a 1-D vector; inputs with norm below 1e-12 pass through
  /// unchanged so an all-suppressed descriptor contributes nothing.
  Var l2_normalize(Var v) {
    const Tensor<T>& tv = value(v);
    if (tv.ndim() != 1) throw ShapeError("l2_normalize expects 1-D, got " + shape_str(tv.shape()));
    return l2_normalize_rows_impl(v, 1, tv.dim(0), tv.shape());
  }

  /// Row-wise L2 normalization of a 2-D tensor, same degenerate-row guard.
  Var l2_normalize_rows(Var m) {
    const Tensor<T>& tm = value(m);
    if (tm.ndim() != 2)
      throw ShapeError("l2_normalize_rows expects 2-D, got " + shape_str(tm.shape()));
    return l2_normalize_rows_impl(m, tm.dim(0), tm.dim(1), tm.shape());
  }

  /// Attention-weighted pooling: V[k,c] = sum over n,i,j of F[n,i,j,c] * A[n,i,j,k].
  Var weighted_sum_pool(Var f, Var a) {
    const Tensor<T>&tf = value(f), &ta = value(a);
    if (tf.ndim() != 4 || ta.ndim() != 4)
      throw ShapeError("weighted_sum_pool expects 4-D inputs, got " + shape_str(tf.shape()) +
                       " and " + shape_str(ta.shape()));
    for (int d = 0; d < 3; ++d) {
      if (tf.dim(d) != ta.dim(d))
        throw ShapeError("weighted_sum_pool extent mismatch: " + shape_str(tf.shape()) + " vs " +
                         shape_str(ta.shape()));
    }
    const int C = tf.dim(3), K = ta.dim(3);
    const std::size_t cells = tf.size() / static_cast<std::size_t>(C);
    Tensor<T> out({K, C});
    const T* fv = tf.data();
    const T* av = ta.data();
    T* ov = out.data();
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const T* frow = fv + cell * C;
      const T* arow = av + cell * K;
      for (int k = 0; k < K; ++k) {
        const T w = arow[k];
        T* vrow = ov + static_cast<std::size_t>(k) * C;
        for (int c = 0; c < C; ++c) vrow[c] += w * frow[c];
      }
    }
    return push("weighted_sum_pool", {f, a}, std::move(out), [C, K, cells](Node& nd) {
      const T* g = nd.out.grad_data();
      Tensor<T>&fi = nd.in[0], &ai = nd.in[1];
      if (fi.has_grad()) {
        T* df = fi.grad_data();
        const T* av = ai.data();
        for (std::size_t cell = 0; cell < cells; ++cell) {
          T* dfrow = df + cell * C;
          const T* arow = av + cell * K;
          for (int k = 0; k < K; ++k) {
            const T w = arow[k];
            const T* grow = g + static_cast<std::size_t>(k) * C;
            for (int c = 0; c < C; ++c) dfrow[c] += w * grow[c];
          }
        }
      }
      if (ai.has_grad()) {
        T* da = ai.grad_data();
        const T* fv = fi.data();
        for (std::size_t cell = 0; cell < cells; ++cell) {
          const T* frow = fv + cell * C;
          T* darow = da + cell * K;
          for (int k = 0; k < K; ++k) {
            const T* grow = g + static_cast<std::size_t>(k) * C;
            T s = T(0);
            for (int c = 0; c < C; ++c) s += frow[c] * grow[c];
            darow[k] += s;
          }
        }
      }
    });
  }

  /// Mean over the spatial axes: [N,h,w,C] -> [N,C].
  Var global_avg_pool(Var x) {
    const Tensor<T>& tx = value(x);
    if (tx.ndim() != 4) throw ShapeError("global_avg_pool expects NHWC, got " + shape_str(tx.shape()));
    const int N = tx.dim(0), H = tx.dim(1), W = tx.dim(2), C = tx.dim(3);
    Tensor<T> out({N, C});
    const T inv = T(1) / static_cast<T>(H * W);
    const T* xv = tx.data();
    T* ov = out.data();
    for (int n = 0; n < N; ++n) {
      T* orow = ov + static_cast<std::size_t>(n) * C;
      for (int p = 0; p < H * W; ++p) {
        const T* xrow = xv + (static_cast<std::size_t>(n) * H * W + p) * C;
        for (int c = 0; c < C; ++c) orow[c] += xrow[c];
      }
      for (int c = 0; c < C; ++c) orow[c] *= inv;
    }
    return push("global_avg_pool", {x}, std::move(out), [N, H, W, C, inv](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      T* d = nd.in[0].grad_data();
      for (int n = 0; n < N; ++n) {
        const T* grow = g + static_cast<std::size_t>(n) * C;
        for (int p = 0; p < H * W; ++p) {
          T* drow = d + (static_cast<std::size_t>(n) * H * W + p) * C;
          for (int c = 0; c < C; ++c) drow[c] += grow[c] * inv;
        }
      }
    });
  }

  Var sum_all(Var x) {
    const Tensor<T>& tx = value(x);
    T s = T(0);
    for (std::size_t i = 0; i < tx.size(); ++i) s += tx[i];
    return push("sum_all", {x}, Tensor<T>::scalar(s), [](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T g = nd.out.grad_data()[0];
      T* d = nd.in[0].grad_data();
      for (std::size_t i = 0; i < nd.in[0].size(); ++i) d[i] += g;
    });
  }

  /// Mean cross-entropy with integer class labels; logits [B,M] with B
  /// labels, or a single [M] vector with one label. Stabilized by max
  /// subtraction.
  Var cross_entropy(Var logits, std::vector<int> labels) {
    const Tensor<T>& tl = value(logits);
    const bool batched = tl.ndim() == 2;
    if (!batched && tl.ndim() != 1)
      throw ShapeError("cross_entropy expects 1-D or 2-D logits, got " + shape_str(tl.shape()));
    const int B = batched ? tl.dim(0) : 1;
    const int M = batched ? tl.dim(1) : tl.dim(0);
    if (static_cast<int>(labels.size()) != B)
      throw ValidationError("cross_entropy: expected " + std::to_string(B) + " labels, got " +
                            std::to_string(labels.size()));
    for (int y : labels) {
      if (y < 0 || y >= M)
        throw ValidationError("cross_entropy: label " + std::to_string(y) +
                              " outside [0," + std::to_string(M) + ")");
    }
    const T* lv = tl.data();
    T loss = T(0);
    for (int r = 0; r < B; ++r) {
      const T* row = lv + static_cast<std::size_t>(r) * M;
      T mx = row[0];
      for (int j = 1; j < M; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (int j = 0; j < M; ++j) sum += std::exp(row[j] - mx);
      loss += mx + std::log(sum) - row[labels[static_cast<std::size_t>(r)]];
    }
    loss /= static_cast<T>(B);
    auto lab = std::make_shared<std::vector<int>>(std::move(labels));
    return push("cross_entropy", {logits}, Tensor<T>::scalar(loss), [B, M, lab](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T g = nd.out.grad_data()[0] / static_cast<T>(B);
      const T* lv = nd.in[0].data();
      T* d = nd.in[0].grad_data();
      for (int r = 0; r < B; ++r) {
        const T* row = lv + static_cast<std::size_t>(r) * M;
        T* drow = d + static_cast<std::size_t>(r) * M;
        T mx = row[0];
        for (int j = 1; j < M; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int j = 0; j < M; ++j) sum += std::exp(row[j] - mx);
        const T inv = T(1) / sum;
        for (int j = 0; j < M; ++j) {
          T p = std::exp(row[j] - mx) * inv;
          if (j == (*lab)[static_cast<std::size_t>(r)]) p -= T(1);
          drow[j] += g * p;
        }
      }
    });
  }

  // ---- backward ----

  /// Seeds d(loss)/d(loss) = 1 and replays nodes in reverse insertion order.
  void backward(Var loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.out.size() != 1) throw ValidationError("backward expects a scalar loss");
    if (!ln.out.has_grad())
      throw ValidationError("backward: loss does not depend on any parameter");
    ln.out.grad_data()[0] += T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (nd.backward && nd.out.has_grad()) nd.backward(nd);
    }
  }

  struct Node {
    const char* kind;
    std::vector<Tensor<T>> in;  // aliases of input node outputs
    Tensor<T> out;
    std::function<void(Node&)> backward;
  };

  const Node& node(Var v) const { return nodes_[check(v)]; }

 private:
  struct AxisSplit {
    std::vector<std::size_t> outer_offsets;  // base offset per reduction group
    std::vector<std::size_t> inner_offsets;  // offsets within a group
  };

  static AxisSplit make_axis_split(const Shape& shape, const std::vector<int>& axes,
                                   const char* op) {
    if (axes.empty()) throw ValidationError(std::string(op) + ": empty axis set");
    std::vector<bool> is_axis(shape.size(), false);
    for (int a : axes) {
      if (a < 0 || a >= static_cast<int>(shape.size()))
        throw ValidationError(std::string(op) + ": axis " + std::to_string(a) +
                              " out of range for " + shape_str(shape));
      if (is_axis[static_cast<std::size_t>(a)])
        throw ValidationError(std::string(op) + ": duplicate axis");
      is_axis[static_cast<std::size_t>(a)] = true;
    }
    // Row-major strides.
    std::vector<std::size_t> stride(shape.size(), 1);
    for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d)
      stride[d] = stride[d + 1] * static_cast<std::size_t>(shape[d + 1]);
    AxisSplit split;
    split.outer_offsets = enumerate_offsets(shape, stride, is_axis, false);
    split.inner_offsets = enumerate_offsets(shape, stride, is_axis, true);
    return split;
  }

  static std::vector<std::size_t> enumerate_offsets(const Shape& shape,
                                                    const std::vector<std::size_t>& stride,
                                                    const std::vector<bool>& is_axis,
                                                    bool pick_axes) {
    std::vector<std::size_t> out{0};
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (is_axis[d] != pick_axes) continue;
      std::vector<std::size_t> next;
      next.reserve(out.size() * static_cast<std::size_t>(shape[d]));
      for (std::size_t base : out)
        for (int i = 0; i < shape[d]; ++i) next.push_back(base + stride[d] * static_cast<std::size_t>(i));
      out = std::move(next);
    }
    return out;
  }

  Var l2_normalize_rows_impl(Var v, int rows, int cols, const Shape& shape) {
    const Tensor<T>& tv = value(v);
    Tensor<T> out(shape);
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* xv = tv.data();
    T* ov = out.data();
    for (int r = 0; r < rows; ++r) {
      const T* x = xv + static_cast<std::size_t>(r) * cols;
      T* y = ov + static_cast<std::size_t>(r) * cols;
      T sq = T(0);
      for (int c = 0; c < cols; ++c) sq += x[c] * x[c];
      const T nrm = std::sqrt(sq);
      (*norms)[static_cast<std::size_t>(r)] = nrm;
      if (nrm < T(1e-12)) {
        std::copy(x, x + cols, y);
      } else {
        const T inv = T(1) / nrm;
        for (int c = 0; c < cols; ++c) y[c] = x[c] * inv;
      }
    }
    return push("l2_normalize", {v}, std::move(out), [rows, cols, norms](Node& nd) {
      if (!nd.in[0].has_grad()) return;
      const T* g = nd.out.grad_data();
      const T* y = nd.out.data();
      T* d = nd.in[0].grad_data();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * cols;
        const T nrm = (*norms)[static_cast<std::size_t>(r)];
        if (nrm < T(1e-12)) {
          for (int c = 0; c < cols; ++c) d[off + c] += g[off + c];
          continue;
        }
        T dot = T(0);
        for (int c = 0; c < cols; ++c) dot += g[off + c] * y[off + c];
        const T inv = T(1) / nrm;
        for (int c = 0; c < cols; ++c) d[off + c] += (g[off + c] - dot * y[off + c]) * inv;
      }
    });
  }

  // ---- conv kernels ----

  static void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& out,
                             int stride, int pad) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const int KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
    const int OH = out.dim(1), OW = out.dim(2);
    const T* xv = x.data();
    const T* wv = w.data();
    T* ov = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int row = 0; row < N * OH; ++row) {
      const int n = row / OH;
      const int oy = row % OH;
      for (int ox = 0; ox < OW; ++ox) {
        T* orow = ov + ((static_cast<std::size_t>(n) * OH + oy) * OW + ox) * Co;
        for (int ky = 0; ky < KH; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < KW; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const T* xrow = xv + ((static_cast<std::size_t>(n) * H + iy) * W + ix) * Ci;
            const T* wbase = wv + (static_cast<std::size_t>(ky) * KW + kx) * Ci * Co;
            for (int ci = 0; ci < Ci; ++ci) {
              const T a = xrow[ci];
              const T* wrow = wbase + static_cast<std::size_t>(ci) * Co;
              for (int co = 0; co < Co; ++co) orow[co] += a * wrow[co];
            }
          }
        }
      }
    }
  }

  static void conv2d_backward_input(Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& out,
                                    int stride, int pad) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const int KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
    const int OH = out.dim(1), OW = out.dim(2);
    const T* wv = w.data();
    const T* gv = out.grad_data();
    T* dx = x.grad_data();
    // Gather form: each input cell sums its own contributions, so the result
    // is bitwise identical for any thread count.
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int row = 0; row < N * H; ++row) {
      const int n = row / H;
      const int iy = row % H;
      for (int ix = 0; ix < W; ++ix) {
        T* dxrow = dx + ((static_cast<std::size_t>(n) * H + iy) * W + ix) * Ci;
        for (int ky = 0; ky < KH; ++ky) {
          const int oy_num = iy + pad - ky;
          if (oy_num < 0 || oy_num % stride != 0) continue;
          const int oy = oy_num / stride;
          if (oy >= OH) continue;
          for (int kx = 0; kx < KW; ++kx) {
            const int ox_num = ix + pad - kx;
            if (ox_num < 0 || ox_num % stride != 0) continue;
            const int ox = ox_num / stride;
            if (ox >= OW) continue;
            const T* grow = gv + ((static_cast<std::size_t>(n) * OH + oy) * OW + ox) * Co;
            const T* wbase = wv + (static_cast<std::size_t>(ky) * KW + kx) * Ci * Co;
            for (int ci = 0; ci < Ci; ++ci) {
              const T* wrow = wbase + static_cast<std::size_t>(ci) * Co;
              T s = T(0);
              for (int co = 0; co < Co; ++co) s += grow[co] * wrow[co];
              dxrow[ci] += s;
            }
          }
        }
      }
    }
  }

  static void conv2d_backward_kernel(const Tensor<T>& x, Tensor<T>& w, const Tensor<T>& out,
                                     int stride, int pad) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    const int KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
    const int OH = out.dim(1), OW = out.dim(2);
    const T* xv = x.data();
    const T* gv = out.grad_data();
    T* dw = w.grad_data();
    // Parallel over kernel positions: disjoint dw slices, deterministic sums.
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int kpos = 0; kpos < KH * KW; ++kpos) {
      const int ky = kpos / KW;
      const int kx = kpos % KW;
      T* dwbase = dw + static_cast<std::size_t>(kpos) * Ci * Co;
      for (int n = 0; n < N; ++n) {
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            const T* xrow = xv + ((static_cast<std::size_t>(n) * H + iy) * W + ix) * Ci;
            const T* grow = gv + ((static_cast<std::size_t>(n) * OH + oy) * OW + ox) * Co;
            for (int ci = 0; ci < Ci; ++ci) {
              const T a = xrow[ci];
              T* dwrow = dwbase + static_cast<std::size_t>(ci) * Co;
              for (int co = 0; co < Co; ++co) dwrow[co] += a * grow[co];
            }
          }
        }
      }
    }
  }

  static void accumulate_identity(const Tensor<T>& out, Tensor<T>& in) {
    if (!in.has_grad()) return;
    const T* g = out.grad_data();
    T* d = in.grad_data();
    for (std::size_t i = 0; i < out.size(); ++i) d[i] += g[i];
  }

  std::size_t check(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ValidationError("invalid graph variable");
    return static_cast<std::size_t>(v.id);
  }

  Var push(const char* kind, std::vector<Var> inputs, Tensor<T> out,
           std::function<void(Node&)> backward) {
    Node nd;
    nd.kind = kind;
    nd.in.reserve(inputs.size());
    bool tracked = false;
    for (Var v : inputs) {
      Tensor<T>& t = nodes_[check(v)].out;
      tracked = tracked || t.has_grad();
      nd.in.push_back(t);
    }
    if (inputs.empty()) tracked = out.has_grad();  // leaf
    if (tracked) out.ensure_grad();
    nd.out = std::move(out);
    nd.backward = tracked ? std::move(backward) : nullptr;
    nodes_.push_back(std::move(nd));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace dcn
