#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "dcn/rng.hpp"
#include "dcn/tensor.hpp"

namespace testsup {

template <typename T>
dcn::Tensor<T> random_tensor(dcn::Shape shape, dcn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  dcn::Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct quadruple-loop convolution, independent of the graph implementation.
template <typename T>
dcn::Tensor<T> conv2d_oracle(const dcn::Tensor<T>& x, const dcn::Tensor<T>& w, int stride,
                             int pad) {
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const int KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  dcn::Tensor<T> out({N, OH, OW, Co});
  for (int n = 0; n < N; ++n)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox)
        for (int co = 0; co < Co; ++co) {
          T acc = T(0);
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx)
              for (int ci = 0; ci < Ci; ++ci) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at({n, iy, ix, ci}) * w.at({ky, kx, ci, co});
              }
          out.at({n, oy, ox, co}) = acc;
        }
  return out;
}

// Direct triple-loop attention pooling: V[k,c] = sum_nij F*A.
template <typename T>
dcn::Tensor<T> pool_oracle(const dcn::Tensor<T>& f, const dcn::Tensor<T>& a) {
  const int N = f.dim(0), H = f.dim(1), W = f.dim(2), C = f.dim(3);
  const int K = a.dim(3);
  dcn::Tensor<T> out({K, C});
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) acc += f.at({n, i, j, c}) * a.at({n, i, j, k});
      out.at({k, c}) = acc;
    }
  return out;
}

template <typename T>
double max_abs_diff(const dcn::Tensor<T>& a, const dcn::Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace testsup
