#include "triadpi/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace triadpi::layers {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Padded scratch layout used by the stride-1 3x3x3 path. Every tap becomes a
// fixed pointer offset, so each tap is one GEMM over a contiguous range.
struct PadLayout {
  int dp, hp, wp;
  std::size_t total;
  std::size_t first;
  std::size_t length;

  explicit PadLayout(const Grid3& g)
      : dp(g.d + 2), hp(g.h + 2), wp(g.w + 2), total(std::size_t(dp) * hp * wp) {
    first = (std::size_t(1) * hp + 1) * wp + 1;
    const std::size_t last = (std::size_t(g.d) * hp + g.h) * wp + g.w;
    length = last - first + 1;
  }
  std::size_t at(int z, int y, int x) const { return (std::size_t(z) * hp + y) * wp + x; }
  std::ptrdiff_t tap_offset(int k) const {
    const int dz = k / 9 - 1, dy = (k / 3) % 3 - 1, dx = k % 3 - 1;
    return std::ptrdiff_t(dz) * hp * wp + std::ptrdiff_t(dy) * wp + dx;
  }
};

template <typename T>
void pad_into(const Tensor<T>& in, const PadLayout& L, std::vector<T>& buf) {
  const Grid3& g = in.grid();
  buf.assign(std::size_t(in.channels()) * L.total, T(0));
  for (int c = 0; c < in.channels(); ++c) {
    T* dst = buf.data() + std::size_t(c) * L.total;
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y) {
        const T* src = &in.at(c, z, y, 0);
        std::copy(src, src + g.w, dst + L.at(z + 1, y + 1, 1));
      }
  }
}

// Column index inside an im2col matrix for the stride-2 path.
template <typename T>
void im2col_s2(const Tensor<T>& in, const Grid3& og, RowMat<T>& col) {
  const Grid3& g = in.grid();
  const int cin = in.channels();
  col.setZero(std::size_t(27) * cin, og.voxels());
  for (int k = 0; k < 27; ++k) {
    const int dz = k / 9 - 1, dy = (k / 3) % 3 - 1, dx = k % 3 - 1;
    for (int c = 0; c < cin; ++c) {
      T* row = col.data() + (std::size_t(k) * cin + c) * og.voxels();
      std::size_t o = 0;
      for (int z = 0; z < og.d; ++z) {
        const int iz = 2 * z + dz;
        for (int y = 0; y < og.h; ++y) {
          const int iy = 2 * y + dy;
          for (int x = 0; x < og.w; ++x, ++o) {
            const int ix = 2 * x + dx;
            if (iz < 0 || iy < 0 || ix < 0 || iz >= g.d || iy >= g.h || ix >= g.w) continue;
            row[o] = in.at(c, iz, iy, ix);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_s2(const RowMat<T>& col, const Grid3& og, Tensor<T>& din) {
  const Grid3& g = din.grid();
  const int cin = din.channels();
  for (int k = 0; k < 27; ++k) {
    const int dz = k / 9 - 1, dy = (k / 3) % 3 - 1, dx = k % 3 - 1;
    for (int c = 0; c < cin; ++c) {
      const T* row = col.data() + (std::size_t(k) * cin + c) * og.voxels();
      std::size_t o = 0;
      for (int z = 0; z < og.d; ++z) {
        const int iz = 2 * z + dz;
        for (int y = 0; y < og.h; ++y) {
          const int iy = 2 * y + dy;
          for (int x = 0; x < og.w; ++x, ++o) {
            const int ix = 2 * x + dx;
            if (iz < 0 || iy < 0 || ix < 0 || iz >= g.d || iy >= g.h || ix >= g.w) continue;
            din.at(c, iz, iy, ix) += row[o];
          }
        }
      }
    }
  }
}

// [taps][out][in] -> (out x taps*in), column index k*in + c.
template <typename T>
RowMat<T> flatten_weights(const Conv3d& conv, const T* w) {
  RowMat<T> m(conv.out_ch, std::size_t(conv.taps()) * conv.in_ch);
  for (int k = 0; k < conv.taps(); ++k)
    for (int o = 0; o < conv.out_ch; ++o)
      for (int c = 0; c < conv.in_ch; ++c)
        m(o, std::size_t(k) * conv.in_ch + c) = w[(std::size_t(k) * conv.out_ch + o) * conv.in_ch + c];
  return m;
}

}  // namespace

Grid3 Conv3d::out_grid(const Grid3& in) const {
  if (stride == 1) return in;
  return {(in.d + 1) / 2, (in.h + 1) / 2, (in.w + 1) / 2};
}

template <typename T>
void conv_forward(const Conv3d& conv, std::span<const T> params, const Tensor<T>& in, Tensor<T>& out) {
  if (in.channels() != conv.in_ch)
    throw ShapeError("conv expects " + std::to_string(conv.in_ch) + " input channels, got " +
                     std::to_string(in.channels()));
  const T* w = params.data() + conv.weight_offset;
  const T* b = params.data() + conv.bias_offset;
  const Grid3 og = conv.out_grid(in.grid());
  out = Tensor<T>(conv.out_ch, og);
  const std::size_t nv = og.voxels();

  if (conv.kernel == 1) {
    CMapMat<T> W(w, conv.out_ch, conv.in_ch);
    CMapMat<T> X(in.data(), conv.in_ch, nv);
    MapMat<T> Y(out.data(), conv.out_ch, nv);
    Y.noalias() = W * X;
  } else if (conv.stride == 1) {
    const PadLayout L(in.grid());
    std::vector<T> pad;
    pad_into(in, L, pad);
    RowMat<T> acc = RowMat<T>::Zero(conv.out_ch, L.length);
    CMapMat<T> X(pad.data(), conv.in_ch, L.total);
    for (int k = 0; k < 27; ++k) {
      CMapMat<T> Wk(w + std::size_t(k) * conv.out_ch * conv.in_ch, conv.out_ch, conv.in_ch);
      acc.noalias() += Wk * X.middleCols(std::ptrdiff_t(L.first) + L.tap_offset(k), L.length);
    }
    const Grid3& g = in.grid();
    for (int o = 0; o < conv.out_ch; ++o)
      for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y) {
          const T* src = acc.data() + std::size_t(o) * L.length + (L.at(z + 1, y + 1, 1) - L.first);
          std::copy(src, src + g.w, &out.at(o, z, y, 0));
        }
  } else {
    RowMat<T> col;
    im2col_s2(in, og, col);
    const RowMat<T> W = flatten_weights(conv, w);
    MapMat<T> Y(out.data(), conv.out_ch, nv);
    Y.noalias() = W * col;
  }
  for (int o = 0; o < conv.out_ch; ++o) {
    auto ch = out.channel(o);
    const T bo = b[o];
    for (auto& v : ch) v += bo;
  }
}

template <typename T>
void conv_backward(const Conv3d& conv, std::span<const T> params, const Tensor<T>& in,
                   const Tensor<T>& dout, Tensor<T>* din, std::span<T> grads) {
  const T* w = params.data() + conv.weight_offset;
  T* gw = grads.data() + conv.weight_offset;
  T* gb = grads.data() + conv.bias_offset;
  const Grid3 og = dout.grid();
  const std::size_t nv = og.voxels();

  for (int o = 0; o < conv.out_ch; ++o) {
    T s = 0;
    for (auto v : dout.channel(o)) s += v;
    gb[o] += s;
  }

  if (conv.kernel == 1) {
    CMapMat<T> W(w, conv.out_ch, conv.in_ch);
    CMapMat<T> X(in.data(), conv.in_ch, nv);
    CMapMat<T> dY(dout.data(), conv.out_ch, nv);
    MapMat<T> dW(gw, conv.out_ch, conv.in_ch);
    dW.noalias() += dY * X.transpose();
    if (din) {
      *din = Tensor<T>(conv.in_ch, in.grid());
      MapMat<T> dX(din->data(), conv.in_ch, nv);
      dX.noalias() = W.transpose() * dY;
    }
  } else if (conv.stride == 1) {
    const PadLayout L(in.grid());
    const Grid3& g = in.grid();
    std::vector<T> pad;
    pad_into(in, L, pad);
    RowMat<T> dacc = RowMat<T>::Zero(conv.out_ch, L.length);
    for (int o = 0; o < conv.out_ch; ++o)
      for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y) {
          const T* src = &dout.at(o, z, y, 0);
          std::copy(src, src + g.w, dacc.data() + std::size_t(o) * L.length + (L.at(z + 1, y + 1, 1) - L.first));
        }
    CMapMat<T> X(pad.data(), conv.in_ch, L.total);
    RowMat<T> dpad;
    if (din) dpad = RowMat<T>::Zero(conv.in_ch, L.total);
    for (int k = 0; k < 27; ++k) {
      const std::size_t ko = std::size_t(k) * conv.out_ch * conv.in_ch;
      const std::ptrdiff_t start = std::ptrdiff_t(L.first) + L.tap_offset(k);
      MapMat<T> dWk(gw + ko, conv.out_ch, conv.in_ch);
      dWk.noalias() += dacc * X.middleCols(start, L.length).transpose();
      if (din) {
        CMapMat<T> Wk(w + ko, conv.out_ch, conv.in_ch);
        dpad.middleCols(start, L.length).noalias() += Wk.transpose() * dacc;
      }
    }
    if (din) {
      *din = Tensor<T>(conv.in_ch, g);
      for (int c = 0; c < conv.in_ch; ++c)
        for (int z = 0; z < g.d; ++z)
          for (int y = 0; y < g.h; ++y) {
            const T* src = dpad.data() + std::size_t(c) * L.total + L.at(z + 1, y + 1, 1);
            std::copy(src, src + g.w, &din->at(c, z, y, 0));
          }
    }
  } else {
    RowMat<T> col;
    im2col_s2(in, og, col);
    const RowMat<T> W = flatten_weights(conv, w);
    CMapMat<T> dY(dout.data(), conv.out_ch, nv);
    const RowMat<T> dW = dY * col.transpose();
    for (int k = 0; k < 27; ++k)
      for (int o = 0; o < conv.out_ch; ++o)
        for (int c = 0; c < conv.in_ch; ++c)
          gw[(std::size_t(k) * conv.out_ch + o) * conv.in_ch + c] += dW(o, std::size_t(k) * conv.in_ch + c);
    if (din) {
      const RowMat<T> dcol = W.transpose() * dY;
      *din = Tensor<T>(conv.in_ch, in.grid());
      col2im_s2(dcol, og, *din);
    }
  }
}

template <typename T>
void conv_init(const Conv3d& conv, std::span<T> params, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(conv.in_ch * conv.taps()));
  for (std::size_t i = 0; i < conv.weight_count(); ++i)
    params[conv.weight_offset + i] = T(rng.uniform(-bound, bound));
  for (int o = 0; o < conv.out_ch; ++o) params[conv.bias_offset + o] = T(0);
}

template <typename T>
void linear_forward(const Linear& fc, std::span<const T> params, std::span<const T> in, std::span<T> out) {
  const T* w = params.data() + fc.weight_offset;
  const T* b = params.data() + fc.bias_offset;
  for (int o = 0; o < fc.out_features; ++o) {
    T s = b[o];
    for (int i = 0; i < fc.in_features; ++i) s += w[std::size_t(o) * fc.in_features + i] * in[i];
    out[o] = s;
  }
}

template <typename T>
void linear_backward(const Linear& fc, std::span<const T> params, std::span<const T> in,
                     std::span<const T> dout, std::span<T> din, std::span<T> grads) {
  const T* w = params.data() + fc.weight_offset;
  T* gw = grads.data() + fc.weight_offset;
  T* gb = grads.data() + fc.bias_offset;
  std::fill(din.begin(), din.end(), T(0));
  for (int o = 0; o < fc.out_features; ++o) {
    gb[o] += dout[o];
    for (int i = 0; i < fc.in_features; ++i) {
      gw[std::size_t(o) * fc.in_features + i] += dout[o] * in[i];
      din[i] += w[std::size_t(o) * fc.in_features + i] * dout[o];
    }
  }
}

template <typename T>
void linear_init(const Linear& fc, std::span<T> params, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fc.in_features));
  for (std::size_t i = 0; i < std::size_t(fc.in_features) * fc.out_features; ++i)
    params[fc.weight_offset + i] = T(rng.uniform(-bound, bound));
  for (int o = 0; o < fc.out_features; ++o) params[fc.bias_offset + o] = T(0);
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.vec()) v = v > T(0) ? v : T(0);
}

template <typename T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& dout) {
  const T* o = out.data();
  T* d = dout.data();
  for (std::size_t i = 0; i < dout.size(); ++i)
    if (!(o[i] > T(0))) d[i] = T(0);
}

template <typename T>
Tensor<T> dropout_mask(int channels, const Grid3& grid, double rate, Rng& rng) {
  Tensor<T> m(channels, grid);
  const T keep = T(1.0 / (1.0 - rate));
  for (auto& v : m.vec()) v = rng.uniform() < rate ? T(0) : keep;
  return m;
}

template <typename T>
void multiply_inplace(Tensor<T>& t, const Tensor<T>& mask) {
  T* a = t.data();
  const T* m = mask.data();
  for (std::size_t i = 0; i < t.size(); ++i) a[i] *= m[i];
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& in, const Grid3& target) {
  Tensor<T> out(in.channels(), target);
  for (int c = 0; c < in.channels(); ++c)
    for (int z = 0; z < target.d; ++z)
      for (int y = 0; y < target.h; ++y) {
        T* dst = &out.at(c, z, y, 0);
        const T* src = &in.at(c, z / 2, y / 2, 0);
        for (int x = 0; x < target.w; ++x) dst[x] = src[x / 2];
      }
  return out;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dout, const Grid3& in_grid) {
  Tensor<T> din(dout.channels(), in_grid);
  const Grid3& g = dout.grid();
  for (int c = 0; c < dout.channels(); ++c)
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y) {
        const T* src = &dout.at(c, z, y, 0);
        T* dst = &din.at(c, z / 2, y / 2, 0);
        for (int x = 0; x < g.w; ++x) dst[x / 2] += src[x];
      }
  return din;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.grid() == b.grid())) throw ShapeError("concat grid mismatch");
  Tensor<T> out(a.channels() + b.channels(), a.grid());
  std::copy(a.vec().begin(), a.vec().end(), out.vec().begin());
  std::copy(b.vec().begin(), b.vec().end(), out.vec().begin() + std::ptrdiff_t(a.size()));
  return out;
}

template <typename T>
void split(const Tensor<T>& d, int a_channels, Tensor<T>& da, Tensor<T>& db) {
  da = Tensor<T>(a_channels, d.grid());
  db = Tensor<T>(d.channels() - a_channels, d.grid());
  std::copy(d.vec().begin(), d.vec().begin() + std::ptrdiff_t(da.size()), da.vec().begin());
  std::copy(d.vec().begin() + std::ptrdiff_t(da.size()), d.vec().end(), db.vec().begin());
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  Tensor<T> p(logits.channels(), logits.grid());
  const std::size_t nv = logits.voxels();
  const int nc = logits.channels();
  const T* z = logits.data();
  T* out = p.data();
  for (std::size_t v = 0; v < nv; ++v) {
    T m = z[v];
    for (int c = 1; c < nc; ++c) m = std::max(m, z[std::size_t(c) * nv + v]);
    T s = 0;
    for (int c = 0; c < nc; ++c) {
      const T e = std::exp(z[std::size_t(c) * nv + v] - m);
      out[std::size_t(c) * nv + v] = e;
      s += e;
    }
    const T inv = T(1) / s;
    for (int c = 0; c < nc; ++c) out[std::size_t(c) * nv + v] *= inv;
  }
  return p;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  Tensor<T> dz(probs.channels(), probs.grid());
  const std::size_t nv = probs.voxels();
  const int nc = probs.channels();
  const T* p = probs.data();
  const T* dp = dprobs.data();
  T* out = dz.data();
  for (std::size_t v = 0; v < nv; ++v) {
    T dot = 0;
    for (int c = 0; c < nc; ++c) dot += p[std::size_t(c) * nv + v] * dp[std::size_t(c) * nv + v];
    for (int c = 0; c < nc; ++c) {
      const std::size_t i = std::size_t(c) * nv + v;
      out[i] = p[i] * (dp[i] - dot);
    }
  }
  return dz;
}

#define TRIADPI_INSTANTIATE_LAYERS(T)                                                               \
  template void conv_forward<T>(const Conv3d&, std::span<const T>, const Tensor<T>&, Tensor<T>&);   \
  template void conv_backward<T>(const Conv3d&, std::span<const T>, const Tensor<T>&,               \
                                 const Tensor<T>&, Tensor<T>*, std::span<T>);                       \
  template void conv_init<T>(const Conv3d&, std::span<T>, Rng&);                                    \
  template void linear_forward<T>(const Linear&, std::span<const T>, std::span<const T>,            \
                                  std::span<T>);                                                    \
  template void linear_backward<T>(const Linear&, std::span<const T>, std::span<const T>,           \
                                   std::span<const T>, std::span<T>, std::span<T>);                 \
  template void linear_init<T>(const Linear&, std::span<T>, Rng&);                                  \
  template void relu_inplace<T>(Tensor<T>&);                                                        \
  template void relu_backward_inplace<T>(const Tensor<T>&, Tensor<T>&);                             \
  template Tensor<T> dropout_mask<T>(int, const Grid3&, double, Rng&);                              \
  template void multiply_inplace<T>(Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> upsample2<T>(const Tensor<T>&, const Grid3&);                                  \
  template Tensor<T> upsample2_backward<T>(const Tensor<T>&, const Grid3&);                         \
  template Tensor<T> concat<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template void split<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);                            \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                  \
  template Tensor<T> softmax_backward<T>(const Tensor<T>&, const Tensor<T>&);

TRIADPI_INSTANTIATE_LAYERS(float)
TRIADPI_INSTANTIATE_LAYERS(double)

}  // namespace triadpi::layers
