#pragma once

#include "elgan/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace elgan::ops::detail {

// Direct same-padded correlation kernels. Output channels are processed in
// blocks of kOutBlock and pixels in strips of kStrip so that one block of
// accumulators stays in registers while the input strip is streamed.
inline constexpr Index kOutBlock = 8;
inline constexpr Index kStrip = 16;

inline Index round_up(Index v, Index m) { return (v + m - 1) / m * m; }

/// Zero-padded copy of one sample: (C, H + 2p, round_up(W, kStrip) + 2p).
template <typename Scalar>
struct PaddedSample {
  Index channels = 0, h = 0, w = 0, pad = 0, rows = 0, stride = 0;
  std::vector<Scalar> data;

  void load(const Tensor<Scalar>& t, Index n, Index p) {
    const Shape& s = t.shape();
    channels = s.c;
    h = s.h;
    w = s.w;
    pad = p;
    rows = h + 2 * p;
    stride = round_up(w, kStrip) + 2 * p;
    data.resize(static_cast<std::size_t>(channels * rows * stride));
    const Index tail = stride - p - w;
    for (Index c = 0; c < channels; ++c) {
      const Scalar* src = t.plane_ptr(n, c);
      for (Index y = 0; y < p; ++y) {
        std::fill_n(row(c, y), stride, Scalar(0));
        std::fill_n(row(c, rows - 1 - y), stride, Scalar(0));
      }
      for (Index y = 0; y < h; ++y) {
        Scalar* dst = row(c, y + p);
        std::fill_n(dst, p, Scalar(0));
        std::memcpy(dst + p, src + y * w, sizeof(Scalar) * w);
        std::fill_n(dst + p + w, tail, Scalar(0));
      }
    }
  }

  Scalar* row(Index c, Index padded_y) { return data.data() + (c * rows + padded_y) * stride; }
  const Scalar* row(Index c, Index padded_y) const { return data.data() + (c * rows + padded_y) * stride; }
};

/// Repacks (Cout, Cin, K, K) weights as [block][cin][ky][kx][kOutBlock], zero-filled.
template <typename Scalar>
std::vector<Scalar> pack_kernel(const Scalar* w, Index cout, Index cin, Index k) {
  const Index blocks = round_up(cout, kOutBlock) / kOutBlock;
  std::vector<Scalar> packed(static_cast<std::size_t>(blocks * cin * k * k * kOutBlock), Scalar(0));
  for (Index o = 0; o < cout; ++o)
    for (Index c = 0; c < cin; ++c)
      for (Index t = 0; t < k * k; ++t)
        packed[static_cast<std::size_t>((((o / kOutBlock) * cin + c) * k * k + t) * kOutBlock + o % kOutBlock)] =
            w[(o * cin + c) * k * k + t];
  return packed;
}

/// 64-byte SIMD register type (GCC/Clang vector extension).
template <typename Scalar>
struct Simd {
  typedef Scalar type __attribute__((vector_size(64)));
  static constexpr Index lanes = Index(64 / sizeof(Scalar));
  static constexpr Index per_strip = kStrip / lanes;

  static type load(const Scalar* p) {
    type v;
    std::memcpy(&v, p, sizeof(type));
    return v;
  }
  static void store(Scalar* p, const type& v) { std::memcpy(p, &v, sizeof(type)); }
};

template <typename Scalar, int K>
inline void correlate_strip(const PaddedSample<Scalar>& src, const Scalar* wblock, Index y, Index x0,
                            Scalar (&out)[kOutBlock][kStrip]) {
  using S = Simd<Scalar>;
  using V = typename S::type;
  constexpr Index NV = S::per_strip;
  V acc[kOutBlock][NV] = {};
  for (Index c = 0; c < src.channels; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      const Scalar* row = src.row(c, y + ky) + x0;
      for (int kx = 0; kx < K; ++kx) {
        const Scalar* wv = wblock + ((c * K + ky) * K + kx) * kOutBlock;
        V sv[NV];
#pragma GCC unroll 4
        for (Index v = 0; v < NV; ++v) sv[v] = S::load(row + kx + v * S::lanes);
#pragma GCC unroll 8
        for (Index o = 0; o < kOutBlock; ++o) {
          const Scalar wo = wv[o];
#pragma GCC unroll 4
          for (Index v = 0; v < NV; ++v) acc[o][v] += sv[v] * wo;
        }
      }
    }
  }
  for (Index o = 0; o < kOutBlock; ++o)
    for (Index v = 0; v < NV; ++v) S::store(&out[o][v * S::lanes], acc[o][v]);
}

/// out (=|+=) correlate(src, w) with w shaped (Cout, Cin, K, K), same padding.
template <typename Scalar, int K>
void correlate_direct(const Tensor<Scalar>& src, const Scalar* w, Index cout, Tensor<Scalar>& out, bool accumulate) {
  const Shape s = src.shape();
  const std::vector<Scalar> packed = pack_kernel(w, cout, s.c, K);
  const Index blocks = round_up(cout, kOutBlock) / kOutBlock;
  PaddedSample<Scalar> pad;
  alignas(64) Scalar acc[kOutBlock][kStrip];
  for (Index n = 0; n < s.n; ++n) {
    pad.load(src, n, K / 2);
    for (Index b = 0; b < blocks; ++b) {
      const Scalar* wblock = packed.data() + b * s.c * K * K * kOutBlock;
      const Index olim = std::min(kOutBlock, cout - b * kOutBlock);
      for (Index y = 0; y < s.h; ++y) {
        for (Index x0 = 0; x0 < s.w; x0 += kStrip) {
          correlate_strip<Scalar, K>(pad, wblock, y, x0, acc);
          const Index jlim = std::min(kStrip, s.w - x0);
          for (Index o = 0; o < olim; ++o) {
            Scalar* dst = out.plane_ptr(n, b * kOutBlock + o) + y * s.w + x0;
            if (accumulate)
              for (Index j = 0; j < jlim; ++j) dst[j] += acc[o][j];
            else
              for (Index j = 0; j < jlim; ++j) dst[j] = acc[o][j];
          }
        }
      }
    }
  }
}

/// dw[o][c][ky][kx] += sum_p grad[o](p) * src[c](p + (ky, kx) - pad).
///
/// Groups of G output channels keep all K*K taps in registers while one pass
/// streams the gradient planes and the padded input plane.
template <typename Scalar, int K>
void weight_grad_direct(const Tensor<Scalar>& src, const Tensor<Scalar>& grad, Scalar* dw) {
  using S = Simd<Scalar>;
  using V = typename S::type;
  constexpr Index NV = S::per_strip;
  constexpr int T = K * K;
  constexpr Index G = K == 1 ? 8 : 2;
  const Shape s = src.shape();
  const Index cout = grad.shape().c;
  const Index groups = round_up(cout, G) / G;
  const Index width = round_up(s.w, kStrip);
  PaddedSample<Scalar> pad;
  std::vector<Scalar> gbuf;
  for (Index n = 0; n < s.n; ++n) {
    pad.load(src, n, K / 2);
    // gbuf layout: [o][y][x], x zero-padded to `width`, o zero-padded to the group size.
    gbuf.resize(static_cast<std::size_t>(groups * G * s.h * width));
    for (Index o = 0; o < groups * G; ++o)
      for (Index y = 0; y < s.h; ++y) {
        Scalar* dst = gbuf.data() + (o * s.h + y) * width;
        if (o < cout) {
          std::memcpy(dst, grad.plane_ptr(n, o) + y * s.w, sizeof(Scalar) * s.w);
          std::fill_n(dst + s.w, width - s.w, Scalar(0));
        } else {
          std::fill_n(dst, width, Scalar(0));
        }
      }
    for (Index ob = 0; ob < cout; ob += G) {
      for (Index c = 0; c < s.c; ++c) {
        V acc[G][T][NV] = {};
        for (Index y = 0; y < s.h; ++y) {
          const Scalar* grow = gbuf.data() + (ob * s.h + y) * width;
          for (Index x0 = 0; x0 < width; x0 += kStrip) {
#pragma GCC unroll 4
            for (Index v = 0; v < NV; ++v) {
              V gv[G];
#pragma GCC unroll 8
              for (Index o = 0; o < G; ++o) gv[o] = S::load(grow + o * s.h * width + x0 + v * S::lanes);
#pragma GCC unroll 3
              for (int ky = 0; ky < K; ++ky) {
                const Scalar* row = pad.row(c, y + ky) + x0 + v * S::lanes;
#pragma GCC unroll 3
                for (int kx = 0; kx < K; ++kx) {
                  const V sv = S::load(row + kx);
#pragma GCC unroll 8
                  for (Index o = 0; o < G; ++o) acc[o][ky * K + kx][v] += gv[o] * sv;
                }
              }
            }
          }
        }
        const Index olim = std::min(G, cout - ob);
        for (Index o = 0; o < olim; ++o)
          for (int t = 0; t < T; ++t) {
            Scalar total = Scalar(0);
            for (Index v = 0; v < NV; ++v)
              for (Index l = 0; l < S::lanes; ++l) total += acc[o][t][v][l];
            dw[((ob + o) * s.c + c) * T + t] += total;
          }
      }
    }
  }
}

}  // namespace elgan::ops::detail
