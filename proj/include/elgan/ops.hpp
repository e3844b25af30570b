#pragma once

#include "elgan/conv_kernels.hpp"
#include "elgan/graph.hpp"
#include "elgan/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace elgan::ops {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
void correlate(const Tensor<Scalar>& src, const Scalar* w, Index cout, Index k, Tensor<Scalar>& out, bool accumulate) {
  switch (k) {
    case 1: {
      // Pointwise: a plain (cout x cin) * (cin x pixels) product per sample.
      const Eigen::Map<const RowMatrix<Scalar>> wm(w, cout, src.shape().c);
      for (Index n = 0; n < src.shape().n; ++n) {
        if (accumulate)
          out.sample(n).noalias() += wm * src.sample(n);
        else
          out.sample(n).noalias() = wm * src.sample(n);
      }
      return;
    }
    case 3:
      correlate_direct<Scalar, 3>(src, w, cout, out, accumulate);
      return;
    default:
      throw ShapeError("conv2d: unsupported kernel size " + std::to_string(k));
  }
}

template <typename Scalar>
void weight_grad(const Tensor<Scalar>& src, const Tensor<Scalar>& grad, Index k, Scalar* dw) {
  if (k == 1) {
    Eigen::Map<RowMatrix<Scalar>> dwm(dw, grad.shape().c, src.shape().c);
    for (Index n = 0; n < src.shape().n; ++n) dwm.noalias() += grad.sample(n) * src.sample(n).transpose();
  } else {
    weight_grad_direct<Scalar, 3>(src, grad, dw);
  }
}

}  // namespace detail


/// Same-padded, stride-1 2-D convolution. Weight shape is (Cout, Cin, k, k), k in {1, 3}.
/// When `track` is false the parameters act as constants: gradients still flow to
/// `x` but nothing is accumulated into `weight.grad` / `bias.grad`.
template <typename Scalar>
Var conv2d(Graph<Scalar>& g, Var x, Parameter<Scalar>& weight, Parameter<Scalar>& bias, bool track) {
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const Shape in = g.value(x).shape();
  const Shape ws = weight.value.shape();
  if (ws.c != in.c)
    throw ShapeError("conv2d '" + weight.name + "': expects " + std::to_string(ws.c) + " input channels, got " +
                     std::to_string(in.c));
  const Index k = ws.h;
  const Index cout = ws.n;

  Tensor<Scalar> out(Shape{in.n, cout, in.h, in.w});
  detail::correlate(g.value(x), weight.value.data(), cout, k, out, false);
  const Eigen::Map<const Vec> bv(bias.value.data(), cout);
  for (Index n = 0; n < in.n; ++n) out.sample(n).colwise() += bv;

  const bool needs = g.requires_grad(x) || track;
  return g.emit(std::move(out), needs, [x, &weight, &bias, track, k, cout, in](Graph<Scalar>& g, Var self) {
    const Tensor<Scalar>& go = g.grad(self);
    if (track) {
      Eigen::Map<Vec> db(bias.grad.data(), cout);
      for (Index n = 0; n < in.n; ++n) db += go.sample(n).rowwise().sum();
      detail::weight_grad(g.value(x), go, k, weight.grad.data());
    }
    if (g.requires_grad(x)) {
      // d/dx correlates the output gradient with the spatially flipped,
      // channel-transposed kernel.
      std::vector<Scalar> flipped(static_cast<std::size_t>(in.c * cout * k * k));
      const Scalar* w = weight.value.data();
      for (Index o = 0; o < cout; ++o)
        for (Index c = 0; c < in.c; ++c)
          for (Index t = 0; t < k * k; ++t) flipped[(c * cout + o) * k * k + (k * k - 1 - t)] = w[(o * in.c + c) * k * k + t];
      detail::correlate(go, flipped.data(), in.c, k, g.grad(x), true);
    }
  });
}

template <typename Scalar>
Var relu(Graph<Scalar>& g, Var x) {
  Tensor<Scalar> out(g.value(x).shape());
  out.array() = g.value(x).array().max(Scalar(0));
  return g.emit(std::move(out), g.requires_grad(x), [x](Graph<Scalar>& g, Var self) {
    g.grad(x).array() += (g.value(self).array() > Scalar(0)).select(g.grad(self).array(), Scalar(0));
  });
}

/// ELU with alpha = 1 (continuously differentiable at 0).
template <typename Scalar>
Var elu(Graph<Scalar>& g, Var x) {
  Tensor<Scalar> out(g.value(x).shape());
  const auto& xa = g.value(x).array();
  out.array() = (xa > Scalar(0)).select(xa, xa.exp() - Scalar(1));
  return g.emit(std::move(out), g.requires_grad(x), [x](Graph<Scalar>& g, Var self) {
    const auto& ya = g.value(self).array();
    const auto& xa = g.value(x).array();
    g.grad(x).array() += g.grad(self).array() * (xa > Scalar(0)).select(Scalar(1), ya + Scalar(1));
  });
}

template <typename Scalar>
Var sigmoid(Graph<Scalar>& g, Var x) {
  Tensor<Scalar> out(g.value(x).shape());
  out.array() = Scalar(1) / (Scalar(1) + (-g.value(x).array()).exp());
  return g.emit(std::move(out), g.requires_grad(x), [x](Graph<Scalar>& g, Var self) {
    const auto& s = g.value(self).array();
    g.grad(x).array() += g.grad(self).array() * s * (Scalar(1) - s);
  });
}

/// Softmax across channels at every pixel.
template <typename Scalar>
Var softmax_channels(Graph<Scalar>& g, Var x) {
  const Shape s = g.value(x).shape();
  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    auto z = g.value(x).sample(n);
    auto o = out.sample(n);
    const auto peak = z.colwise().maxCoeff();
    o = (z.rowwise() - peak).array().exp().matrix();
    const auto denom = o.colwise().sum().eval();
    o.array().rowwise() /= denom.array();
  }
  return g.emit(std::move(out), g.requires_grad(x), [x, s](Graph<Scalar>& g, Var self) {
    for (Index n = 0; n < s.n; ++n) {
      auto y = g.value(self).sample(n);
      auto gy = g.grad(self).sample(n);
      const auto dot = y.cwiseProduct(gy).colwise().sum().eval();
      g.grad(x).sample(n).array() += y.array() * (gy.rowwise() - dot).array();
    }
  });
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
template <typename Scalar>
Var avg_pool2(Graph<Scalar>& g, Var x) {
  const Shape s = g.value(x).shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avg_pool2: odd spatial size " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<Scalar> out(os);
  const Tensor<Scalar>& xv = g.value(x);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = xv.plane_ptr(n, c);
      Scalar* dst = out.plane_ptr(n, c);
      for (Index y = 0; y < os.h; ++y)
        for (Index xx = 0; xx < os.w; ++xx) {
          const Scalar* p = src + 2 * y * s.w + 2 * xx;
          dst[y * os.w + xx] = Scalar(0.25) * (p[0] + p[1] + p[s.w] + p[s.w + 1]);
        }
    }
  return g.emit(std::move(out), g.requires_grad(x), [x, s, os](Graph<Scalar>& g, Var self) {
    const Tensor<Scalar>& go = g.grad(self);
    Tensor<Scalar>& gx = g.grad(x);
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c) {
        const Scalar* src = go.plane_ptr(n, c);
        Scalar* dst = gx.plane_ptr(n, c);
        for (Index y = 0; y < os.h; ++y)
          for (Index xx = 0; xx < os.w; ++xx) {
            const Scalar v = Scalar(0.25) * src[y * os.w + xx];
            Scalar* p = dst + 2 * y * s.w + 2 * xx;
            p[0] += v;
            p[1] += v;
            p[s.w] += v;
            p[s.w + 1] += v;
          }
      }
  });
}

/// 2x nearest-neighbour upsampling.
template <typename Scalar>
Var upsample2(Graph<Scalar>& g, Var x) {
  const Shape s = g.value(x).shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  Tensor<Scalar> out(os);
  const Tensor<Scalar>& xv = g.value(x);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const Scalar* src = xv.plane_ptr(n, c);
      Scalar* dst = out.plane_ptr(n, c);
      for (Index y = 0; y < os.h; ++y)
        for (Index xx = 0; xx < os.w; ++xx) dst[y * os.w + xx] = src[(y / 2) * s.w + xx / 2];
    }
  return g.emit(std::move(out), g.requires_grad(x), [x, s, os](Graph<Scalar>& g, Var self) {
    const Tensor<Scalar>& go = g.grad(self);
    Tensor<Scalar>& gx = g.grad(x);
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c) {
        const Scalar* src = go.plane_ptr(n, c);
        Scalar* dst = gx.plane_ptr(n, c);
        for (Index y = 0; y < os.h; ++y)
          for (Index xx = 0; xx < os.w; ++xx) dst[(y / 2) * s.w + xx / 2] += src[y * os.w + xx];
      }
  });
}

/// Channel-wise concatenation; all parts must share (n, h, w).
template <typename Scalar>
Var concat(Graph<Scalar>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape first = g.value(parts.front()).shape();
  Shape os = first;
  os.c = 0;
  bool needs = false;
  for (Var p : parts) {
    const Shape s = g.value(p).shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeError("concat: spatial mismatch " + first.str() + " vs " + s.str());
    os.c += s.c;
    needs = needs || g.requires_grad(p);
  }
  Tensor<Scalar> out(os);
  for (Index n = 0; n < os.n; ++n) {
    Index c0 = 0;
    for (Var p : parts) {
      const Tensor<Scalar>& v = g.value(p);
      std::memcpy(out.plane_ptr(n, c0), v.plane_ptr(n, 0), sizeof(Scalar) * v.shape().sample());
      c0 += v.shape().c;
    }
  }
  return g.emit(std::move(out), needs, [parts, os](Graph<Scalar>& g, Var self) {
    for (Index n = 0; n < os.n; ++n) {
      Index c0 = 0;
      for (Var p : parts) {
        const Index count = g.value(p).shape().sample();
        if (g.requires_grad(p)) {
          Eigen::Map<typename Tensor<Scalar>::Array> dst(g.grad(p).plane_ptr(n, 0), count);
          dst += Eigen::Map<const typename Tensor<Scalar>::Array>(g.grad(self).plane_ptr(n, c0), count);
        }
        c0 += g.value(p).shape().c;
      }
    }
  });
}

/// Inverted dropout: keeps each element with probability 1 - rate and rescales.
/// The mask is a pure function of `seed`.
template <typename Scalar>
Var dropout(Graph<Scalar>& g, Var x, double rate, std::uint64_t seed) {
  if (rate <= 0.0) return x;
  const Shape s = g.value(x).shape();
  Tensor<Scalar> mask(s);
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  // Counter-based draws: element i keeps iff mix64(seed + i) / 2^64 >= rate.
  const auto cut = static_cast<std::uint64_t>(std::ldexp(rate, 64));  // rate < 1
  const std::uint64_t base = mix64(seed);
  for (Index i = 0; i < s.size(); ++i)
    mask.data()[i] = mix64(base + static_cast<std::uint64_t>(i)) < cut ? Scalar(0) : keep_scale;
  Tensor<Scalar> out(s);
  out.array() = g.value(x).array() * mask.array();
  return g.emit(std::move(out), g.requires_grad(x), [x, mask = std::move(mask)](Graph<Scalar>& g, Var self) {
    g.grad(x).array() += g.grad(self).array() * mask.array();
  });
}

/// a + scale * b for scalar (size-1) nodes.
template <typename Scalar>
Var add_scaled(Graph<Scalar>& g, Var a, Var b, Scalar scale) {
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data()[0] = g.scalar(a) + scale * g.scalar(b);
  return g.emit(std::move(out), g.requires_grad(a) || g.requires_grad(b), [a, b, scale](Graph<Scalar>& g, Var self) {
    const Scalar d = g.grad(self).data()[0];
    if (g.requires_grad(a)) g.grad(a).data()[0] += d;
    if (g.requires_grad(b)) g.grad(b).data()[0] += scale * d;
  });
}

template <typename Scalar>
Var scale(Graph<Scalar>& g, Var a, Scalar factor) {
  Tensor<Scalar> out(g.value(a).shape());
  out.array() = factor * g.value(a).array();
  return g.emit(std::move(out), g.requires_grad(a), [a, factor](Graph<Scalar>& g, Var self) {
    g.grad(a).array() += factor * g.grad(self).array();
  });
}

}  // namespace elgan::ops
