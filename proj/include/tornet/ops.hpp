#pragma once

// Differentiable operations on [batch, channel, frequency, time] feature maps
// and the few flat-tensor ops the classifier head needs. Every op validates
// its shapes, records one tape node and supplies the matching backward.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <string>
#include <vector>

#include "tornet/autodiff.hpp"
#include "tornet/errors.hpp"
#include "tornet/rng.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

enum class Mode { train, eval };
enum class DropoutStyle { elementwise, channel };

struct Conv2dOptions {
  Index2 stride{1, 1};
  Index2 padding{0, 0};
  Index groups = 1;
};

/// Exponential-moving-average statistics kept by batch-norm style layers.
template <typename Scalar>
struct RunningStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
  double momentum = 0.1;

  explicit RunningStats(Index n) : mean(Shape{n}, Scalar(0)), var(Shape{n}, Scalar(1)) {}
};

inline Index conv_out_size(Index in, Index kernel, Index stride, Index pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

template <typename Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapMat = Eigen::Map<MatRM<Scalar>>;
template <typename Scalar>
using MapConstMat = Eigen::Map<const MatRM<Scalar>>;
template <typename Scalar>
using MapVec = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using MapConstVec = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

struct ConvGeometry {
  Index n, cin, f, t;
  Index cout, kf, kt;
  Index sf, st, pf, pt;
  Index groups;
  Index fo, to;

  Index cin_g() const { return cin / groups; }
  Index cout_g() const { return cout / groups; }
  Index patch() const { return cin_g() * kf * kt; }
  Index out_plane() const { return fo * to; }
  bool depthwise() const { return groups == cin && groups == cout; }
  bool pointwise() const { return kf == 1 && kt == 1 && sf == 1 && st == 1 && pf == 0 && pt == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Shape& b, const Conv2dOptions& opt) {
  auto dims = [](const Shape& s) { return to_string(s); };
  if (x.size() != 4) throw ConfigError("conv2d: input must be [N,C,F,T], got " + dims(x));
  if (w.size() != 4) throw ConfigError("conv2d: weight must be [Cout,Cin/g,kF,kT], got " + dims(w));
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3],
                 opt.stride.f, opt.stride.t, opt.padding.f, opt.padding.t, opt.groups, 0, 0};
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw ConfigError("conv2d: channels Cin=" + std::to_string(g.cin) + ", Cout=" + std::to_string(g.cout) +
                      " not divisible by groups=" + std::to_string(g.groups));
  }
  if (w[1] != g.cin / g.groups) {
    throw ConfigError("conv2d: weight " + dims(w) + " expects " + std::to_string(w[1] * g.groups) +
                      " input channels, input has " + std::to_string(g.cin));
  }
  if (b.size() != 1 || b[0] != g.cout) {
    throw ConfigError("conv2d: bias must be [" + std::to_string(g.cout) + "], got " + dims(b));
  }
  if (g.sf < 1 || g.st < 1 || g.pf < 0 || g.pt < 0) throw ConfigError("conv2d: invalid stride/padding");
  if (g.kf > g.f + 2 * g.pf || g.kt > g.t + 2 * g.pt) {
    throw ConfigError("conv2d: kernel " + std::to_string(g.kf) + "x" + std::to_string(g.kt) +
                      " does not fit padded input " + std::to_string(g.f + 2 * g.pf) + "x" +
                      std::to_string(g.t + 2 * g.pt));
  }
  g.fo = conv_out_size(g.f, g.kf, g.sf, g.pf);
  g.to = conv_out_size(g.t, g.kt, g.st, g.pt);
  return g;
}

/// Output positions `to` whose input column to*st - pt + kt lies inside [0, t).
inline std::pair<Index, Index> valid_out_range(Index t, Index to, Index st, Index pt, Index k) {
  Index lo = 0;
  while (lo < to && lo * st - pt + k < 0) ++lo;
  Index hi = to;
  while (hi > lo && (hi - 1) * st - pt + k >= t) --hi;
  return {lo, hi};
}

/// Unfolds one group of one image into a [Cin_g*kF*kT, Fo*To] patch matrix.
template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* col) {
  using Row = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using Strided = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
  const Index plane = g.out_plane();
  for (Index kt = 0; kt < g.kt; ++kt) {
    const auto [lo, hi] = valid_out_range(g.t, g.to, g.st, g.pt, kt);
    for (Index ci = 0; ci < g.cin_g(); ++ci) {
      const Scalar* xc = x + ci * g.f * g.t;
      for (Index kf = 0; kf < g.kf; ++kf) {
        Scalar* dst = col + ((ci * g.kf + kf) * g.kt + kt) * plane;
        for (Index fo = 0; fo < g.fo; ++fo) {
          const Index fi = fo * g.sf - g.pf + kf;
          Scalar* row = dst + fo * g.to;
          if (fi < 0 || fi >= g.f || lo >= hi) {
            std::fill(row, row + g.to, Scalar(0));
            continue;
          }
          std::fill(row, row + lo, Scalar(0));
          std::fill(row + hi, row + g.to, Scalar(0));
          Row(row + lo, hi - lo) =
              Strided(xc + fi * g.t + lo * g.st - g.pt + kt, hi - lo, Eigen::InnerStride<>(g.st));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters patch gradients back onto the image.
template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, Scalar* dx) {
  using ConstRow = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using Strided = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
  const Index plane = g.out_plane();
  for (Index kt = 0; kt < g.kt; ++kt) {
    const auto [lo, hi] = valid_out_range(g.t, g.to, g.st, g.pt, kt);
    if (lo >= hi) continue;
    for (Index ci = 0; ci < g.cin_g(); ++ci) {
      Scalar* dxc = dx + ci * g.f * g.t;
      for (Index kf = 0; kf < g.kf; ++kf) {
        const Scalar* src = col + ((ci * g.kf + kf) * g.kt + kt) * plane;
        for (Index fo = 0; fo < g.fo; ++fo) {
          const Index fi = fo * g.sf - g.pf + kf;
          if (fi < 0 || fi >= g.f) continue;
          Strided(dxc + fi * g.t + lo * g.st - g.pt + kt, hi - lo, Eigen::InnerStride<>(g.st)) +=
              ConstRow(src + fo * g.to + lo, hi - lo);
        }
      }
    }
  }
}

/// Visits every (output row, input row, tap) triple of a depthwise kernel as a
/// contiguous run of outputs [lo, hi) paired with strided inputs.
template <typename Fn>
void depthwise_runs(const ConvGeometry& g, Fn&& fn) {
  for (Index fo = 0; fo < g.fo; ++fo) {
    for (Index kf = 0; kf < g.kf; ++kf) {
      const Index fi = fo * g.sf - g.pf + kf;
      if (fi < 0 || fi >= g.f) continue;
      for (Index kt = 0; kt < g.kt; ++kt) {
        const auto [lo, hi] = valid_out_range(g.t, g.to, g.st, g.pt, kt);
        if (lo < hi) fn(fo, fi, kf * g.kt + kt, lo, hi, lo * g.st - g.pt + kt);
      }
    }
  }
}

template <typename Scalar>
void depthwise_forward(const Scalar* x, const Scalar* w, const Scalar* b, const ConvGeometry& g, Scalar* y) {
  using Row = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using Strided = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
  for (Index n = 0; n < g.n; ++n) {
    for (Index c = 0; c < g.cin; ++c) {
      const Scalar* xc = x + (n * g.cin + c) * g.f * g.t;
      const Scalar* wc = w + c * g.kf * g.kt;
      Scalar* yc = y + (n * g.cout + c) * g.out_plane();
      Row(yc, g.out_plane()).setConstant(b[c]);
      depthwise_runs(g, [&](Index fo, Index fi, Index tap, Index lo, Index hi, Index ti) {
        Row(yc + fo * g.to + lo, hi - lo) += wc[tap] * Strided(xc + fi * g.t + ti, hi - lo, Eigen::InnerStride<>(g.st));
      });
    }
  }
}

template <typename Scalar>
void depthwise_backward(const Scalar* x, const Scalar* w, const Scalar* dy, const ConvGeometry& g, Scalar* dx,
                        Scalar* dw) {
  using ConstRow = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using Strided = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
  using ConstStrided = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
  for (Index n = 0; n < g.n; ++n) {
    for (Index c = 0; c < g.cin; ++c) {
      const Scalar* xc = x + (n * g.cin + c) * g.f * g.t;
      const Scalar* wc = w + c * g.kf * g.kt;
      const Scalar* dyc = dy + (n * g.cout + c) * g.out_plane();
      Scalar* dxc = dx ? dx + (n * g.cin + c) * g.f * g.t : nullptr;
      Scalar* dwc = dw ? dw + c * g.kf * g.kt : nullptr;
      depthwise_runs(g, [&](Index fo, Index fi, Index tap, Index lo, Index hi, Index ti) {
        ConstRow d(dyc + fo * g.to + lo, hi - lo);
        const Eigen::InnerStride<> stride(g.st);
        if (dxc) Strided(dxc + fi * g.t + ti, hi - lo, stride) += wc[tap] * d;
        if (dwc) dwc[tap] += (ConstStrided(xc + fi * g.t + ti, hi - lo, stride) * d).sum();
      });
    }
  }
}

}  // namespace detail

/// Cross-correlation (no kernel flip) with zero padding and channel groups.
template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b,
                              const Conv2dOptions& opt) {
  using namespace detail;
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), b.shape(), opt);
  Tensor<Scalar> y(Shape{g.n, g.cout, g.fo, g.to});
  if (g.depthwise()) {
    depthwise_forward(x.data(), w.data(), b.data(), g, y.data());
    return y;
  }
  const Index plane = g.out_plane();
  std::vector<Scalar> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.patch() * plane));
  for (Index n = 0; n < g.n; ++n) {
    for (Index gi = 0; gi < g.groups; ++gi) {
      const Scalar* xg = x.data() + (n * g.cin + gi * g.cin_g()) * g.f * g.t;
      const Scalar* cols = xg;
      if (!g.pointwise()) {
        im2col(xg, g, col.data());
        cols = col.data();
      }
      MapConstMat<Scalar> wm(w.data() + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch());
      MapConstMat<Scalar> cm(cols, g.patch(), plane);
      MapMat<Scalar> ym(y.data() + (n * g.cout + gi * g.cout_g()) * plane, g.cout_g(), plane);
      ym.noalias() = wm * cm;
      ym.colwise() += MapConstVec<Scalar>(b.data() + gi * g.cout_g(), g.cout_g());
    }
  }
  return y;
}

template <typename Scalar>
Var conv2d(Tape<Scalar>& tape, Var x, Var w, Var b, Conv2dOptions opt) {
  using namespace detail;
  Tensor<Scalar> y = conv2d_forward(tape.value(x), tape.value(w), tape.value(b), opt);
  return tape.record("conv2d", std::move(y), {x, w, b}, [x, w, b, opt](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    const Tensor<Scalar>& xv = tp.value(x);
    const Tensor<Scalar>& wv = tp.value(w);
    const ConvGeometry g = conv_geometry(xv.shape(), wv.shape(), tp.value(b).shape(), opt);
    const Index plane = g.out_plane();
    const bool want_x = tp.requires_grad(x);
    const bool want_w = tp.requires_grad(w);
    if (tp.requires_grad(b)) {
      Tensor<Scalar> db(Shape{g.cout});
      MapConstMat<Scalar> dym(dy.data(), g.n * g.cout, plane);
      for (Index n = 0; n < g.n; ++n)
        for (Index c = 0; c < g.cout; ++c) db[c] += dym.row(n * g.cout + c).sum();
      tp.accumulate(b, std::move(db));
    }
    if (!want_x && !want_w) return;
    Tensor<Scalar> dx = want_x ? Tensor<Scalar>(xv.shape()) : Tensor<Scalar>();
    Tensor<Scalar> dw = want_w ? Tensor<Scalar>(wv.shape()) : Tensor<Scalar>();
    if (g.depthwise()) {
      depthwise_backward(xv.data(), wv.data(), dy.data(), g, want_x ? dx.data() : nullptr,
                         want_w ? dw.data() : nullptr);
    } else {
      std::vector<Scalar> col(g.pointwise() || !want_w ? 0 : static_cast<std::size_t>(g.patch() * plane));
      std::vector<Scalar> dcol(g.pointwise() || !want_x ? 0 : static_cast<std::size_t>(g.patch() * plane));
      for (Index n = 0; n < g.n; ++n) {
        for (Index gi = 0; gi < g.groups; ++gi) {
          const Index x_off = (n * g.cin + gi * g.cin_g()) * g.f * g.t;
          MapConstMat<Scalar> dym(dy.data() + (n * g.cout + gi * g.cout_g()) * plane, g.cout_g(), plane);
          MapConstMat<Scalar> wm(wv.data() + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch());
          if (want_w) {
            const Scalar* cols = xv.data() + x_off;
            if (!g.pointwise()) {
              im2col(xv.data() + x_off, g, col.data());
              cols = col.data();
            }
            MapMat<Scalar> dwm(dw.data() + gi * g.cout_g() * g.patch(), g.cout_g(), g.patch());
            dwm.noalias() += dym * MapConstMat<Scalar>(cols, g.patch(), plane).transpose();
          }
          if (want_x) {
            if (g.pointwise()) {
              MapMat<Scalar> dxm(dx.data() + x_off, g.patch(), plane);
              dxm.noalias() += wm.transpose() * dym;
            } else {
              MapMat<Scalar> dcm(dcol.data(), g.patch(), plane);
              dcm.noalias() = wm.transpose() * dym;
              col2im(dcol.data(), g, dx.data() + x_off);
            }
          }
        }
      }
    }
    if (want_x) tp.accumulate(x, std::move(dx));
    if (want_w) tp.accumulate(w, std::move(dw));
  });
}

/// Max pooling without padding; backward routes to the first maximum of each window.
template <typename Scalar>
Var maxpool2d(Tape<Scalar>& tape, Var x, Index2 kernel, Index2 stride) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 4, "maxpool2d");
  const Index N = xv.dim(0), C = xv.dim(1), F = xv.dim(2), T = xv.dim(3);
  if (kernel.f < 1 || kernel.t < 1 || stride.f < 1 || stride.t < 1) {
    throw ConfigError("maxpool2d: kernel and stride must be positive");
  }
  if (kernel.f > F || kernel.t > T) {
    throw ConfigError("maxpool2d: kernel " + std::to_string(kernel.f) + "x" + std::to_string(kernel.t) +
                      " larger than input " + std::to_string(F) + "x" + std::to_string(T));
  }
  const Index Fo = (F - kernel.f) / stride.f + 1, To = (T - kernel.t) / stride.t + 1;
  Tensor<Scalar> y(Shape{N, C, Fo, To});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.size()));
  Index o = 0;
  for (Index nc = 0; nc < N * C; ++nc) {
    const Scalar* xp = xv.data() + nc * F * T;
    for (Index fo = 0; fo < Fo; ++fo) {
      for (Index to = 0; to < To; ++to, ++o) {
        Index best = (fo * stride.f) * T + to * stride.t;
        for (Index kf = 0; kf < kernel.f; ++kf) {
          for (Index kt = 0; kt < kernel.t; ++kt) {
            const Index idx = (fo * stride.f + kf) * T + to * stride.t + kt;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        y[o] = xp[best];
        (*argmax)[static_cast<std::size_t>(o)] = nc * F * T + best;
      }
    }
  }
  return tape.record("maxpool2d", std::move(y), {x}, [x, argmax](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(tp.value(x).shape());
    for (Index o = 0; o < dy.size(); ++o) dx[(*argmax)[static_cast<std::size_t>(o)]] += dy[o];
    tp.accumulate(x, std::move(dx));
  });
}

/// [N,C,F,T] -> [N,C,1,T], mean over frequency.
template <typename Scalar>
Var freq_avgpool(Tape<Scalar>& tape, Var x) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 4, "freq_avgpool");
  const Index NC = xv.dim(0) * xv.dim(1), F = xv.dim(2), T = xv.dim(3);
  Tensor<Scalar> y(Shape{xv.dim(0), xv.dim(1), 1, T});
  for (Index nc = 0; nc < NC; ++nc) {
    detail::MapConstMat<Scalar> xm(xv.data() + nc * F * T, F, T);
    detail::MapMat<Scalar>(y.data() + nc * T, 1, T) = xm.colwise().sum() / Scalar(F);
  }
  return tape.record("freq_avgpool", std::move(y), {x}, [x, NC, F, T](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(tp.value(x).shape());
    for (Index nc = 0; nc < NC; ++nc) {
      detail::MapMat<Scalar>(dx.data() + nc * F * T, F, T).rowwise() =
          detail::MapConstMat<Scalar>(dy.data() + nc * T, 1, T).row(0) / Scalar(F);
    }
    tp.accumulate(x, std::move(dx));
  });
}

/// [N,C,1,T] -> [N,C,F,T], replicating the single frequency row.
template <typename Scalar>
Var broadcast_freq(Tape<Scalar>& tape, Var x, Index F) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 4, "broadcast_freq");
  if (xv.dim(2) != 1) throw ConfigError("broadcast_freq: input frequency extent must be 1, got " + to_string(xv.shape()));
  if (F < 1) throw ConfigError("broadcast_freq: F must be positive");
  const Index NC = xv.dim(0) * xv.dim(1), T = xv.dim(3);
  Tensor<Scalar> y(Shape{xv.dim(0), xv.dim(1), F, T});
  for (Index nc = 0; nc < NC; ++nc) {
    detail::MapMat<Scalar>(y.data() + nc * F * T, F, T).rowwise() =
        detail::MapConstMat<Scalar>(xv.data() + nc * T, 1, T).row(0);
  }
  return tape.record("broadcast_freq", std::move(y), {x}, [x, NC, F, T](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(tp.value(x).shape());
    for (Index nc = 0; nc < NC; ++nc) {
      detail::MapMat<Scalar>(dx.data() + nc * T, 1, T) =
          detail::MapConstMat<Scalar>(dy.data() + nc * F * T, F, T).colwise().sum();
    }
    tp.accumulate(x, std::move(dx));
  });
}

template <typename Scalar>
Var add(Tape<Scalar>& tape, Var a, Var b) {
  const Tensor<Scalar>& av = tape.value(a);
  const Tensor<Scalar>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw ConfigError("add: shape mismatch " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  Tensor<Scalar> y(av.shape(), typename Tensor<Scalar>::Storage(av.array() + bv.array()));
  return tape.record("add", std::move(y), {a, b}, [a, b](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    tp.accumulate(a, dy);
    tp.accumulate(b, dy);
  });
}

/// Batch normalization applied independently to `groups` contiguous frequency
/// bands of every channel. groups == 1 is plain per-channel batchnorm2d.
/// gamma/beta/running stats hold C*groups entries indexed [c*groups + band].
template <typename Scalar>
Var subband_batchnorm(Tape<Scalar>& tape, Var x, Var gamma, Var beta, Index groups, Mode mode,
                      RunningStats<Scalar>* stats, double eps = 1e-5) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 4, "batchnorm");
  const Index N = xv.dim(0), C = xv.dim(1), F = xv.dim(2), T = xv.dim(3);
  if (groups < 1 || F % groups != 0) {
    throw ConfigError("subspectral norm: frequency F=" + std::to_string(F) + " not divisible by S=" +
                      std::to_string(groups));
  }
  if (eps <= 0) throw ConfigError("batchnorm: eps must be positive");
  const Index K = C * groups;
  const Tensor<Scalar>& gv = tape.value(gamma);
  const Tensor<Scalar>& bv = tape.value(beta);
  if (gv.size() != K || bv.size() != K) {
    throw ConfigError("batchnorm: gamma/beta need " + std::to_string(K) + " entries, got " +
                      std::to_string(gv.size()) + "/" + std::to_string(bv.size()));
  }
  if (stats && (stats->mean.size() != K || stats->var.size() != K)) {
    throw ConfigError("batchnorm: running statistics size mismatch");
  }
  const Index band = F / groups;
  const Index L = band * T;
  const Index M = N * L;
  using Seg = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstSeg = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  // offset of the contiguous (sample n, channel c, band s) slab of length L
  auto slab = [=](Index n, Index c, Index s) { return ((n * C + c) * F + s * band) * T; };

  Tensor<Scalar> y(xv.shape());
  auto xhat = std::make_shared<Tensor<Scalar>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(K));
  const bool train = mode == Mode::train;
  for (Index c = 0; c < C; ++c) {
    for (Index s = 0; s < groups; ++s) {
      const Index k = c * groups + s;
      double mean, var;
      if (train) {
        double sum = 0;
        for (Index n = 0; n < N; ++n) sum += ConstSeg(xv.data() + slab(n, c, s), L).template cast<double>().sum();
        mean = sum / static_cast<double>(M);
        double sq = 0;
        for (Index n = 0; n < N; ++n)
          sq += (ConstSeg(xv.data() + slab(n, c, s), L).template cast<double>() - mean).square().sum();
        var = sq / static_cast<double>(M);
        if (stats) {
          const double m = stats->momentum;
          const double unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
          stats->mean[k] = static_cast<Scalar>((1 - m) * stats->mean[k] + m * mean);
          stats->var[k] = static_cast<Scalar>((1 - m) * stats->var[k] + m * unbiased);
        }
      } else {
        mean = stats ? static_cast<double>(stats->mean[k]) : 0.0;
        var = stats ? static_cast<double>(stats->var[k]) : 1.0;
      }
      const Scalar mu = static_cast<Scalar>(mean);
      const Scalar inv = static_cast<Scalar>(1.0 / std::sqrt(var + eps));
      (*inv_std)[static_cast<std::size_t>(k)] = inv;
      const Scalar gk = gv[k], bk = bv[k];
      for (Index n = 0; n < N; ++n) {
        const Index off = slab(n, c, s);
        Seg h(xhat->data() + off, L);
        h = (ConstSeg(xv.data() + off, L) - mu) * inv;
        Seg(y.data() + off, L) = gk * h + bk;
      }
    }
  }
  return tape.record(groups == 1 ? "batchnorm2d" : "subspectral_norm", std::move(y), {x, gamma, beta},
                     [=](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
                       const Tensor<Scalar>& g = tp.value(gamma);
                       Tensor<Scalar> dgamma(g.shape()), dbeta(g.shape());
                       Tensor<Scalar> dx(xhat->shape());
                       for (Index c = 0; c < C; ++c) {
                         for (Index s = 0; s < groups; ++s) {
                           const Index k = c * groups + s;
                           double sum_dy = 0, sum_dy_h = 0;
                           for (Index n = 0; n < N; ++n) {
                             const Index off = slab(n, c, s);
                             ConstSeg d(dy.data() + off, L), h(xhat->data() + off, L);
                             sum_dy += d.template cast<double>().sum();
                             sum_dy_h += (d.template cast<double>() * h.template cast<double>()).sum();
                           }
                           dgamma[k] = static_cast<Scalar>(sum_dy_h);
                           dbeta[k] = static_cast<Scalar>(sum_dy);
                           const Scalar scale = g[k] * (*inv_std)[static_cast<std::size_t>(k)];
                           const Scalar mdy = train ? static_cast<Scalar>(sum_dy / static_cast<double>(M)) : Scalar(0);
                           const Scalar mdyh =
                               train ? static_cast<Scalar>(sum_dy_h / static_cast<double>(M)) : Scalar(0);
                           for (Index n = 0; n < N; ++n) {
                             const Index off = slab(n, c, s);
                             ConstSeg d(dy.data() + off, L), h(xhat->data() + off, L);
                             Seg(dx.data() + off, L) = scale * (d - mdy - h * mdyh);
                           }
                         }
                       }
                       tp.accumulate(x, std::move(dx));
                       tp.accumulate(gamma, std::move(dgamma));
                       tp.accumulate(beta, std::move(dbeta));
                     });
}

template <typename Scalar>
Var batchnorm2d(Tape<Scalar>& tape, Var x, Var gamma, Var beta, Mode mode, RunningStats<Scalar>* stats,
                double eps = 1e-5) {
  return subband_batchnorm(tape, x, gamma, beta, 1, mode, stats, eps);
}

/// SubSpectral norm: S contiguous frequency bands normalized independently.
template <typename Scalar>
Var subspectral_norm(Tape<Scalar>& tape, Var x, Var gamma, Var beta, Index groups, Mode mode,
                     RunningStats<Scalar>* stats, double eps = 1e-5) {
  return subband_batchnorm(tape, x, gamma, beta, groups, mode, stats, eps);
}

/// Parameter-free instance norm per (sample, frequency bin) over channels and
/// time. Same behavior in train and eval.
template <typename Scalar>
Var freq_instance_norm(Tape<Scalar>& tape, Var x, double eps = 1e-5) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 4, "freq_instance_norm");
  const Index N = xv.dim(0), C = xv.dim(1), F = xv.dim(2), T = xv.dim(3);
  const Index M = C * T;
  if (M < 2) throw ConfigError("freq_instance_norm: needs C*T > 1");
  using Seg = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstSeg = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  auto row = [=](Index n, Index c, Index f) { return ((n * C + c) * F + f) * T; };
  auto xhat = std::make_shared<Tensor<Scalar>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(N * F));
  for (Index n = 0; n < N; ++n) {
    for (Index f = 0; f < F; ++f) {
      double sum = 0;
      for (Index c = 0; c < C; ++c) sum += ConstSeg(xv.data() + row(n, c, f), T).template cast<double>().sum();
      const double mean = sum / static_cast<double>(M);
      double sq = 0;
      for (Index c = 0; c < C; ++c)
        sq += (ConstSeg(xv.data() + row(n, c, f), T).template cast<double>() - mean).square().sum();
      const double inv = 1.0 / std::sqrt(sq / static_cast<double>(M) + eps);
      (*inv_std)[static_cast<std::size_t>(n * F + f)] = static_cast<Scalar>(inv);
      const Scalar mu = static_cast<Scalar>(mean), is = static_cast<Scalar>(inv);
      for (Index c = 0; c < C; ++c) {
        const Index off = row(n, c, f);
        Seg(xhat->data() + off, T) = (ConstSeg(xv.data() + off, T) - mu) * is;
      }
    }
  }
  Tensor<Scalar> y = *xhat;
  return tape.record("freq_instance_norm", std::move(y), {x}, [=](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(xhat->shape());
    for (Index n = 0; n < N; ++n) {
      for (Index f = 0; f < F; ++f) {
        double sum_dy = 0, sum_dy_h = 0;
        for (Index c = 0; c < C; ++c) {
          const Index off = row(n, c, f);
          ConstSeg d(dy.data() + off, T), h(xhat->data() + off, T);
          sum_dy += d.template cast<double>().sum();
          sum_dy_h += (d.template cast<double>() * h.template cast<double>()).sum();
        }
        const Scalar mdy = static_cast<Scalar>(sum_dy / static_cast<double>(M));
        const Scalar mdyh = static_cast<Scalar>(sum_dy_h / static_cast<double>(M));
        const Scalar inv = (*inv_std)[static_cast<std::size_t>(n * F + f)];
        for (Index c = 0; c < C; ++c) {
          const Index off = row(n, c, f);
          ConstSeg d(dy.data() + off, T), h(xhat->data() + off, T);
          Seg(dx.data() + off, T) = inv * (d - mdy - h * mdyh);
        }
      }
    }
    tp.accumulate(x, std::move(dx));
  });
}

/// swish(x) = x * sigmoid(x)
template <typename Scalar>
Var swish(Tape<Scalar>& tape, Var x) {
  const auto& xa = tape.value(x).array();
  auto sig = std::make_shared<typename Tensor<Scalar>::Storage>((Scalar(1) + (-xa).exp()).inverse());
  Tensor<Scalar> y(tape.value(x).shape(), typename Tensor<Scalar>::Storage(xa * *sig));
  return tape.record("swish", std::move(y), {x}, [x, sig](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    const auto& xa = tp.value(x).array();
    const auto& s = *sig;
    tp.accumulate(x, Tensor<Scalar>(dy.shape(), typename Tensor<Scalar>::Storage(
                                                    dy.array() * (s + xa * s * (Scalar(1) - s)))));
  });
}

template <typename Scalar>
Var relu(Tape<Scalar>& tape, Var x) {
  const Tensor<Scalar>& xv = tape.value(x);
  Tensor<Scalar> y(xv.shape(), typename Tensor<Scalar>::Storage(xv.array().max(Scalar(0))));
  return tape.record("relu", std::move(y), {x}, [x](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    const auto& xa = tp.value(x).array();
    tp.accumulate(x, Tensor<Scalar>(dy.shape(), typename Tensor<Scalar>::Storage(
                                                    (xa > Scalar(0)).select(dy.array(), Scalar(0)))));
  });
}

/// Inverted dropout. Channel style drops whole (sample, channel) slices of a
/// rank >= 3 tensor. The mask is drawn from `rng` only in train mode with p > 0.
template <typename Scalar>
Var dropout(Tape<Scalar>& tape, Var x, double p, Mode mode, DropoutStyle style, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  const Tensor<Scalar>& xv = tape.value(x);
  if (mode == Mode::eval || p == 0.0) {
    return tape.record("dropout", xv, {x}, [x](Tape<Scalar>& tp, const Tensor<Scalar>& dy) { tp.accumulate(x, dy); });
  }
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
  auto mask = std::make_shared<typename Tensor<Scalar>::Storage>(xv.size());
  if (style == DropoutStyle::elementwise) {
    for (Index i = 0; i < xv.size(); ++i) (*mask)[i] = rng.uniform() < p ? Scalar(0) : keep_scale;
  } else {
    if (xv.rank() < 3) throw ConfigError("channel dropout needs [N,C,...] input, got " + to_string(xv.shape()));
    const Index slices = xv.dim(0) * xv.dim(1);
    const Index inner = xv.size() / slices;
    for (Index s = 0; s < slices; ++s) mask->segment(s * inner, inner).setConstant(rng.uniform() < p ? Scalar(0) : keep_scale);
  }
  Tensor<Scalar> y(xv.shape(), typename Tensor<Scalar>::Storage(xv.array() * *mask));
  return tape.record("dropout", std::move(y), {x}, [x, mask](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    tp.accumulate(x, Tensor<Scalar>(dy.shape(), typename Tensor<Scalar>::Storage(dy.array() * *mask)));
  });
}

/// Affine map on the last axis: y = x W^T + b, batched over leading axes.
template <typename Scalar>
Var linear(Tape<Scalar>& tape, Var x, Var w, Var b) {
  using namespace detail;
  const Tensor<Scalar>& xv = tape.value(x);
  const Tensor<Scalar>& wv = tape.value(w);
  require_rank(wv, 2, "linear weight");
  const Index din = wv.dim(1), dout = wv.dim(0);
  if (xv.rank() < 1 || xv.shape().back() != din) {
    throw ConfigError("linear: input " + to_string(xv.shape()) + " last axis does not match weight " +
                      to_string(wv.shape()));
  }
  if (tape.value(b).shape() != Shape{dout}) throw ConfigError("linear: bias must be [" + std::to_string(dout) + "]");
  const Index rows = xv.size() / din;
  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor<Scalar> y(out_shape);
  MapMat<Scalar> ym(y.data(), rows, dout);
  ym.noalias() = MapConstMat<Scalar>(xv.data(), rows, din) * MapConstMat<Scalar>(wv.data(), dout, din).transpose();
  ym.rowwise() += MapConstVec<Scalar>(tape.value(b).data(), dout).transpose();
  return tape.record("linear", std::move(y), {x, w, b}, [=](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    MapConstMat<Scalar> dym(dy.data(), rows, dout);
    const Tensor<Scalar>& xv = tp.value(x);
    const Tensor<Scalar>& wv = tp.value(w);
    if (tp.requires_grad(x)) {
      Tensor<Scalar> dx(xv.shape());
      MapMat<Scalar>(dx.data(), rows, din).noalias() = dym * MapConstMat<Scalar>(wv.data(), dout, din);
      tp.accumulate(x, std::move(dx));
    }
    if (tp.requires_grad(w)) {
      Tensor<Scalar> dw(wv.shape());
      MapMat<Scalar>(dw.data(), dout, din).noalias() = dym.transpose() * MapConstMat<Scalar>(xv.data(), rows, din);
      tp.accumulate(w, std::move(dw));
    }
    if (tp.requires_grad(b)) {
      Tensor<Scalar> db(Shape{dout});
      MapVec<Scalar>(db.data(), dout) = dym.colwise().sum().transpose();
      tp.accumulate(b, std::move(db));
    }
  });
}

/// [N,C,F,T] -> [N,T,C*F]; element (n,c,f,t) lands at (n, t, c*F + f).
template <typename Scalar>
Var to_sequence(Tape<Scalar>& tape, Var x) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 4, "to_sequence");
  const Index N = xv.dim(0), C = xv.dim(1), F = xv.dim(2), T = xv.dim(3);
  Tensor<Scalar> y(Shape{N, T, C * F});
  for (Index n = 0; n < N; ++n) {
    detail::MapConstMat<Scalar> xm(xv.data() + n * C * F * T, C * F, T);
    detail::MapMat<Scalar>(y.data() + n * T * C * F, T, C * F) = xm.transpose();
  }
  return tape.record("to_sequence", std::move(y), {x}, [=](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(Shape{N, C, F, T});
    for (Index n = 0; n < N; ++n) {
      detail::MapMat<Scalar>(dx.data() + n * C * F * T, C * F, T) =
          detail::MapConstMat<Scalar>(dy.data() + n * T * C * F, T, C * F).transpose();
    }
    tp.accumulate(x, std::move(dx));
  });
}

/// [N,T,D] -> [N,D], mean over the time axis.
template <typename Scalar>
Var mean_over_time(Tape<Scalar>& tape, Var x) {
  const Tensor<Scalar>& xv = tape.value(x);
  require_rank(xv, 3, "mean_over_time");
  const Index N = xv.dim(0), T = xv.dim(1), D = xv.dim(2);
  Tensor<Scalar> y(Shape{N, D});
  for (Index n = 0; n < N; ++n) {
    detail::MapMat<Scalar>(y.data() + n * D, 1, D) =
        detail::MapConstMat<Scalar>(xv.data() + n * T * D, T, D).colwise().sum() / Scalar(T);
  }
  return tape.record("mean_over_time", std::move(y), {x}, [=](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    Tensor<Scalar> dx(Shape{N, T, D});
    for (Index n = 0; n < N; ++n) {
      detail::MapMat<Scalar>(dx.data() + n * T * D, T, D).rowwise() =
          detail::MapConstMat<Scalar>(dy.data() + n * D, 1, D).row(0) / Scalar(T);
    }
    tp.accumulate(x, std::move(dx));
  });
}

/// Scalar sum(x * weights) with fixed weights; reduces any op to a scalar for checks.
template <typename Scalar>
Var weighted_sum(Tape<Scalar>& tape, Var x, Tensor<Scalar> weights) {
  const Tensor<Scalar>& xv = tape.value(x);
  if (xv.shape() != weights.shape()) throw ConfigError("weighted_sum: shape mismatch");
  Tensor<Scalar> y(Shape{1}, Scalar((xv.array() * weights.array()).sum()));
  auto wp = std::make_shared<Tensor<Scalar>>(std::move(weights));
  return tape.record("weighted_sum", std::move(y), {x}, [x, wp](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
    tp.accumulate(x, Tensor<Scalar>(wp->shape(), typename Tensor<Scalar>::Storage(wp->array() * dy[0])));
  });
}

/// Row-wise softmax of [N,K] logits (max-subtracted).
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  require_rank(logits, 2, "softmax");
  const Index N = logits.dim(0), K = logits.dim(1);
  Tensor<Scalar> p(logits.shape());
  for (Index n = 0; n < N; ++n) {
    Scalar mx = logits(n, 0);
    for (Index k = 1; k < K; ++k) mx = std::max(mx, logits(n, k));
    Scalar z = 0;
    for (Index k = 0; k < K; ++k) z += (p(n, k) = std::exp(logits(n, k) - mx));
    for (Index k = 0; k < K; ++k) p(n, k) /= z;
  }
  return p;
}

/// Mean (optionally class-weighted) negative log-likelihood of `labels` under
/// softmax(logits). Weighted form: sum_i w[y_i] * nll_i / sum_i w[y_i].
template <typename Scalar>
Var softmax_cross_entropy(Tape<Scalar>& tape, Var logits, std::span<const int> labels,
                          std::span<const double> class_weights = {}) {
  const Tensor<Scalar>& lv = tape.value(logits);
  require_rank(lv, 2, "softmax_cross_entropy");
  const Index N = lv.dim(0), K = lv.dim(1);
  if (static_cast<Index>(labels.size()) != N) throw ConfigError("softmax_cross_entropy: label count mismatch");
  if (!class_weights.empty() && static_cast<Index>(class_weights.size()) != K) {
    throw ConfigError("softmax_cross_entropy: need one weight per class");
  }
  auto weights = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(N));
  Scalar total_w = 0;
  for (Index n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
    }
    (*weights)[static_cast<std::size_t>(n)] =
        class_weights.empty() ? Scalar(1) : static_cast<Scalar>(class_weights[static_cast<std::size_t>(y)]);
    total_w += (*weights)[static_cast<std::size_t>(n)];
  }
  Scalar loss = 0;
  for (Index n = 0; n < N; ++n) {
    Scalar mx = lv(n, 0);
    for (Index k = 1; k < K; ++k) mx = std::max(mx, lv(n, k));
    Scalar z = 0;
    for (Index k = 0; k < K; ++k) z += std::exp(lv(n, k) - mx);
    const Scalar nll = -(lv(n, labels[static_cast<std::size_t>(n)]) - mx - std::log(z));
    loss += (*weights)[static_cast<std::size_t>(n)] * nll;
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record("softmax_cross_entropy", Tensor<Scalar>(Shape{1}, loss / total_w), {logits},
                     [=, lab = std::move(lab)](Tape<Scalar>& tp, const Tensor<Scalar>& dy) {
                       Tensor<Scalar> d = softmax(tp.value(logits));
                       for (Index n = 0; n < N; ++n) {
                         d(n, lab[static_cast<std::size_t>(n)]) -= Scalar(1);
                         const Scalar s = (*weights)[static_cast<std::size_t>(n)] * dy[0] / total_w;
                         for (Index k = 0; k < K; ++k) d(n, k) *= s;
                       }
                       tp.accumulate(logits, std::move(d));
                     });
}

}  // namespace tornet
