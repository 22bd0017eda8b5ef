#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tornet/layers.hpp"
#include "tornet/ops.hpp"

namespace tornet {

enum class BlockKind { normal, transition };

struct BCResBlockSpec {
  Index in_channels = 0;
  Index out_channels = 0;
  Index2 stride{1, 1};
  BlockKind kind = BlockKind::normal;
  Index ssn_groups = 5;
  double dropout_p = 0.5;

  /// Frequency extent after the block for input extent `freq`; throws on an
  /// inconsistent spec.
  Index output_freq(Index freq, const std::string& where) const {
    if (in_channels < 1 || out_channels < 1) throw ConfigError(where + ": channel counts must be positive");
    if (kind == BlockKind::normal && (in_channels != out_channels || stride != Index2{1, 1})) {
      throw ConfigError(where + ": a normal BC ResBlock needs equal channels and stride 1");
    }
    if (stride.t != 1) throw ConfigError(where + ": temporal stride must be 1 (broadcast term would not align)");
    if (stride.f < 1) throw ConfigError(where + ": frequency stride must be positive");
    const Index out = conv_out_size(freq, 3, stride.f, 1);
    if (out < 1) throw ConfigError(where + ": frequency " + std::to_string(freq) + " too small for stride");
    if (ssn_groups < 1 || out % ssn_groups != 0) {
      throw ConfigError(where + ": SubSpectral norm groups S=" + std::to_string(ssn_groups) +
                        " do not divide frequency F=" + std::to_string(out));
    }
    return out;
  }
};

struct ABBlockSpec {
  Index in_channels = 0;
  Index out_channels = 0;
  Index2 stride{1, 1};
  Index n_normal = 1;
  bool last_conv = true;
  Index2 last_conv_kernel{3, 3};
  Index ssn_groups = 5;
  double dropout_p = 0.5;

  /// Transition unless channels and stride allow an identity shortcut.
  BlockKind leading_kind() const {
    return in_channels == out_channels && stride == Index2{1, 1} ? BlockKind::normal : BlockKind::transition;
  }

  std::vector<BCResBlockSpec> block_specs() const {
    std::vector<BCResBlockSpec> specs;
    specs.push_back({in_channels, out_channels, stride, leading_kind(), ssn_groups, dropout_p});
    for (Index i = 0; i < n_normal; ++i) {
      specs.push_back({out_channels, out_channels, {1, 1}, BlockKind::normal, ssn_groups, dropout_p});
    }
    return specs;
  }

  Index output_freq(Index freq, const std::string& where) const {
    if (n_normal < 0) throw ConfigError(where + ": n_normal must be >= 0");
    for (const auto& s : block_specs()) freq = s.output_freq(freq, where);
    return freq;
  }
};

/// Broadcast residual block:
///   normal:     y = x + f2(x) + BC(f1(avgpool_F(f2(x))))
///   transition: x' = relu(bn(conv1x1(x))); y = f2(x') + BC(f1(avgpool_F(f2(x'))))
/// f2 = 3x1 frequency-depthwise conv -> SubSpectral norm
/// f1 = 1x3 temporal-depthwise conv -> BN -> swish -> 1x1 conv -> channel dropout
template <typename Scalar>
struct BCResBlock {
  BCResBlockSpec spec;
  std::optional<ConvLayer> proj;
  std::optional<NormLayer> proj_bn;
  ConvLayer dw_f;
  NormLayer ssn;
  ConvLayer dw_t;
  NormLayer bn;
  ConvLayer pw;

  static BCResBlock build(ParameterStore<Scalar>& store, const Rng& init, const std::string& prefix,
                          const BCResBlockSpec& spec, double eps = 1e-5) {
    BCResBlock b;
    b.spec = spec;
    const Index c = spec.out_channels;
    if (spec.kind == BlockKind::transition) {
      b.proj = make_conv(store, init, prefix + ".proj", spec.in_channels, c, {1, 1}, {});
      b.proj_bn = make_norm(store, prefix + ".proj_bn", c, 1, eps);
    }
    b.dw_f = make_conv(store, init, prefix + ".dw_f", c, c, {3, 1}, {{spec.stride.f, 1}, {1, 0}, c});
    b.ssn = make_norm(store, prefix + ".ssn", c, spec.ssn_groups, eps);
    b.dw_t = make_conv(store, init, prefix + ".dw_t", c, c, {1, 3}, {{1, spec.stride.t}, {0, 1}, c});
    b.bn = make_norm(store, prefix + ".bn", c, 1, eps);
    b.pw = make_conv(store, init, prefix + ".pw", c, c, {1, 1}, {});
    return b;
  }

  Var f2(Context<Scalar>& ctx, Var x) const { return apply(ctx, ssn, apply(ctx, dw_f, x)); }

  Var f1(Context<Scalar>& ctx, Var x) const {
    Var h = swish(ctx.tape, apply(ctx, bn, apply(ctx, dw_t, x)));
    h = apply(ctx, pw, h);
    if (ctx.mode == Mode::eval || spec.dropout_p == 0.0) {
      return h;
    }
    return dropout(ctx.tape, h, spec.dropout_p, ctx.mode, DropoutStyle::channel, ctx.rng());
  }

  Var forward(Context<Scalar>& ctx, Var x) const {
    const Shape& in = ctx.tape.shape(x);
    if (in.size() != 4 || in[1] != spec.in_channels) {
      throw ConfigError("BC ResBlock expects " + std::to_string(spec.in_channels) + " input channels, got " +
                        to_string(in));
    }
    Var base = x;
    if (spec.kind == BlockKind::transition) {
      base = relu(ctx.tape, apply(ctx, *proj_bn, apply(ctx, *proj, x)));
    }
    Var freq2d = f2(ctx, base);
    const Index F = ctx.tape.shape(freq2d)[2];
    Var temporal = broadcast_freq(ctx.tape, f1(ctx, freq_avgpool(ctx.tape, freq2d)), F);
    if (ctx.tape.shape(temporal) != ctx.tape.shape(freq2d)) {
      throw std::logic_error("BC ResBlock residual terms disagree: " + to_string(ctx.tape.shape(freq2d)) + " vs " +
                             to_string(ctx.tape.shape(temporal)));
    }
    Var y = add(ctx.tape, freq2d, temporal);
    if (spec.kind == BlockKind::normal) y = add(ctx.tape, x, y);
    return y;
  }
};

/// Alternating Broadcast block: leading (usually transition) BC ResBlock,
/// n_normal normal BC ResBlocks, then an optional conv -> BN -> ReLU.
template <typename Scalar>
struct ABBlock {
  ABBlockSpec spec;
  std::vector<BCResBlock<Scalar>> blocks;
  std::optional<ConvLayer> last_conv;
  std::optional<NormLayer> last_bn;

  static ABBlock build(ParameterStore<Scalar>& store, const Rng& init, const std::string& prefix,
                       const ABBlockSpec& spec, double eps = 1e-5) {
    ABBlock ab;
    ab.spec = spec;
    const auto specs = spec.block_specs();
    for (std::size_t i = 0; i < specs.size(); ++i) {
      std::string name = prefix + ".";
      if (i == 0 && specs[i].kind == BlockKind::transition) {
        name += "trans";
      } else {
        name += "norm" + std::to_string(specs[0].kind == BlockKind::transition ? i : i + 1);
      }
      ab.blocks.push_back(BCResBlock<Scalar>::build(store, init, name, specs[i], eps));
    }
    if (spec.last_conv) {
      const Index2 k = spec.last_conv_kernel;
      ab.last_conv = make_conv(store, init, prefix + ".last_conv", spec.out_channels, spec.out_channels, k,
                               {{1, 1}, {k.f / 2, k.t / 2}, 1});
      ab.last_bn = make_norm(store, prefix + ".last_bn", spec.out_channels, 1, eps);
    }
    return ab;
  }

  Var forward(Context<Scalar>& ctx, Var x) const {
    for (const auto& b : blocks) x = b.forward(ctx, x);
    if (last_conv) x = relu(ctx.tape, apply(ctx, *last_bn, apply(ctx, *last_conv, x)));
    return x;
  }
};

}  // namespace tornet
