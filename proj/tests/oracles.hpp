#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "support.hpp"
#include "tornet/blocks.hpp"

namespace tornet::testing {

/// Builds one block with every parameter drawn at random.
struct BlockFixture {
  ParameterStore<double> store;
  BCResBlock<double> block;

  BlockFixture(const BCResBlockSpec& spec, std::uint64_t seed) {
    block = BCResBlock<double>::build(store, Rng(seed).stream("init"), "blk", spec);
    Rng rng(seed + 100);
    for (auto& p : store.parameters()) p.value = random_tensor(p.value.shape(), rng);
  }

  TensorD forward(const TensorD& x, Mode mode, std::uint64_t dropout_seed = 0) {
    Tape<double> tape;
    Rng drop(dropout_seed);
    Context<double> ctx{tape, store, mode, &drop};
    return tape.value(block.forward(ctx, tape.constant(x)));
  }
};

/// The block written out with primitives on its own parameters.
inline TensorD manual_block(BlockFixture& fx, const TensorD& input, Mode mode, std::uint64_t dropout_seed) {
  auto& st = fx.store;
  const auto& b = fx.block;
  Tape<double> t;
  Rng drop(dropout_seed);
  auto P = [&](std::size_t i) { return t.parameter(st.param(i)); };
  auto conv = [&](const ConvLayer& l, Var v) { return conv2d(t, v, P(l.weight), P(l.bias), l.options); };
  auto norm = [&](const NormLayer& l, Var v) {
    return subband_batchnorm(t, v, P(l.gamma), P(l.beta), l.groups, mode, &st.stats(l.stats), l.eps);
  };
  Var x = t.constant(input);
  Var base = x;
  if (b.spec.kind == BlockKind::transition) base = relu(t, norm(*b.proj_bn, conv(*b.proj, x)));
  Var f2 = subspectral_norm(t, conv(b.dw_f, base), P(b.ssn.gamma), P(b.ssn.beta), b.spec.ssn_groups, mode,
                            &st.stats(b.ssn.stats), b.ssn.eps);
  Var pooled = freq_avgpool(t, f2);
  Var h = conv(b.pw, swish(t, batchnorm2d(t, conv(b.dw_t, pooled), P(b.bn.gamma), P(b.bn.beta), mode,
                                         &st.stats(b.bn.stats), b.bn.eps)));
  if (mode == Mode::train) h = dropout(t, h, b.spec.dropout_p, mode, DropoutStyle::channel, drop);
  Var y = add(t, f2, broadcast_freq(t, h, t.shape(f2)[2]));
  if (b.spec.kind == BlockKind::normal) y = add(t, x, y);
  return t.value(y);
}

// Brute-force UAR: per class, count hits and totals by scanning.
inline double brute_uar(const std::vector<int>& y, const std::vector<int>& p, int K) {
  double sum = 0;
  for (int k = 0; k < K; ++k) {
    long hit = 0, total = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] != k) continue;
      ++total;
      if (p[i] == k) ++hit;
    }
    sum += static_cast<double>(hit) / static_cast<double>(total);
  }
  return sum / K;
}

// Same resampling protocol as the library, scored by brute force.
inline std::pair<double, double> brute_ci(const std::vector<int>& y, const std::vector<int>& p, int K, int B, double level,
                                          std::uint64_t seed) {
  Rng rng = Rng(seed).stream("bootstrap");
  std::vector<double> stats;
  while (static_cast<int>(stats.size()) < B) {
    std::vector<int> ry, rp;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const auto j = static_cast<std::size_t>(rng.below(y.size()));
      ry.push_back(y[j]);
      rp.push_back(p[j]);
    }
    bool all = true;
    for (int k = 0; k < K; ++k) all = all && std::count(ry.begin(), ry.end(), k) > 0;
    if (all) stats.push_back(brute_uar(ry, rp, K));
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = (1 - level) / 2;
  const auto lo = static_cast<std::size_t>(std::llround(std::ceil(alpha * B - 1e-9)));
  const auto hi = static_cast<std::size_t>(std::llround(std::ceil((1 - alpha) * B - 1e-9)));
  return {stats[std::max<std::size_t>(lo, 1) - 1], stats[std::max<std::size_t>(hi, 1) - 1]};
}

}  // namespace tornet::testing
