#include <cmath>
#include <memory>
#include <numeric>

#include "tornet/blocks.hpp"
#include "tornet/gradcheck.hpp"
#include "tornet/ops.hpp"

namespace tornet {
namespace {

constexpr double kSmooth = 1e-5;
constexpr double kKinked = 1e-4;

TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

/// Values with |x| >= 0.2 so relu is evaluated away from its kink.
TensorD away_from_zero(Shape shape, Rng& rng) {
  TensorD t(std::move(shape));
  for (auto& v : t.values()) {
    const double mag = 0.2 + rng.uniform();
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Distinct values spaced >= 0.05 apart so every pooling window has a clear maximum.
TensorD well_separated(Shape shape, Rng& rng) {
  TensorD t(std::move(shape));
  std::vector<Index> order(static_cast<std::size_t>(t.size()));
  std::iota(order.begin(), order.end(), Index{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (Index i = 0; i < t.size(); ++i) t[i] = 0.05 * static_cast<double>(order[static_cast<std::size_t>(i)]) + 0.01 * rng.uniform();
  return t;
}

/// Holds the inputs of one check and reduces the op output to a scalar with
/// fixed Gaussian weights.
struct Case {
  std::vector<std::unique_ptr<Parameter<double>>> inputs;
  std::shared_ptr<TensorD> projection;

  Parameter<double>& add(const std::string& name, TensorD value) {
    inputs.push_back(std::make_unique<Parameter<double>>(name, std::move(value)));
    return *inputs.back();
  }

  std::vector<Parameter<double>*> pointers() const {
    std::vector<Parameter<double>*> out;
    for (const auto& p : inputs) out.push_back(p.get());
    return out;
  }

  /// Wraps an op so the checked function is sum(op(...) * projection).
  GradFunction reduce(std::function<Var(Tape<double>&)> op, Rng& rng) {
    auto proj = projection = std::make_shared<TensorD>();
    return [op = std::move(op), proj, seed = rng.next_u64()](Tape<double>& tape) {
      Var y = op(tape);
      if (proj->empty()) {
        Rng r(seed);
        *proj = random_tensor(tape.shape(y), r);
      }
      return weighted_sum(tape, y, *proj);
    };
  }
};

using CaseFn = std::function<GradcheckReport(std::uint64_t seed)>;

GradcheckReport check_conv2d(std::uint64_t seed) {
  Rng rng(seed);
  struct Variant {
    Index n, cin, cout, f, t;
    Index2 kernel;
    Conv2dOptions opt;
  };
  const Variant variants[] = {
      {2, 2, 3, 5, 6, {3, 3}, {{1, 1}, {1, 1}, 1}},
      {2, 3, 3, 6, 4, {3, 1}, {{2, 1}, {1, 0}, 3}},
      {1, 3, 3, 2, 7, {1, 3}, {{1, 1}, {0, 1}, 3}},
      {2, 4, 4, 5, 6, {2, 3}, {{2, 2}, {1, 1}, 2}},
      {2, 3, 2, 3, 4, {1, 1}, {{1, 1}, {0, 0}, 1}},
  };
  const Variant& v = variants[seed % std::size(variants)];
  Case c;
  auto& x = c.add("x", random_tensor({v.n, v.cin, v.f, v.t}, rng));
  auto& w = c.add("w", random_tensor({v.cout, v.cin / v.opt.groups, v.kernel.f, v.kernel.t}, rng));
  auto& b = c.add("b", random_tensor({v.cout}, rng));
  auto fn = c.reduce(
      [&, opt = v.opt](Tape<double>& t) { return conv2d(t, t.parameter(x), t.parameter(w), t.parameter(b), opt); }, rng);
  return gradcheck("conv2d", fn, c.pointers(), kSmooth);
}

GradcheckReport check_maxpool(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  const bool wide = seed % 2;
  auto& x = c.add("x", well_separated({2, 2, wide ? 8 : 4, 6}, rng));
  const Index2 k = wide ? Index2{4, 1} : Index2{2, 2};
  auto fn = c.reduce([&, k](Tape<double>& t) { return maxpool2d(t, t.parameter(x), k, k); }, rng);
  return gradcheck("maxpool2d", fn, c.pointers(), kKinked);
}

GradcheckReport check_freq_avgpool(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 3, 5, 4}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return freq_avgpool(t, t.parameter(x)); }, rng);
  return gradcheck("freq_avgpool", fn, c.pointers(), kSmooth);
}

GradcheckReport check_broadcast(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 3, 1, 4}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return broadcast_freq(t, t.parameter(x), 5); }, rng);
  return gradcheck("broadcast_freq", fn, c.pointers(), kSmooth);
}

GradcheckReport check_batchnorm(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({3, 2, 3, 4}, rng, 2.0));
  auto& g = c.add("gamma", random_tensor({2}, rng));
  auto& b = c.add("beta", random_tensor({2}, rng));
  const Mode mode = seed % 3 == 0 ? Mode::eval : Mode::train;
  auto stats = std::make_shared<RunningStats<double>>(2);
  stats->mean = random_tensor({2}, rng);
  stats->var.array() = 0.5 + random_tensor({2}, rng).array().abs();
  auto fn = c.reduce(
      [&, mode, stats](Tape<double>& t) {
        RunningStats<double> scratch = *stats;
        return batchnorm2d(t, t.parameter(x), t.parameter(g), t.parameter(b), mode, &scratch);
      },
      rng);
  return gradcheck("batchnorm2d", fn, c.pointers(), kSmooth);
}

GradcheckReport check_subspectral(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 2, 6, 3}, rng, 2.0));
  const Index groups = seed % 2 ? 3 : 2;
  auto& g = c.add("gamma", random_tensor({2 * groups}, rng));
  auto& b = c.add("beta", random_tensor({2 * groups}, rng));
  auto fn = c.reduce(
      [&, groups](Tape<double>& t) {
        RunningStats<double> stats(2 * groups);
        return subspectral_norm(t, t.parameter(x), t.parameter(g), t.parameter(b), groups, Mode::train, &stats);
      },
      rng);
  return gradcheck("subspectral_norm", fn, c.pointers(), kSmooth);
}

GradcheckReport check_instance_norm(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 3, 4, 3}, rng, 2.0));
  auto fn = c.reduce([&](Tape<double>& t) { return freq_instance_norm(t, t.parameter(x)); }, rng);
  return gradcheck("freq_instance_norm", fn, c.pointers(), kSmooth);
}

GradcheckReport check_swish(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({12}, rng, 2.0));
  auto fn = c.reduce([&](Tape<double>& t) { return swish(t, t.parameter(x)); }, rng);
  return gradcheck("swish", fn, c.pointers(), kSmooth);
}

GradcheckReport check_relu(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", away_from_zero({12}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return relu(t, t.parameter(x)); }, rng);
  return gradcheck("relu", fn, c.pointers(), kKinked);
}

GradcheckReport check_dropout(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 3, 2, 2}, rng));
  const DropoutStyle style = seed % 2 ? DropoutStyle::channel : DropoutStyle::elementwise;
  auto fn = c.reduce(
      [&, style, mask_seed = rng.next_u64()](Tape<double>& t) {
        Rng mask(mask_seed);
        return dropout(t, t.parameter(x), 0.5, Mode::train, style, mask);
      },
      rng);
  return gradcheck("dropout", fn, c.pointers(), kSmooth);
}

GradcheckReport check_linear(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({3, 4}, rng));
  auto& w = c.add("w", random_tensor({5, 4}, rng));
  auto& b = c.add("b", random_tensor({5}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return linear(t, t.parameter(x), t.parameter(w), t.parameter(b)); }, rng);
  return gradcheck("linear", fn, c.pointers(), kSmooth);
}

GradcheckReport check_cross_entropy(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("logits", random_tensor({4, 3}, rng, 2.0));
  std::vector<int> labels(4);
  for (auto& l : labels) l = static_cast<int>(rng.below(3));
  std::vector<double> weights;
  if (seed % 2) weights = {0.5, 2.0, 1.25};
  GradFunction fn = [&, labels, weights](Tape<double>& t) {
    return softmax_cross_entropy(t, t.parameter(x), labels, weights);
  };
  return gradcheck("softmax_cross_entropy", fn, c.pointers(), kSmooth);
}

GradcheckReport check_add(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& a = c.add("a", random_tensor({2, 3}, rng));
  auto& b = c.add("b", random_tensor({2, 3}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return add(t, t.parameter(a), t.parameter(b)); }, rng);
  return gradcheck("add", fn, c.pointers(), kSmooth);
}

GradcheckReport check_to_sequence(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 3, 2, 4}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return to_sequence(t, t.parameter(x)); }, rng);
  return gradcheck("to_sequence", fn, c.pointers(), kSmooth);
}

GradcheckReport check_mean_over_time(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({2, 5, 3}, rng));
  auto fn = c.reduce([&](Tape<double>& t) { return mean_over_time(t, t.parameter(x)); }, rng);
  return gradcheck("mean_over_time", fn, c.pointers(), kSmooth);
}

/// Whole BC ResBlock in train mode (batch statistics, channel dropout with a
/// fixed mask); every block parameter and the input are checked.
GradcheckReport check_block(std::uint64_t seed, BlockKind kind) {
  Rng rng(seed);
  auto store = std::make_shared<ParameterStore<double>>();
  BCResBlockSpec spec;
  spec.kind = kind;
  spec.in_channels = kind == BlockKind::normal ? 3 : 2;
  spec.out_channels = 3;
  spec.stride = kind == BlockKind::normal ? Index2{1, 1} : Index2{2, 1};
  spec.ssn_groups = 2;
  const auto block = BCResBlock<double>::build(*store, rng.stream("init"), "blk", spec);
  for (auto& p : store->parameters()) {
    for (auto& v : p.value.values()) v += 0.5 * rng.normal();
  }
  Case c;
  auto& x = c.add("x", random_tensor({2, spec.in_channels, kind == BlockKind::normal ? 4 : 8, 5}, rng));
  auto inputs = c.pointers();
  for (auto& p : store->parameters()) inputs.push_back(&p);
  auto fn = c.reduce(
      [&, store, block, drop_seed = rng.next_u64()](Tape<double>& t) {
        Rng drop(drop_seed);
        Context<double> ctx{t, *store, Mode::train, &drop};
        return block.forward(ctx, t.parameter(x));
      },
      rng);
  const bool normal = kind == BlockKind::normal;
  return gradcheck(normal ? "bc_resblock_normal" : "bc_resblock_transition", fn, inputs,
                   normal ? kSmooth : kKinked);
}

/// swish forward paired with a wrong backward (drops the x*s*(1-s) term).
Var swish_wrong_backward(Tape<double>& tape, Var x) {
  const TensorD& xv = tape.value(x);
  TensorD y(xv.shape(), TensorD::Storage(xv.array() / (1.0 + (-xv.array()).exp())));
  return tape.record("swish_faulty", std::move(y), {x}, [x](Tape<double>& tp, const TensorD& dy) {
    const auto& xa = tp.value(x).array();
    tp.accumulate(x, TensorD(dy.shape(), TensorD::Storage(dy.array() / (1.0 + (-xa).exp()))));
  });
}

GradcheckReport check_faulty(std::uint64_t seed) {
  Rng rng(seed);
  Case c;
  auto& x = c.add("x", random_tensor({8}, rng, 2.0));
  auto fn = c.reduce([&](Tape<double>& t) { return swish_wrong_backward(t, t.parameter(x)); }, rng);
  return gradcheck("swish_faulty", fn, c.pointers(), kSmooth);
}

}  // namespace

std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckSuiteOptions& options) {
  std::vector<std::pair<std::string, CaseFn>> cases = {
      {"conv2d", check_conv2d},
      {"maxpool2d", check_maxpool},
      {"freq_avgpool", check_freq_avgpool},
      {"broadcast_freq", check_broadcast},
      {"batchnorm2d", check_batchnorm},
      {"subspectral_norm", check_subspectral},
      {"freq_instance_norm", check_instance_norm},
      {"swish", check_swish},
      {"relu", check_relu},
      {"dropout", check_dropout},
      {"linear", check_linear},
      {"softmax_cross_entropy", check_cross_entropy},
      {"add", check_add},
      {"to_sequence", check_to_sequence},
      {"mean_over_time", check_mean_over_time},
      {"bc_resblock_normal", [](std::uint64_t s) { return check_block(s, BlockKind::normal); }},
      {"bc_resblock_transition", [](std::uint64_t s) { return check_block(s, BlockKind::transition); }},
  };
  if (options.inject_fault) cases.emplace_back("swish_faulty", check_faulty);

  std::vector<GradcheckReport> reports;
  for (const auto& [name, fn] : cases) {
    std::vector<GradcheckReport> runs;
    for (int s = 0; s < options.seeds; ++s) runs.push_back(fn(static_cast<std::uint64_t>(s)));
    reports.push_back(merge_reports(name, runs));
  }
  return reports;
}

}  // namespace tornet
