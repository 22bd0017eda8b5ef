#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tornet/autodiff.hpp"
#include "tornet/ops.hpp"
#include "tornet/rng.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

/// Owns a model's parameters and running statistics. Element addresses are
/// stable (deque), so tapes may hold raw pointers during a forward pass.
template <typename Scalar>
class ParameterStore {
 public:
  std::size_t add(const std::string& name, Tensor<Scalar> value) {
    claim(name);
    params_.emplace_back(name, std::move(value));
    return params_.size() - 1;
  }

  /// Registers `<name>.running_mean` / `<name>.running_var` buffers.
  std::size_t add_stats(const std::string& name, Index n) {
    claim(name + ".running_mean");
    claim(name + ".running_var");
    stats_.emplace_back(n);
    stats_names_.push_back(name);
    return stats_.size() - 1;
  }

  Parameter<Scalar>& param(std::size_t i) { return params_.at(i); }
  const Parameter<Scalar>& param(std::size_t i) const { return params_.at(i); }
  RunningStats<Scalar>& stats(std::size_t i) { return stats_.at(i); }
  const RunningStats<Scalar>& stats(std::size_t i) const { return stats_.at(i); }

  std::deque<Parameter<Scalar>>& parameters() { return params_; }
  const std::deque<Parameter<Scalar>>& parameters() const { return params_; }

  /// Learnable scalars only; running statistics are excluded.
  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Every persisted tensor (parameters then running statistics) in registration order.
  std::vector<std::pair<std::string, const Tensor<Scalar>*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor<Scalar>*>> out;
    for (const auto& p : params_) out.emplace_back(p.name, &p.value);
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      out.emplace_back(stats_names_[i] + ".running_mean", &stats_[i].mean);
      out.emplace_back(stats_names_[i] + ".running_var", &stats_[i].var);
    }
    return out;
  }

  /// Mutable lookup of any persisted tensor by name; nullptr when absent.
  Tensor<Scalar>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p.value;
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      if (stats_names_[i] + ".running_mean" == name) return &stats_[i].mean;
      if (stats_names_[i] + ".running_var" == name) return &stats_[i].var;
    }
    return nullptr;
  }

 private:
  void claim(const std::string& name) {
    if (!names_.emplace(name, true).second) throw ConfigError("duplicate parameter name " + name);
  }

  std::deque<Parameter<Scalar>> params_;
  std::deque<RunningStats<Scalar>> stats_;
  std::vector<std::string> stats_names_;
  std::map<std::string, bool> names_;
};

/// Everything a forward pass needs besides the input.
template <typename Scalar>
struct Context {
  Tape<Scalar>& tape;
  ParameterStore<Scalar>& store;
  Mode mode = Mode::eval;
  Rng* dropout_rng = nullptr;

  Var param(std::size_t i) { return tape.parameter(store.param(i)); }

  Rng& rng() {
    if (!dropout_rng) throw std::logic_error("train-mode forward needs a dropout RNG");
    return *dropout_rng;
  }
};

/// Kaiming-uniform (fan-in, ReLU gain) initializer: U(-b, b), b = sqrt(6 / fan_in).
template <typename Scalar>
Tensor<Scalar> kaiming_uniform(Shape shape, Index fan_in, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  return t;
}

struct ConvLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
  Conv2dOptions options;
};

template <typename Scalar>
ConvLayer make_conv(ParameterStore<Scalar>& store, const Rng& init, const std::string& name, Index cin, Index cout,
                    Index2 kernel, Conv2dOptions options) {
  const Index cin_g = cin / options.groups;
  ConvLayer layer;
  Rng rng = init.stream(name + ".weight");
  layer.weight = store.add(name + ".weight",
                           kaiming_uniform<Scalar>({cout, cin_g, kernel.f, kernel.t}, cin_g * kernel.f * kernel.t, rng));
  layer.bias = store.add(name + ".bias", Tensor<Scalar>(Shape{cout}));
  layer.options = options;
  return layer;
}

template <typename Scalar>
Var apply(Context<Scalar>& ctx, const ConvLayer& layer, Var x) {
  return conv2d(ctx.tape, x, ctx.param(layer.weight), ctx.param(layer.bias), layer.options);
}

/// Batch norm over `groups` frequency sub-bands (groups == 1: batchnorm2d).
struct NormLayer {
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::size_t stats = 0;
  Index groups = 1;
  double eps = 1e-5;
};

template <typename Scalar>
NormLayer make_norm(ParameterStore<Scalar>& store, const std::string& name, Index channels, Index groups = 1,
                    double eps = 1e-5) {
  NormLayer layer;
  layer.gamma = store.add(name + ".gamma", Tensor<Scalar>(Shape{channels * groups}, Scalar(1)));
  layer.beta = store.add(name + ".beta", Tensor<Scalar>(Shape{channels * groups}));
  layer.stats = store.add_stats(name, channels * groups);
  layer.groups = groups;
  layer.eps = eps;
  return layer;
}

template <typename Scalar>
Var apply(Context<Scalar>& ctx, const NormLayer& layer, Var x) {
  return subband_batchnorm(ctx.tape, x, ctx.param(layer.gamma), ctx.param(layer.beta), layer.groups, ctx.mode,
                           &ctx.store.stats(layer.stats), layer.eps);
}

struct LinearLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

template <typename Scalar>
LinearLayer make_linear(ParameterStore<Scalar>& store, const Rng& init, const std::string& name, Index din, Index dout) {
  LinearLayer layer;
  Rng rng = init.stream(name + ".weight");
  layer.weight = store.add(name + ".weight", kaiming_uniform<Scalar>({dout, din}, din, rng));
  layer.bias = store.add(name + ".bias", Tensor<Scalar>(Shape{dout}));
  return layer;
}

template <typename Scalar>
Var apply(Context<Scalar>& ctx, const LinearLayer& layer, Var x) {
  return linear(ctx.tape, x, ctx.param(layer.weight), ctx.param(layer.bias));
}

}  // namespace tornet
