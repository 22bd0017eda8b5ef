#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tornet/blocks.hpp"
#include "tornet/layers.hpp"

namespace tornet {

struct ABStageBlock {
  Index out_channels = 0;
  Index2 stride{1, 1};
};

struct StageConfig {
  std::vector<ABStageBlock> blocks;
  bool instance_norm = true;
};

/// Architecture description; the network, its shape trace and its parameter
/// count are all derived from this.
struct ModelConfig {
  std::string variant = "default";
  Index in_channels = 3;
  Index n_mels = 40;
  Index n_frames = 512;
  Index stem_channels = 32;
  Index2 stem_kernel{3, 3};
  Index2 stem_pool{2, 2};
  std::vector<StageConfig> stages{
      {{{64, {2, 1}}, {128, {2, 1}}}, true},
      {{{256, {1, 1}}, {512, {1, 1}}}, true},
  };
  Index ssn_groups = 5;
  double block_dropout = 0.5;
  Index n_normal = 1;
  bool use_last_conv = true;
  bool use_instance_norm = true;
  Index hidden_dim = 128;
  double head_dropout = 0.5;
  Index n_classes = 2;
  double norm_eps = 1e-5;

  ABBlockSpec ab_spec(Index in_channels, const ABStageBlock& b) const {
    ABBlockSpec s;
    s.in_channels = in_channels;
    s.out_channels = b.out_channels;
    s.stride = b.stride;
    s.n_normal = n_normal;
    s.last_conv = use_last_conv;
    s.ssn_groups = ssn_groups;
    s.dropout_p = block_dropout;
    return s;
  }

  bool stage_instance_norm(std::size_t stage) const { return use_instance_norm && stages.at(stage).instance_norm; }
};

/// One row of the layer table: name, operator, stride, output [C,F,T] (or
/// [T,D] / [K] for the head) and the learnable parameters owned by the row.
struct TraceRow {
  std::string name;
  std::string op;
  std::string stride;
  Shape output;
  Index params = 0;
};
using ShapeTrace = std::vector<TraceRow>;

/// Shape trace computed from the config alone. Throws ConfigError naming the
/// first layer whose shapes do not chain.
ShapeTrace trace_shapes(const ModelConfig& config);
void validate(const ModelConfig& config);

/// Named ablation variants: default, no-instancenorm, only-transition, no-last-conv.
std::map<std::string, ModelConfig> ablation_configs();
ModelConfig variant_config(const std::string& name);

std::string stride_label(Index2 stride);

template <typename Scalar>
class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed) {
    validate(config);
    Model m;
    m.config_ = config;
    const Rng init = Rng(seed).stream("init");
    const double eps = config.norm_eps;
    auto& st = m.store_;
    m.stem_conv_ = make_conv(st, init, "stage1.conv", config.in_channels, config.stem_channels, config.stem_kernel,
                             {{1, 1}, {config.stem_kernel.f / 2, config.stem_kernel.t / 2}, 1});
    m.stem_bn_ = make_norm(st, "stage1.bn", config.stem_channels, 1, eps);
    Index channels = config.stem_channels;
    Index freq = config.n_mels / config.stem_pool.f;
    for (std::size_t s = 0; s < config.stages.size(); ++s) {
      Stage stage;
      const std::string prefix = "stage" + std::to_string(s + 2);
      const Index in_channels = channels, in_freq = freq;
      for (std::size_t j = 0; j < config.stages[s].blocks.size(); ++j) {
        const ABBlockSpec spec = config.ab_spec(channels, config.stages[s].blocks[j]);
        stage.blocks.push_back(
            ABBlock<Scalar>::build(st, init, prefix + ".ab" + std::to_string(j + 1), spec, eps));
        freq = spec.output_freq(freq, prefix);
        channels = spec.out_channels;
      }
      stage.shortcut_conv = make_conv(st, init, prefix + ".shortcut.conv", in_channels, channels, {1, 1}, {});
      stage.shortcut_bn = make_norm(st, prefix + ".shortcut.bn", channels, 1, eps);
      stage.shortcut_pool = {in_freq / freq, 1};
      stage.instance_norm = config.stage_instance_norm(s);
      m.stages_.push_back(std::move(stage));
    }
    m.fc1_ = make_linear(st, init, "head.fc1", channels * freq, config.hidden_dim);
    m.fc2_ = make_linear(st, init, "head.fc2", config.hidden_dim, config.n_classes);
    return m;
  }

  /// [B, in_channels, n_mels, n_frames] -> logits [B, n_classes]. When `trace`
  /// is given, appends one row per stage-level layer with its runtime shape.
  Var forward(Context<Scalar>& ctx, Var input, ShapeTrace* trace = nullptr) const {
    Tape<Scalar>& tape = ctx.tape;
    const Shape& in = tape.shape(input);
    if (in.size() != 4 || in[1] != config_.in_channels || in[2] != config_.n_mels || in[3] != config_.n_frames) {
      throw ConfigError("model input must be [B," + std::to_string(config_.in_channels) + "," +
                        std::to_string(config_.n_mels) + "," + std::to_string(config_.n_frames) + "], got " +
                        to_string(in));
    }
    auto note = [&](const std::string& name, const std::string& op, const std::string& stride, Var v) {
      if (!trace) return;
      const Shape& s = tape.shape(v);
      trace->push_back({name, op, stride, Shape(s.begin() + 1, s.end()), 0});
    };
    Var x = relu(tape, apply(ctx, stem_bn_, apply(ctx, stem_conv_, input)));
    note("stage1.conv", "conv2d " + kernel_label(config_.stem_kernel), "1", x);
    x = maxpool2d(tape, x, config_.stem_pool, config_.stem_pool);
    note("stage1.maxpool", "maxpool " + kernel_label(config_.stem_pool), stride_label(config_.stem_pool), x);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const Stage& stage = stages_[s];
      const std::string prefix = "stage" + std::to_string(s + 2);
      Var main = x;
      for (std::size_t j = 0; j < stage.blocks.size(); ++j) {
        main = stage.blocks[j].forward(ctx, main);
        note(prefix + ".ab" + std::to_string(j + 1), "AB Block", stride_label(stage.blocks[j].spec.stride), main);
      }
      Var shortcut = apply(ctx, stage.shortcut_bn, apply(ctx, stage.shortcut_conv, x));
      if (stage.shortcut_pool != Index2{1, 1}) {
        shortcut = maxpool2d(tape, shortcut, stage.shortcut_pool, stage.shortcut_pool);
      }
      if (tape.shape(shortcut) != tape.shape(main)) {
        throw std::logic_error(prefix + ": shortcut " + to_string(tape.shape(shortcut)) + " does not match main path " +
                               to_string(tape.shape(main)));
      }
      x = add(tape, main, shortcut);
      if (stage.instance_norm) {
        x = freq_instance_norm(tape, x, config_.norm_eps);
        note(prefix + ".in", "IN", "-", x);
      }
    }
    x = to_sequence(tape, x);
    note("head.sequence", "reshape", "-", x);
    x = relu(tape, apply(ctx, fc1_, x));
    note("head.fc1", "linear", "-", x);
    if (ctx.mode == Mode::train && config_.head_dropout > 0.0) {
      x = dropout(tape, x, config_.head_dropout, ctx.mode, DropoutStyle::elementwise, ctx.rng());
    }
    x = mean_over_time(tape, x);
    x = apply(ctx, fc2_, x);
    note("head.fc2", "linear", "-", x);
    return x;
  }

  /// Eval-mode logits for a batch, without keeping gradients.
  Tensor<Scalar> logits(const Tensor<Scalar>& batch) {
    Tape<Scalar> tape;
    tape.set_grad_enabled(false);
    Context<Scalar> ctx{tape, store_, Mode::eval, nullptr};
    Var out = forward(ctx, tape.constant(batch));
    return tape.value(out);
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore<Scalar>& store() { return store_; }
  const ParameterStore<Scalar>& store() const { return store_; }
  Index parameter_count() const { return store_.parameter_count(); }

  /// Parameter totals grouped by the first `depth` dot-separated name components.
  std::vector<std::pair<std::string, Index>> parameter_breakdown(int depth = 2) const {
    std::vector<std::pair<std::string, Index>> out;
    for (const auto& p : store_.parameters()) {
      std::string key;
      std::size_t pos = 0;
      for (int d = 0; d < depth; ++d) {
        const std::size_t dot = p.name.find('.', pos);
        if (dot == std::string::npos) break;
        key = p.name.substr(0, dot);
        pos = dot + 1;
      }
      if (out.empty() || out.back().first != key) out.emplace_back(key, 0);
      out.back().second += p.value.size();
    }
    return out;
  }

 private:
  struct Stage {
    std::vector<ABBlock<Scalar>> blocks;
    ConvLayer shortcut_conv;
    NormLayer shortcut_bn;
    Index2 shortcut_pool{1, 1};
    bool instance_norm = true;
  };

  static std::string kernel_label(Index2 k) { return std::to_string(k.f) + "x" + std::to_string(k.t); }

  ModelConfig config_;
  ParameterStore<Scalar> store_;
  ConvLayer stem_conv_;
  NormLayer stem_bn_;
  std::vector<Stage> stages_;
  LinearLayer fc1_;
  LinearLayer fc2_;
};

/// Layer table for a built model: trace_shapes() rows with parameter counts
/// attributed by name prefix (shortcut and BN parameters go to their stage row).
template <typename Scalar>
ShapeTrace layer_table(const Model<Scalar>& model) {
  ShapeTrace rows = trace_shapes(model.config());
  for (const auto& p : model.store().parameters()) {
    TraceRow* owner = nullptr;
    for (auto& r : rows) {
      const std::string key = r.name == "stage1.conv" || r.name == "stage1.maxpool" ? "stage1." : r.name + ".";
      if (p.name.rfind(key, 0) == 0) {
        owner = &r;
        break;
      }
    }
    if (!owner) {
      // stage-level parameters (shortcut) are attributed to the stage's last AB row
      for (auto& r : rows) {
        if (r.op == "AB Block" && p.name.rfind(r.name.substr(0, r.name.find('.')) + ".", 0) == 0) owner = &r;
      }
    }
    if (owner) owner->params += p.value.size();
  }
  return rows;
}

}  // namespace tornet

namespace tornet {

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace tornet
