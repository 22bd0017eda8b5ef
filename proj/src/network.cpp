#include "tornet/network.hpp"

#include <json.hpp>

namespace tornet {

std::string stride_label(Index2 stride) {
  if (stride.f == stride.t) return std::to_string(stride.f);
  return "(" + std::to_string(stride.f) + ", " + std::to_string(stride.t) + ")";
}

namespace {

std::string kernel_label(Index2 k) { return std::to_string(k.f) + "x" + std::to_string(k.t); }

void check_positive(Index v, const std::string& what) {
  if (v < 1) throw ConfigError(what + " must be positive, got " + std::to_string(v));
}

void check_probability(double p, const std::string& what) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError(what + " must be in [0, 1), got " + std::to_string(p));
}

}  // namespace

ShapeTrace trace_shapes(const ModelConfig& c) {
  check_positive(c.in_channels, "in_channels");
  check_positive(c.n_mels, "n_mels");
  check_positive(c.n_frames, "n_frames");
  check_positive(c.stem_channels, "stem_channels");
  check_positive(c.hidden_dim, "hidden_dim");
  check_probability(c.block_dropout, "block_dropout");
  check_probability(c.head_dropout, "head_dropout");
  if (c.n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (c.n_normal < 0) throw ConfigError("n_normal must be >= 0");
  if (c.norm_eps <= 0) throw ConfigError("norm_eps must be positive");
  if (c.stages.empty()) throw ConfigError("at least one AB stage is required");

  ShapeTrace rows;
  Index ch = c.stem_channels;
  Index f = conv_out_size(c.n_mels, c.stem_kernel.f, 1, c.stem_kernel.f / 2);
  Index t = conv_out_size(c.n_frames, c.stem_kernel.t, 1, c.stem_kernel.t / 2);
  if (f < 1 || t < 1) throw ConfigError("stage1.conv: kernel larger than input");
  rows.push_back({"stage1.conv", "conv2d " + kernel_label(c.stem_kernel), "1", {ch, f, t}, 0});
  if (c.stem_pool.f > f || c.stem_pool.t > t || c.stem_pool.f < 1 || c.stem_pool.t < 1) {
    throw ConfigError("stage1.maxpool: kernel " + kernel_label(c.stem_pool) + " does not fit " + std::to_string(f) +
                      "x" + std::to_string(t));
  }
  f = (f - c.stem_pool.f) / c.stem_pool.f + 1;
  t = (t - c.stem_pool.t) / c.stem_pool.t + 1;
  rows.push_back({"stage1.maxpool", "maxpool " + kernel_label(c.stem_pool), stride_label(c.stem_pool), {ch, f, t}, 0});

  for (std::size_t s = 0; s < c.stages.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(s + 2);
    if (c.stages[s].blocks.empty()) throw ConfigError(prefix + ": stage has no AB blocks");
    const Index in_f = f;
    for (std::size_t j = 0; j < c.stages[s].blocks.size(); ++j) {
      const std::string name = prefix + ".ab" + std::to_string(j + 1);
      const ABBlockSpec spec = c.ab_spec(ch, c.stages[s].blocks[j]);
      f = spec.output_freq(f, name);
      ch = spec.out_channels;
      rows.push_back({name, "AB Block", stride_label(spec.stride), {ch, f, t}, 0});
    }
    if (in_f % f != 0) {
      throw ConfigError(prefix + ".shortcut: cannot max-pool frequency " + std::to_string(in_f) + " onto " +
                        std::to_string(f));
    }
    if (c.stage_instance_norm(s)) rows.push_back({prefix + ".in", "IN", "-", {ch, f, t}, 0});
  }
  rows.push_back({"head.sequence", "reshape", "-", {t, ch * f}, 0});
  rows.push_back({"head.fc1", "linear", "-", {t, c.hidden_dim}, 0});
  rows.push_back({"head.fc2", "linear", "-", {c.n_classes}, 0});
  return rows;
}

void validate(const ModelConfig& config) { (void)trace_shapes(config); }

std::map<std::string, ModelConfig> ablation_configs() {
  std::map<std::string, ModelConfig> out;
  ModelConfig base;
  out["default"] = base;

  ModelConfig no_in = base;
  no_in.variant = "no-instancenorm";
  no_in.use_instance_norm = false;
  out[no_in.variant] = no_in;

  ModelConfig only_trans = base;
  only_trans.variant = "only-transition";
  only_trans.n_normal = 0;
  out[only_trans.variant] = only_trans;

  ModelConfig no_last = base;
  no_last.variant = "no-last-conv";
  no_last.use_last_conv = false;
  out[no_last.variant] = no_last;
  return out;
}

ModelConfig variant_config(const std::string& name) {
  auto all = ablation_configs();
  auto it = all.find(name);
  if (it == all.end()) {
    std::string known;
    for (const auto& [k, v] : all) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown variant '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["variant"] = c.variant;
  j["in_channels"] = c.in_channels;
  j["n_mels"] = c.n_mels;
  j["n_frames"] = c.n_frames;
  j["stem_channels"] = c.stem_channels;
  j["stem_kernel"] = {c.stem_kernel.f, c.stem_kernel.t};
  j["stem_pool"] = {c.stem_pool.f, c.stem_pool.t};
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& s : c.stages) {
    nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
    for (const auto& b : s.blocks) blocks.push_back({{"out_channels", b.out_channels}, {"stride", {b.stride.f, b.stride.t}}});
    stages.push_back({{"blocks", blocks}, {"instance_norm", s.instance_norm}});
  }
  j["stages"] = stages;
  j["ssn_groups"] = c.ssn_groups;
  j["block_dropout"] = c.block_dropout;
  j["n_normal"] = c.n_normal;
  j["use_last_conv"] = c.use_last_conv;
  j["use_instance_norm"] = c.use_instance_norm;
  j["hidden_dim"] = c.hidden_dim;
  j["head_dropout"] = c.head_dropout;
  j["n_classes"] = c.n_classes;
  j["norm_eps"] = c.norm_eps;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    auto pair = [](const nlohmann::json& v) { return Index2{v.at(0).get<Index>(), v.at(1).get<Index>()}; };
    c.variant = j.at("variant").get<std::string>();
    c.in_channels = j.at("in_channels").get<Index>();
    c.n_mels = j.at("n_mels").get<Index>();
    c.n_frames = j.at("n_frames").get<Index>();
    c.stem_channels = j.at("stem_channels").get<Index>();
    c.stem_kernel = pair(j.at("stem_kernel"));
    c.stem_pool = pair(j.at("stem_pool"));
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      StageConfig stage;
      stage.instance_norm = s.at("instance_norm").get<bool>();
      for (const auto& b : s.at("blocks")) stage.blocks.push_back({b.at("out_channels").get<Index>(), pair(b.at("stride"))});
      c.stages.push_back(stage);
    }
    c.ssn_groups = j.at("ssn_groups").get<Index>();
    c.block_dropout = j.at("block_dropout").get<double>();
    c.n_normal = j.at("n_normal").get<Index>();
    c.use_last_conv = j.at("use_last_conv").get<bool>();
    c.use_instance_norm = j.at("use_instance_norm").get<bool>();
    c.hidden_dim = j.at("hidden_dim").get<Index>();
    c.head_dropout = j.at("head_dropout").get<double>();
    c.n_classes = j.at("n_classes").get<Index>();
    c.norm_eps = j.at("norm_eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  validate(c);
  return c;
}

}  // namespace tornet
