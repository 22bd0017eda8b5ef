#include <gtest/gtest.h>

#include <regex>
#include <set>

#include "support.hpp"
#include "tornet/network.hpp"

namespace tornet {
namespace {

using testing::random_tensor;

Index count(const std::string& variant) { return Model<float>::build(variant_config(variant), 0).parameter_count(); }

TEST(Network, DefaultTraceMatchesLayerTable) {
  struct Row {
    const char* name;
    const char* op;
    const char* stride;
    Shape output;
  };
  const Row expected[] = {
      {"stage1.conv", "conv2d 3x3", "1", {32, 40, 512}},   {"stage1.maxpool", "maxpool 2x2", "2", {32, 20, 256}},
      {"stage2.ab1", "AB Block", "(2, 1)", {64, 10, 256}}, {"stage2.ab2", "AB Block", "(2, 1)", {128, 5, 256}},
      {"stage2.in", "IN", "-", {128, 5, 256}},             {"stage3.ab1", "AB Block", "1", {256, 5, 256}},
      {"stage3.ab2", "AB Block", "1", {512, 5, 256}},      {"stage3.in", "IN", "-", {512, 5, 256}},
      {"head.sequence", "reshape", "-", {256, 2560}},      {"head.fc1", "linear", "-", {256, 128}},
      {"head.fc2", "linear", "-", {2}},
  };
  const ShapeTrace trace = trace_shapes(ModelConfig{});
  ASSERT_EQ(trace.size(), std::size(expected));
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].name, expected[i].name);
    EXPECT_EQ(trace[i].op, expected[i].op);
    EXPECT_EQ(trace[i].stride, expected[i].stride);
    EXPECT_EQ(trace[i].output, expected[i].output) << trace[i].name;
  }
}

TEST(Network, RuntimeTraceAgreesWithStaticTrace) {
  auto model = Model<float>::build(ModelConfig{}, 0);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  Context<float> ctx{tape, model.store(), Mode::eval, nullptr};
  ShapeTrace runtime;
  Var out = model.forward(ctx, tape.constant(TensorF(Shape{1, 3, 40, 512})), &runtime);
  EXPECT_EQ(tape.shape(out), (Shape{1, 2}));
  const ShapeTrace fixed = trace_shapes(model.config());
  ASSERT_EQ(runtime.size(), fixed.size());
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    EXPECT_EQ(runtime[i].name, fixed[i].name);
    EXPECT_EQ(runtime[i].output, fixed[i].output) << fixed[i].name;
  }
}

TEST(Network, ParameterCounts) {
  const Index full = count("default"), no_last = count("no-last-conv"), only_trans = count("only-transition"),
              no_in = count("no-instancenorm");
  EXPECT_GE(full, 4'000'000);
  EXPECT_LE(full, 5'000'000);
  EXPECT_GE(no_last, 1'000'000);
  EXPECT_LE(no_last, 1'700'000);
  EXPECT_GE(only_trans, 3'600'000);
  EXPECT_LE(only_trans, 4'500'000);
  EXPECT_LT(no_last, only_trans);
  EXPECT_LT(only_trans, full);
  EXPECT_EQ(full, no_in);
  Index closed_form = 0;
  for (Index c : {64, 128, 256, 512}) closed_form += 9 * c * c + 3 * c;
  EXPECT_EQ(full - no_last, closed_form);
}

TEST(Network, StemConvolutionCount) {
  const auto model = Model<float>::build(ModelConfig{}, 0);
  Index stem = 0;
  for (const auto& p : model.store().parameters())
    if (p.name.rfind("stage1.conv.", 0) == 0) stem += p.value.size();
  EXPECT_EQ(stem, 32 * 3 * 3 * 3 + 32);
  EXPECT_EQ(stem, 896);
}

TEST(Network, AblationConfigsDifferOnlyInFlags) {
  const auto configs = ablation_configs();
  ASSERT_EQ(configs.size(), 4u);
  const ModelConfig& base = configs.at("default");
  EXPECT_TRUE(base.use_instance_norm);
  EXPECT_TRUE(base.use_last_conv);
  EXPECT_EQ(base.n_normal, 1);
  EXPECT_FALSE(configs.at("no-instancenorm").use_instance_norm);
  EXPECT_FALSE(configs.at("no-last-conv").use_last_conv);
  EXPECT_EQ(configs.at("only-transition").n_normal, 0);
  for (const auto& [name, c] : configs) {
    ModelConfig reset = c;
    reset.variant = base.variant;
    reset.use_instance_norm = base.use_instance_norm;
    reset.use_last_conv = base.use_last_conv;
    reset.n_normal = base.n_normal;
    EXPECT_EQ(model_config_to_json(reset), model_config_to_json(base)) << name;
  }
  const ShapeTrace no_in = trace_shapes(configs.at("no-instancenorm"));
  for (const auto& row : no_in) EXPECT_NE(row.op, "IN");
  EXPECT_THROW(variant_config("mystery"), ConfigError);
}

TEST(Network, InconsistentConfigNamesLayer) {
  ModelConfig c;
  c.n_mels = 44;  // 22 after pooling, 11 after the first stride: 5 sub-bands no longer divide
  try {
    validate(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage2"), std::string::npos) << e.what();
  }
  ModelConfig k;
  k.n_classes = 1;
  EXPECT_THROW(validate(k), ConfigError);
  ModelConfig t;
  t.stages[0].blocks[0].stride = {2, 2};
  EXPECT_THROW(validate(t), ConfigError);
}

TEST(Network, SameSeedSameParameters) {
  const auto a = Model<float>::build(ModelConfig{}, 17), b = Model<float>::build(ModelConfig{}, 17),
             c = Model<float>::build(ModelConfig{}, 18);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.store().parameters().size(); ++i) {
    const auto& pa = a.store().parameters()[i];
    const auto& pb = b.store().parameters()[i];
    EXPECT_EQ(pa.name, pb.name);
    EXPECT_TRUE((pa.value.array() == pb.value.array()).all()) << pa.name;
    any_diff = any_diff || (pa.value.array() != c.store().parameters()[i].value.array()).any();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Network, ParameterNamesFollowConvention) {
  const auto model = Model<float>::build(ModelConfig{}, 0);
  const std::regex pattern(
      R"(stage1\.(conv|bn)\.(weight|bias|gamma|beta)|)"
      R"(stage[23]\.ab[12]\.(trans|norm\d+)\.(proj|proj_bn|dw_f|ssn|dw_t|bn|pw)\.(weight|bias|gamma|beta)|)"
      R"(stage[23]\.ab[12]\.(last_conv|last_bn)\.(weight|bias|gamma|beta)|)"
      R"(stage[23]\.shortcut\.(conv|bn)\.(weight|bias|gamma|beta)|)"
      R"(head\.fc[12]\.(weight|bias))");
  std::set<std::string> names;
  for (const auto& [name, tensor] : model.store().named_tensors()) {
    EXPECT_TRUE(names.insert(name).second) << name;
    const bool stats = name.ends_with(".running_mean") || name.ends_with(".running_var");
    if (!stats) EXPECT_TRUE(std::regex_match(name, pattern)) << name;
  }
  EXPECT_TRUE(names.count("stage2.ab1.trans.pw.weight"));
  EXPECT_TRUE(names.count("stage3.ab2.norm1.ssn.gamma"));
}

TEST(Network, ForwardShapeAndEvalDeterminism) {
  auto model = Model<float>::build(ModelConfig{}, 3);
  Rng rng(3);
  const TensorF x = random_tensor<float>({2, 3, 40, 512}, rng, 5.0);
  const TensorF a = model.logits(x), b = model.logits(x);
  EXPECT_EQ(a.shape(), (Shape{2, 2}));
  EXPECT_TRUE((a.array() == b.array()).all());
  EXPECT_THROW(model.logits(TensorF(Shape{1, 1, 40, 512})), ConfigError);
}

TEST(Network, FiniteLogitsAcrossHundredSeeds) {
  auto model = Model<float>::build(ModelConfig{}, 0);
  const Index batch = 20;
  for (int chunk = 0; chunk < 5; ++chunk) {
    TensorF x(Shape{batch, 3, 40, 512});
    for (Index i = 0; i < batch; ++i) {
      Rng rng(static_cast<std::uint64_t>(chunk * batch + i));
      // log-mel-like scale: values around -14 .. 2
      for (Index j = 0; j < 3 * 40 * 512; ++j) x[i * 3 * 40 * 512 + j] = static_cast<float>(rng.uniform(-14.0, 2.0));
    }
    EXPECT_TRUE(model.logits(x).all_finite()) << "chunk " << chunk;
  }
}

TEST(Network, GradientReachesEveryParameter) {
  auto model = Model<float>::build(ModelConfig{}, 5);
  Rng rng(5), drop(6);
  const TensorF x = random_tensor<float>({2, 3, 40, 512}, rng, 3.0);
  model.store().zero_grad();
  Tape<float> tape;
  Context<float> ctx{tape, model.store(), Mode::train, &drop};
  const std::vector<int> labels{0, 1};
  tape.backward(softmax_cross_entropy(tape, model.forward(ctx, tape.constant(x)), labels));
  for (const auto& p : model.store().parameters()) {
    EXPECT_GT(p.grad.array().abs().maxCoeff(), 0.0f) << p.name;
  }
}

TEST(Network, ConfigJsonRoundTrip) {
  for (const auto& [name, c] : ablation_configs()) {
    const std::string text = model_config_to_json(c);
    EXPECT_EQ(model_config_to_json(model_config_from_json(text)), text) << name;
  }
}

}  // namespace
}  // namespace tornet
