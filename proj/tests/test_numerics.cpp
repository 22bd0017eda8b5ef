#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"
#include "tornet/gradcheck.hpp"
#include "tornet/ops.hpp"

namespace tornet {
namespace {

using testing::random_tensor;

/// Direct sliding-window cross-correlation with zero padding and groups.
TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD& b, const Conv2dOptions& o) {
  const Index N = x.dim(0), F = x.dim(2), T = x.dim(3);
  const Index K = w.dim(0), Cg = w.dim(1), kf = w.dim(2), kt = w.dim(3);
  const Index Fo = (F + 2 * o.padding.f - kf) / o.stride.f + 1;
  const Index To = (T + 2 * o.padding.t - kt) / o.stride.t + 1;
  const Index Kg = K / o.groups;
  TensorD y(Shape{N, K, Fo, To});
  for (Index n = 0; n < N; ++n)
    for (Index k = 0; k < K; ++k)
      for (Index fo = 0; fo < Fo; ++fo)
        for (Index to = 0; to < To; ++to) {
          double s = b[k];
          for (Index c = 0; c < Cg; ++c)
            for (Index i = 0; i < kf; ++i)
              for (Index j = 0; j < kt; ++j) {
                const Index f = fo * o.stride.f - o.padding.f + i, t = to * o.stride.t - o.padding.t + j;
                if (f < 0 || f >= F || t < 0 || t >= T) continue;
                s += w(k, c, i, j) * x(n, (k / Kg) * Cg + c, f, t);
              }
          y(n, k, fo, to) = s;
        }
  return y;
}

TEST(Conv2d, PointwiseScaling) {
  TensorD x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  TensorD w(Shape{1, 1, 1, 1}, {2});
  TensorD b(Shape{1});
  const TensorD y = conv2d_forward(x, w, b, {});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y(0, 0, 0, 0), 2);
  EXPECT_EQ(y(0, 0, 0, 1), 4);
  EXPECT_EQ(y(0, 0, 1, 0), 6);
  EXPECT_EQ(y(0, 0, 1, 1), 8);
}

TEST(Conv2d, AllOnesWithPadding) {
  TensorD x(Shape{1, 1, 3, 3}, 1.0), w(Shape{1, 1, 3, 3}, 1.0), b(Shape{1});
  const TensorD y = conv2d_forward(x, w, b, {{1, 1}, {1, 1}, 1});
  const TensorD oracle = naive_conv(x, w, b, {{1, 1}, {1, 1}, 1});
  EXPECT_EQ(y(0, 0, 1, 1), 9);
  EXPECT_EQ(y(0, 0, 0, 0), 4);
  EXPECT_EQ(oracle(0, 0, 1, 1), 9);
  EXPECT_EQ(oracle(0, 0, 0, 0), 4);
}

TEST(Conv2d, DepthwiseFrequencyStrideShape) {
  Rng rng(1);
  const TensorD x = random_tensor({1, 32, 20, 256}, rng);
  const TensorD w = random_tensor({32, 1, 3, 1}, rng);
  const TensorD y = conv2d_forward(x, w, TensorD(Shape{32}), {{2, 1}, {1, 0}, 32});
  EXPECT_EQ(y.shape(), (Shape{1, 32, 10, 256}));
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
  struct Case {
    Index cin, cout, f, t, kf, kt;
    Conv2dOptions opt;
  };
  const Case cases[] = {
      {3, 4, 6, 7, 3, 3, {{1, 1}, {1, 1}, 1}}, {4, 4, 8, 5, 3, 1, {{2, 1}, {1, 0}, 4}},
      {4, 4, 3, 9, 1, 3, {{1, 1}, {0, 1}, 4}}, {5, 6, 4, 4, 1, 1, {}},
      {4, 6, 7, 6, 3, 2, {{2, 3}, {1, 1}, 2}}, {2, 2, 5, 5, 3, 3, {{1, 2}, {0, 0}, 1}},
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& c : cases) {
      Rng rng(seed);
      const TensorD x = random_tensor({2, c.cin, c.f, c.t}, rng);
      const TensorD w = random_tensor({c.cout, c.cin / c.opt.groups, c.kf, c.kt}, rng);
      const TensorD b = random_tensor({c.cout}, rng);
      const TensorD y = conv2d_forward(x, w, b, c.opt);
      const TensorD ref = naive_conv(x, w, b, c.opt);
      ASSERT_EQ(y.shape(), ref.shape());
      EXPECT_LT((y.array() - ref.array()).abs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Conv2d, DepthwisePointwiseIsPerChannelScale) {
  Rng rng(3);
  const TensorD x = random_tensor({2, 3, 4, 5}, rng);
  TensorD w(Shape{3, 1, 1, 1}, {0.5, -2.0, 3.0});
  const TensorD y = conv2d_forward(x, w, TensorD(Shape{3}), {{1, 1}, {0, 0}, 3});
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index f = 0; f < 4; ++f)
        for (Index t = 0; t < 5; ++t) EXPECT_EQ(y(n, c, f, t), w[c] * x(n, c, f, t));
}

TEST(Conv2d, GroupMismatchNamesDimensions) {
  TensorD x(Shape{1, 3, 4, 4}), w(Shape{4, 1, 3, 3}), b(Shape{4});
  try {
    conv2d_forward(x, w, b, {{1, 1}, {1, 1}, 2});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find('3'), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv2d_forward(x, TensorD(Shape{4, 3, 7, 7}), b, {}), ConfigError);
}

TEST(Maxpool, Examples) {
  const auto pool = [](TensorD x, Index2 k) {
    return testing::eval_op<double>([&](Tape<double>& t) { return maxpool2d(t, t.constant(x), k, k); });
  };
  const TensorD y = pool(TensorD(Shape{1, 1, 2, 2}, {1, 2, 3, 4}), {2, 2});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 4);
  const TensorD c = pool(TensorD(Shape{1, 2, 4, 6}, 2.5), {2, 2});
  EXPECT_TRUE((c.array() == 2.5).all());
  EXPECT_EQ(pool(TensorD(Shape{1, 1, 40, 512}), {2, 2}).shape(), (Shape{1, 1, 20, 256}));
  EXPECT_THROW(pool(TensorD(Shape{1, 1, 2, 2}), {3, 3}), ConfigError);
}

TEST(Maxpool, TieRoutesGradientToFirstMaximum) {
  Tape<double> tape;
  Var x = tape.variable(TensorD(Shape{1, 1, 2, 2}, 1.0));
  Var y = maxpool2d(tape, x, {2, 2}, {2, 2});
  tape.backward(y);
  const TensorD g = tape.grad(x);
  EXPECT_EQ(g[0], 1);
  EXPECT_EQ(g[1] + g[2] + g[3], 0);
}

TEST(FreqPooling, AverageAndBroadcast) {
  const TensorD col(Shape{1, 1, 5, 1}, {1, 2, 3, 4, 5});
  const TensorD m = testing::eval_op<double>([&](Tape<double>& t) { return freq_avgpool(t, t.constant(col)); });
  EXPECT_EQ(m.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(m[0], 3);
  const TensorD two = testing::eval_op<double>(
      [&](Tape<double>& t) { return freq_avgpool(t, t.constant(TensorD(Shape{1, 1, 2, 1}, {1, 3}))); });
  EXPECT_EQ(two[0], 2);

  const TensorD row(Shape{1, 1, 1, 2}, {5, 6});
  const TensorD b = testing::eval_op<double>([&](Tape<double>& t) { return broadcast_freq(t, t.constant(row), 3); });
  EXPECT_EQ(b.shape(), (Shape{1, 1, 3, 2}));
  for (Index f = 0; f < 3; ++f) {
    EXPECT_EQ(b(0, 0, f, 0), 5);
    EXPECT_EQ(b(0, 0, f, 1), 6);
  }
  const TensorD id = testing::eval_op<double>([&](Tape<double>& t) { return broadcast_freq(t, t.constant(row), 1); });
  EXPECT_TRUE((id.array() == row.array()).all());
}

TEST(FreqPooling, AverageOfBroadcastIsIdentityAndProjection) {
  Rng rng(5);
  const TensorD x = random_tensor({2, 3, 1, 4}, rng);
  const TensorD back = testing::eval_op<double>(
      [&](Tape<double>& t) { return freq_avgpool(t, broadcast_freq(t, t.constant(x), 7)); });
  EXPECT_LT((back.array() - x.array()).abs().maxCoeff(), 1e-15);

  const TensorD z = random_tensor({2, 3, 6, 4}, rng);
  const auto project = [](Tape<double>& t, Var v) { return broadcast_freq(t, freq_avgpool(t, v), 6); };
  const TensorD once = testing::eval_op<double>([&](Tape<double>& t) { return project(t, t.constant(z)); });
  const TensorD twice =
      testing::eval_op<double>([&](Tape<double>& t) { return project(t, project(t, t.constant(z))); });
  EXPECT_LT((once.array() - twice.array()).abs().maxCoeff(), 1e-14);
}

TensorD bn_train(const TensorD& x, const TensorD& gamma, const TensorD& beta, double eps,
                 RunningStats<double>* stats = nullptr) {
  return testing::eval_op<double>([&](Tape<double>& t) {
    return batchnorm2d(t, t.constant(x), t.constant(gamma), t.constant(beta), Mode::train, stats, eps);
  });
}

TEST(BatchNorm, Examples) {
  const TensorD constant(Shape{2, 1, 2, 3}, 4.0);
  EXPECT_LT(bn_train(constant, TensorD(Shape{1}, 1.0), TensorD(Shape{1}), 1e-5).array().abs().maxCoeff(), 1e-12);

  Rng rng(2);
  const TensorD x = random_tensor({2, 2, 3, 3}, rng);
  const TensorD out = bn_train(x, TensorD(Shape{2}), TensorD(Shape{2}, {0.25, -1.5}), 1e-5);
  for (Index n = 0; n < 2; ++n)
    for (Index f = 0; f < 3; ++f)
      for (Index t = 0; t < 3; ++t) {
        EXPECT_EQ(out(n, 0, f, t), 0.25);
        EXPECT_EQ(out(n, 1, f, t), -1.5);
      }

  const TensorD pair = bn_train(TensorD(Shape{2, 1, 1, 1}, {1, 3}), TensorD(Shape{1}, 1.0), TensorD(Shape{1}), 1e-12);
  EXPECT_NEAR(pair[0], -1.0, 1e-9);
  EXPECT_NEAR(pair[1], 1.0, 1e-9);
}

TEST(BatchNorm, RunningStatisticsAndEvalMode) {
  RunningStats<double> stats(1);
  bn_train(TensorD(Shape{2, 1, 1, 1}, {1, 3}), TensorD(Shape{1}, 1.0), TensorD(Shape{1}), 1e-5, &stats);
  // momentum 0.1 on mean 2 and unbiased variance 2
  EXPECT_NEAR(stats.mean[0], 0.2, 1e-12);
  EXPECT_NEAR(stats.var[0], 1.1, 1e-12);

  RunningStats<double> fresh(1);
  const TensorD x(Shape{1, 1, 1, 2}, {0.5, -2.0});
  const TensorD y = testing::eval_op<double>([&](Tape<double>& t) {
    return batchnorm2d(t, t.constant(x), t.constant(TensorD(Shape{1}, 1.0)), t.constant(TensorD(Shape{1})), Mode::eval,
                       &fresh, 1e-5);
  });
  EXPECT_NEAR(y[0], 0.5 / std::sqrt(1 + 1e-5), 1e-12);
  EXPECT_NEAR(y[1], -2.0 / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(Activations, Examples) {
  const TensorD x(Shape{4}, {0, 1, -1, 2.5});
  const TensorD s = testing::eval_op<double>([&](Tape<double>& t) { return swish(t, t.constant(x)); });
  const TensorD r = testing::eval_op<double>([&](Tape<double>& t) { return relu(t, t.constant(x)); });
  EXPECT_EQ(s[0], 0);
  EXPECT_NEAR(s[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(s[1], 0.73105857, 1e-8);
  EXPECT_EQ(r[2], 0);
  EXPECT_EQ(r[0], 0);
  EXPECT_EQ(r[1], 1);
  EXPECT_EQ(r[3], 2.5);
}

TEST(Dropout, IdentityCases) {
  Rng rng(0), data(9);
  const TensorD x = random_tensor({2, 3, 4}, data);
  for (auto [p, mode] : {std::pair{0.0, Mode::train}, {0.0, Mode::eval}, {0.5, Mode::eval}}) {
    const TensorD y = testing::eval_op<double>(
        [&](Tape<double>& t) { return dropout(t, t.constant(x), p, mode, DropoutStyle::channel, rng); });
    EXPECT_TRUE((y.array() == x.array()).all());
  }
  EXPECT_THROW(testing::eval_op<double>([&](Tape<double>& t) {
                 return dropout(t, t.constant(x), 1.0, Mode::train, DropoutStyle::elementwise, rng);
               }),
               ConfigError);
}

TEST(Dropout, ChannelStyleIsUnbiasedMonteCarlo) {
  const TensorD x(Shape{1, 2, 1, 3}, {1, 2, 3, 4, 5, 6});
  Rng rng(11);
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(6);
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    const TensorD y = testing::eval_op<double>(
        [&](Tape<double>& t) { return dropout(t, t.constant(x), 0.5, Mode::train, DropoutStyle::channel, rng); });
    // a channel is either fully kept or fully dropped
    EXPECT_TRUE((y(0, 0, 0, 0) == 0) == (y(0, 0, 0, 2) == 0));
    sum += y.array();
  }
  const Eigen::ArrayXd mean = sum / trials;
  EXPECT_NEAR(mean.mean(), x.array().mean(), 0.05 * x.array().mean());
  for (Index i = 0; i < 6; ++i) EXPECT_NEAR(mean[i], x[i], 0.05 * x[i]);
}

TEST(Linear, Examples) {
  const auto lin = [](TensorD x, TensorD w, TensorD b) {
    return testing::eval_op<double>(
        [&](Tape<double>& t) { return linear(t, t.constant(x), t.constant(w), t.constant(b)); });
  };
  const TensorD y = lin(TensorD(Shape{1, 2}, {1, 2}), TensorD(Shape{2, 2}, {1, 1, 1, -1}), TensorD(Shape{2}));
  EXPECT_EQ(y[0], 3);
  EXPECT_EQ(y[1], -1);
  Rng rng(4);
  const TensorD x = random_tensor({2, 3, 4}, rng);
  const TensorD id = lin(x, TensorD(Shape{4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}), TensorD(Shape{4}));
  EXPECT_EQ(id.shape(), x.shape());
  EXPECT_TRUE((id.array() == x.array()).all());
  const TensorD bias = lin(x, TensorD(Shape{2, 4}), TensorD(Shape{2}, {0.5, -3}));
  EXPECT_EQ(bias.shape(), (Shape{2, 3, 2}));
  for (Index i = 0; i < 6; ++i) {
    EXPECT_EQ(bias[2 * i], 0.5);
    EXPECT_EQ(bias[2 * i + 1], -3);
  }
  EXPECT_THROW(lin(x, TensorD(Shape{2, 3}), TensorD(Shape{2})), ConfigError);
}

double cross_entropy(const TensorD& logits, std::vector<int> labels) {
  return testing::eval_op<double>([&](Tape<double>& t) {
    return softmax_cross_entropy(t, t.constant(logits), labels);
  })[0];
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(TensorD(Shape{1, 2}, {0, 0}), {0}), std::log(2.0), 1e-15);
  EXPECT_NEAR(cross_entropy(TensorD(Shape{1, 2}, {100, -100}), {0}), 0.0, 1e-12);
  EXPECT_NEAR(cross_entropy(TensorD(Shape{1, 2}, {1, 0}), {0}), -std::log(std::exp(1.0) / (std::exp(1.0) + 1)), 1e-15);
  EXPECT_NEAR(cross_entropy(TensorD(Shape{1, 2}, {1, 0}), {0}), 0.31326, 1e-5);
  EXPECT_THROW(cross_entropy(TensorD(Shape{1, 2}), {2}), ConfigError);
}

TEST(CrossEntropy, ShiftInvariant) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const TensorD logits = random_tensor({5, 3}, rng, 4.0);
    std::vector<int> labels(5);
    for (auto& y : labels) y = static_cast<int>(rng.below(3));
    const double c = rng.uniform(-50, 50);
    TensorD shifted = logits;
    shifted.array() += c;
    EXPECT_NEAR(cross_entropy(logits, labels), cross_entropy(shifted, labels), 1e-10);
  }
}

TEST(Tape, NonFiniteValuesAreErrors) {
  Tape<double> tape;
  Var x = tape.constant(TensorD(Shape{2}, {1.0, std::numeric_limits<double>::quiet_NaN()}));
  EXPECT_THROW(relu(tape, x), NumericError);
}

TEST(Gradcheck, Examples) {
  Rng rng(21);
  Parameter<double> x("x", random_tensor({3, 4}, rng)), w("w", random_tensor({2, 4}, rng)), b("b", random_tensor({2}, rng));
  const TensorD proj = random_tensor({3, 2}, rng);
  auto lin = gradcheck(
      "linear",
      [&](Tape<double>& t) {
        return weighted_sum(t, linear(t, t.parameter(x), t.parameter(w), t.parameter(b)), proj);
      },
      {&x, &w, &b}, 1e-5);
  EXPECT_TRUE(lin.passed) << lin.max_rel_error;

  Parameter<double> v("v", random_tensor({10}, rng, 3.0));
  const TensorD pv = random_tensor({10}, rng);
  auto sw = gradcheck("swish", [&](Tape<double>& t) { return weighted_sum(t, swish(t, t.parameter(v)), pv); }, {&v}, 1e-5);
  EXPECT_TRUE(sw.passed) << sw.max_rel_error;

  Parameter<double> r("r", TensorD(Shape{6}, {0.3, -0.2, 1.5, -2.0, 0.11, -0.7}));
  auto re = gradcheck("relu", [&](Tape<double>& t) { return weighted_sum(t, relu(t, t.parameter(r)), TensorD(Shape{6}, {1, 2, 3, 4, 5, 6})); }, {&r}, 1e-4);
  EXPECT_TRUE(re.passed) << re.max_rel_error;
}

TEST(Gradcheck, ReportsInsteadOfThrowing) {
  Parameter<double> x("x", TensorD(Shape{2}, 1.0));
  auto rep = gradcheck("bad", [&](Tape<double>& t) { return relu(t, t.parameter(x)); }, {&x}, 1e-5);
  EXPECT_FALSE(rep.passed);
  EXPECT_FALSE(rep.message.empty());
}

TEST(Gradcheck, SuiteCoversEveryOpOncePerSeedSet) {
  const auto reports = run_gradcheck_suite({20, false});
  std::set<std::string> names;
  for (const auto& r : reports) {
    EXPECT_TRUE(names.insert(r.name).second) << "duplicate " << r.name;
    EXPECT_TRUE(r.passed) << r.name << " err " << r.max_rel_error << " " << r.message;
    EXPECT_GE(r.seeds, 20) << r.name;
  }
  for (const char* op : {"conv2d", "maxpool2d", "freq_avgpool", "broadcast_freq", "batchnorm2d", "subspectral_norm",
                         "freq_instance_norm", "swish", "relu", "dropout", "linear", "softmax_cross_entropy", "add",
                         "to_sequence", "mean_over_time", "bc_resblock_normal"}) {
    EXPECT_TRUE(names.count(op)) << op;
  }
  const auto faulty = run_gradcheck_suite({2, true});
  EXPECT_TRUE(std::any_of(faulty.begin(), faulty.end(), [](const auto& r) { return !r.passed; }));
}

}  // namespace
}  // namespace tornet
