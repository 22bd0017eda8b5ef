// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "support.hpp"
#include "tornet/checkpoint.hpp"
#include "tornet/gradcheck.hpp"
#include "tornet/metrics.hpp"
#include "tornet/network.hpp"
#include "tornet/train.hpp"

namespace tornet {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  std::printf("%s  C%d %s:%s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.str().c_str(),
              seconds_since(t0));
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

void shape_trace(Outcome& o) {
  struct Row {
    const char* op;
    const char* stride;
    Shape output;
  };
  const Row table[] = {
      {"conv2d 3x3", "1", {32, 40, 512}}, {"maxpool 2x2", "2", {32, 20, 256}}, {"AB Block", "(2, 1)", {64, 10, 256}},
      {"AB Block", "(2, 1)", {128, 5, 256}}, {"IN", "-", {128, 5, 256}},     {"AB Block", "1", {256, 5, 256}},
      {"AB Block", "1", {512, 5, 256}},      {"IN", "-", {512, 5, 256}},     {"reshape", "-", {256, 2560}},
      {"linear", "-", {256, 128}},           {"linear", "-", {2}},
  };
  const auto t0 = Clock::now();
  validate(ModelConfig{});
  const ShapeTrace trace = trace_shapes(ModelConfig{});
  const double secs = seconds_since(t0);
  o.check(trace.size() == std::size(table), "row count " + std::to_string(trace.size()));
  int matched = 0;
  for (std::size_t i = 0; i < std::min(trace.size(), std::size(table)); ++i) {
    const bool ok = trace[i].op == table[i].op && trace[i].stride == table[i].stride && trace[i].output == table[i].output;
    o.check(ok, trace[i].name + " = " + trace[i].op + " / " + trace[i].stride + " / " + to_string(trace[i].output));
    matched += ok;
  }
  o.check(secs < 1.0, "runtime");
  o.detail << " " << matched << "/" << std::size(table) << " rows match";
}

void parameter_counts(Outcome& o) {
  const auto t0 = Clock::now();
  std::map<std::string, Index> n;
  for (const auto& [name, config] : ablation_configs()) n[name] = Model<float>::build(config, 0).parameter_count();
  const double secs = seconds_since(t0);
  const Index full = n["default"], no_last = n["no-last-conv"], only_trans = n["only-transition"],
              no_in = n["no-instancenorm"];
  o.check(full >= 4'000'000 && full <= 5'000'000, "full in [4.0, 5.0] M");
  o.check(no_last >= 1'000'000 && no_last <= 1'700'000, "no-last-conv in [1.0, 1.7] M");
  o.check(only_trans >= 3'600'000 && only_trans <= 4'500'000, "only-transition in [3.6, 4.5] M");
  o.check(no_last < only_trans && only_trans < full, "ordering");
  o.check(no_in == full, "instance norm adds parameters");
  o.check(secs < 1.0, "runtime");
  o.detail << " full " << full << ", no-last-conv " << no_last << ", only-transition " << only_trans
           << ", no-instancenorm " << no_in;
}

void last_conv_closed_form(Outcome& o) {
  const Index full = Model<float>::build(variant_config("default"), 0).parameter_count();
  const Index no_last = Model<float>::build(variant_config("no-last-conv"), 0).parameter_count();
  Index expected = 0;
  for (Index c : {64, 128, 256, 512}) expected += 9 * c * c + 3 * c;
  o.check(full - no_last == expected, "difference");
  o.detail << " difference " << full - no_last << ", sum(9c^2+3c) " << expected;
}

void gradcheck_all(Outcome& o) {
  const auto t0 = Clock::now();
  const auto reports = run_gradcheck_suite({20, false});
  const double secs = seconds_since(t0);
  bool block = false;
  int min_seeds = 1 << 30;
  double worst = 0;
  for (const auto& r : reports) {
    o.check(r.passed, r.name + " error " + std::to_string(r.max_rel_error) + " " + r.message);
    o.check(r.tolerance <= 1e-4, r.name + " tolerance");
    min_seeds = std::min(min_seeds, r.seeds);
    worst = std::max(worst, r.max_rel_error / r.tolerance);
    block = block || r.name == "bc_resblock_normal";
  }
  o.check(block, "normal block missing");
  o.check(min_seeds >= 20, "seeds");
  o.check(secs < 120, "runtime");
  o.detail << " " << reports.size() << " checks, >= " << min_seeds << " seeds each, worst error/tolerance "
           << worst;
}

void normalization_invariants(Outcome& o) {
  const double eps = 1e-5;
  RunningStats<double>* const no_stats = nullptr;
  double worst_mean = 0, worst_var = 0, worst_ssn = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const TensorD x = testing::random_tensor({2, 6, 5, 9}, rng, 0.1 + 0.5 * static_cast<double>(seed));
    const TensorD y = testing::eval_op<double>([&](Tape<double>& t) { return freq_instance_norm(t, t.constant(x), eps); });
    const Index m = 6 * 9;
    for (Index n = 0; n < 2; ++n)
      for (Index f = 0; f < 5; ++f) {
        double mx = 0, my = 0;
        for (Index c = 0; c < 6; ++c)
          for (Index t = 0; t < 9; ++t) mx += x(n, c, f, t), my += y(n, c, f, t);
        mx /= static_cast<double>(m), my /= static_cast<double>(m);
        double vx = 0, vy = 0;
        for (Index c = 0; c < 6; ++c)
          for (Index t = 0; t < 9; ++t) {
            vx += (x(n, c, f, t) - mx) * (x(n, c, f, t) - mx);
            vy += (y(n, c, f, t) - my) * (y(n, c, f, t) - my);
          }
        vx /= static_cast<double>(m), vy /= static_cast<double>(m);
        worst_mean = std::max(worst_mean, std::abs(my));
        worst_var = std::max(worst_var, std::abs(vy - vx / (vx + eps)));
      }
    const TensorD gamma = testing::random_tensor({6}, rng), beta = testing::random_tensor({6}, rng);
    const TensorD ssn = testing::eval_op<double>([&](Tape<double>& t) {
      return subspectral_norm(t, t.constant(x), t.constant(gamma), t.constant(beta), 1, Mode::train, no_stats, eps);
    });
    const TensorD bn = testing::eval_op<double>([&](Tape<double>& t) {
      return batchnorm2d(t, t.constant(x), t.constant(gamma), t.constant(beta), Mode::train, no_stats, eps);
    });
    worst_ssn = std::max(worst_ssn, (ssn.array() - bn.array()).abs().maxCoeff());
  }
  o.check(worst_mean < 1e-6, "instance norm mean");
  o.check(worst_var < 1e-6, "instance norm variance");
  o.check(worst_ssn < 1e-6, "SSN(S=1) vs BN");
  o.detail << " max |mean| " << worst_mean << ", max variance gap " << worst_var << ", max |SSN-BN| " << worst_ssn
           << " over 20 seeds";
}

void block_composition(Outcome& o) {
  const BCResBlockSpec specs[] = {{8, 8, {1, 1}, BlockKind::normal, 5, 0.5}, {4, 8, {2, 1}, BlockKind::transition, 5, 0.5}};
  int cases = 0;
  for (const auto& spec : specs)
    for (std::uint64_t seed = 0; seed < 5; ++seed)
      for (Mode mode : {Mode::train, Mode::eval}) {
        Rng rng(seed);
        const TensorD x = testing::random_tensor({2, spec.in_channels, 10, 7}, rng);
        testing::BlockFixture a(spec, seed), b(spec, seed);
        const TensorD y = a.forward(x, mode, 99), ref = testing::manual_block(b, x, mode, 99);
        o.check(y.shape() == ref.shape() && (y.array() == ref.array()).all(), "composition seed " + std::to_string(seed));
        ++cases;
      }
  testing::BlockFixture zero(specs[0], 0);
  for (auto& p : zero.store.parameters()) p.value.set_zero();
  Rng rng(1);
  const TensorD x = testing::random_tensor({2, 8, 10, 7}, rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    o.check((zero.forward(x, mode, 3).array() == x.array()).all(), "zero block identity");
  }
  o.detail << " " << cases << " exact composition cases, zero-parameter identity in train and eval";
}

struct Corpus {
  testing::TempDir dir{"acceptance"};
  FeatureSet train, val;

  Corpus(int n, std::uint64_t seed) {
    SynthSpec spec;
    spec.n_per_class_per_split = n;
    spec.seed = seed;
    const Manifest m = generate_synth(spec, dir.path());
    train = extract_features(m.split(Split::train));
    val = extract_features(m.split(Split::devel));
  }
};

void synthetic_learning(Outcome& o) {
  const auto t0 = Clock::now();
  const Corpus corpus(50, 7);
  o.detail << " features " << static_cast<int>(seconds_since(t0)) << " s;";
  int reached = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto ts = Clock::now();
    auto model = Model<float>::build(ModelConfig{}, seed);
    TrainConfig c;
    c.adam.lr = 1e-4;
    c.max_epochs = 30;
    c.seed = seed;
    c.stop_at_val_uar = 0.85;
    c.deterministic = true;
    const TrainResult r = train(model, corpus.train, corpus.val, c);
    const bool ok = r.best_val_uar >= 0.85;
    reached += ok;
    o.detail << " seed " << seed << ": val UAR " << r.best_val_uar << " at epoch " << r.best_epoch << " ("
             << static_cast<int>(seconds_since(ts)) << " s);";
  }
  const double total = seconds_since(t0);
  o.check(reached >= 2, "fewer than 2 of 3 seeds reached 0.85");
  o.check(total < 30 * 60, "runtime");

  auto slow = Model<float>::build(ModelConfig{}, 0);
  TrainConfig c;
  c.adam.lr = 1e-5;
  c.max_epochs = 2;
  c.deterministic = true;
  const TrainResult r = train(slow, corpus.train, corpus.val, c);
  bool finite = true;
  for (const auto& e : r.history) finite = finite && std::isfinite(e.train_loss) && e.train_loss < 2 * std::log(2.0) + 1;
  finite = finite && predict_logits(slow, corpus.val).all_finite();
  o.check(finite, "lr 1e-5 diverged");
  o.detail << " lr 1e-5: losses " << r.history[0].train_loss << " -> " << r.history.back().train_loss << ", finite";
}

void metric_oracles(Outcome& o) {
  Rng rng(2024);
  int uar_exact = 0, ci_exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int K = 2;
    const int n = 10 + static_cast<int>(rng.below(190));
    std::vector<int> y, p;
    for (int i = 0; i < n; ++i) {
      y.push_back(i < K ? i : static_cast<int>(rng.below(K)));
      p.push_back(rng.uniform() < 0.7 ? y.back() : static_cast<int>(rng.below(K)));
    }
    uar_exact += uar(y, p, K) == testing::brute_uar(y, p, K);
    ci_exact += bootstrap_ci(y, p, K, 1000, 0.95, 5) == testing::brute_ci(y, p, K, 1000, 0.95, 5);
  }
  o.check(uar_exact == 100, "uar");
  o.check(ci_exact == 100, "bootstrap_ci");
  o.detail << " uar exact " << uar_exact << "/100, bootstrap CI exact " << ci_exact << "/100 (seed 5)";
}

void determinism(Outcome& o) {
  const Corpus corpus(3, 11);
  auto run = [&] {
    auto model = Model<float>::build(ModelConfig{}, 4);
    TrainConfig c;
    c.adam.lr = 1e-4;
    c.max_epochs = 2;
    c.batch_size = 4;
    c.seed = 4;
    c.deterministic = true;
    TrainResult r = train(model, corpus.train, corpus.val, c);
    std::string history;
    for (const auto& e : r.history) history += history_line(e) + "\n";
    return std::make_tuple(encode_checkpoint(r.best), encode_checkpoint(r.last), history, predict_logits(model, corpus.val));
  };
  const auto [best_a, last_a, hist_a, logits_a] = run();
  const auto [best_b, last_b, hist_b, logits_b] = run();
  o.check(best_a == best_b && last_a == last_b, "checkpoints differ");
  o.check(hist_a == hist_b, "history differs");

  const std::filesystem::path file = corpus.dir / "final.ckpt";
  save_checkpoint(file, decode_checkpoint(last_a));
  auto restored = model_from_checkpoint(load_checkpoint(file));
  const TensorF logits_c = predict_logits(restored, corpus.val);
  const bool same = logits_c.shape() == logits_a.shape() &&
                    std::memcmp(logits_c.data(), logits_a.data(), static_cast<std::size_t>(logits_a.size()) * 4) == 0;
  o.check(same, "round-trip logits differ");
  o.detail << " two runs: " << last_a.size() << "-byte checkpoints identical, history identical; round-trip logits "
           << "bitwise equal on " << logits_a.dim(0) << " clips";
}

}  // namespace
}  // namespace tornet

int main() {
  using namespace tornet;
  report(1, "shape trace matches layer table", shape_trace);
  report(2, "parameter counts of the ablation variants", parameter_counts);
  report(3, "last-conv parameter closed form", last_conv_closed_form);
  report(4, "finite-difference gradient checks", gradcheck_all);
  report(5, "normalization invariants", normalization_invariants);
  report(6, "block equals primitive composition", block_composition);
  report(7, "synthetic corpus learning", synthetic_learning);
  report(8, "uar and bootstrap_ci match brute force", metric_oracles);
  report(9, "training determinism and checkpoint round trip", determinism);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
