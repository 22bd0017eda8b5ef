// tornet: corpus generation, feature extraction, training, evaluation,
// prediction, parameter audit and gradient checking.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "tornet/audio.hpp"
#include "tornet/checkpoint.hpp"
#include "tornet/config.hpp"
#include "tornet/data.hpp"
#include "tornet/gradcheck.hpp"
#include "tornet/metrics.hpp"
#include "tornet/network.hpp"
#include "tornet/train.hpp"

namespace fs = std::filesystem;
using namespace tornet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

struct Globals {
  unsigned threads = 0;
  bool single_thread = false;

  unsigned worker_count() const {
    if (single_thread) return 1;
    if (threads > 0) return threads;
    return std::max(1u, std::thread::hardware_concurrency());
  }
};

void log(const std::string& msg) { std::cerr << msg << '\n'; }

/// ISO-8601 UTC; SOURCE_DATE_EPOCH wins, deterministic runs fall back to the epoch.
std::string timestamp(bool deterministic) {
  std::time_t t = 0;
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) {
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  } else if (!deterministic) {
    t = std::time(nullptr);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string shape_label(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

ExtractOptions extract_options(const RunConfig& rc, const Globals& g) {
  ExtractOptions eo;
  eo.features = rc.feature_options();
  eo.threads = g.worker_count();
  if (!rc.get("cache_dir").empty()) eo.cache_dir = fs::path(rc.get("cache_dir"));
  return eo;
}

FeatureSet load_split(const Manifest& m, Split split, ExtractOptions eo) {
  const auto entries = m.split(split);
  if (entries.empty()) throw DataError("split '" + split_name(split) + "' of " + m.source.string() + " is empty");
  const auto t0 = std::chrono::steady_clock::now();
  FeatureSet set = extract_features(entries, eo);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream os;
  os << "features: " << set.size() << " " << split_name(split) << " clips in " << std::fixed << std::setprecision(1)
     << secs << " s";
  log(os.str());
  return set;
}

int cmd_synth(const fs::path& out, int n, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_per_class_per_split = n;
  spec.seed = seed;
  const Manifest m = generate_synth(spec, out);
  std::cout << m.source.string() << '\n';
  return kOk;
}

int cmd_features(const fs::path& manifest, const std::string& split, const fs::path& cache, const Globals& g) {
  const Manifest m = load_manifest(manifest);
  ExtractOptions eo;
  eo.threads = g.worker_count();
  eo.cache_dir = cache;
  const FeatureSet set = load_split(m, parse_split(split), eo);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const TensorF& f = set.features[i];
    std::cout << set.names[i] << "  " << shape_label(f.shape()) << "  mean log-mel " << std::fixed
              << std::setprecision(3) << f.array().head(f.size() / 3).mean() << '\n';
  }
  return kOk;
}

struct TrainArgs {
  fs::path manifest, config, out;
  std::string epochs, seed, variant, lr;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  RunConfig rc;
  if (!a.config.empty()) rc.load_file(a.config);
  const std::pair<const char*, const std::string*> named[] = {
      {"epochs", &a.epochs}, {"seed", &a.seed}, {"variant", &a.variant}, {"lr", &a.lr}};
  for (const auto& [key, value] : named) {
    if (!value->empty()) rc.set(key, *value, ConfigSource::flag);
  }
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    rc.set(kv.substr(0, eq), kv.substr(eq + 1), ConfigSource::flag);
  }
  ModelConfig mc = rc.model_config();
  TrainConfig tc = rc.train_config();
  tc.deterministic = g.single_thread;
  tc.created = timestamp(g.single_thread);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw DataError("cannot create " + a.out.string() + ": " + ec.message());
  std::ofstream run_log(a.out / "run.log", std::ios::trunc);
  if (!run_log) throw DataError("cannot write " + (a.out / "run.log").string());
  auto both = [&](const std::string& line) {
    log(line);
    run_log << line << '\n';
  };
  both("effective configuration (flags > config file > defaults):");
  for (const auto& line : rc.log_lines()) both("  " + line);
  both("  workers = " + std::to_string(g.worker_count()) + (g.single_thread ? "  [single-thread]" : ""));

  const Manifest m = load_manifest(a.manifest);
  ExtractOptions eo = extract_options(rc, g);
  eo.crop_seed = tc.seed;
  const FeatureSet train_set = load_split(m, Split::train, eo);
  eo.features.random_crop = false;
  const FeatureSet val_set = load_split(m, Split::devel, eo);

  Model<float> model = Model<float>::build(mc, tc.seed);
  both("model: variant " + mc.variant + ", " + std::to_string(model.parameter_count()) + " parameters");

  std::ofstream history(a.out / "history.jsonl", std::ios::trunc);
  if (!history) throw DataError("cannot write " + (a.out / "history.jsonl").string());
  const TrainResult result = train(model, train_set, val_set, tc, [&](const EpochRecord& r) {
    const std::string line = history_line(r);
    history << line << '\n';
    history.flush();
    both("epoch " + line);
  });
  save_checkpoint(a.out / "best.ckpt", result.best);
  save_checkpoint(a.out / "final.ckpt", result.last);
  std::ostringstream os;
  os << "best epoch " << result.best_epoch << " val UAR " << std::fixed << std::setprecision(4) << result.best_val_uar;
  both(os.str());
  std::cout << (a.out / "best.ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& manifest, const std::string& split, bool json, int n_boot,
             std::uint64_t seed, const Globals& g) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model<float> model = model_from_checkpoint<float>(ckpt);
  const Manifest m = load_manifest(manifest);
  ExtractOptions eo;
  eo.threads = g.worker_count();
  const FeatureSet set = load_split(m, parse_split(split), eo);
  EvalReport report = evaluate(model, set, 16, n_boot, seed);
  report.split = split;
  std::cout << (json ? report_to_json(report) + "\n" : report_to_table(report, class_names()));
  return kOk;
}

int cmd_predict(const fs::path& ckpt_path, const fs::path& wav) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model<float> model = model_from_checkpoint<float>(ckpt);
  const FeatureOptions fo;
  const MelFilterbank bank(fo.n_mels, fo.n_fft, kSampleRate, fo.f_min, fo.f_max);
  const TensorF feats = assemble(read_wav(wav), bank, fo);
  Shape shape{1};
  shape.insert(shape.end(), feats.shape().begin(), feats.shape().end());
  const TensorD probs = softmax(model.logits(feats.reshaped(shape)).cast<double>());
  const int label = argmax_rows(probs.cast<float>())[0];
  std::cout << "label " << class_names().at(static_cast<std::size_t>(label)) << '\n' << std::setprecision(9)
            << std::fixed;
  for (Index k = 0; k < probs.dim(1); ++k) {
    std::cout << "p(" << class_names().at(static_cast<std::size_t>(k)) << ") = " << probs(0, k) << '\n';
  }
  return kOk;
}

int cmd_params(const std::string& variant) {
  const Model<float> model = Model<float>::build(variant_config(variant), 0);
  const ShapeTrace rows = layer_table(model);
  std::cout << std::left << std::setw(16) << "layer" << std::setw(14) << "operator" << std::setw(10) << "stride"
            << std::setw(14) << "output" << std::right << std::setw(12) << "params" << '\n';
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(16) << r.name << std::setw(14) << r.op << std::setw(10) << r.stride
              << std::setw(14) << shape_label(r.output) << std::right << std::setw(12) << r.params << '\n';
  }
  std::cout << "\nparameter breakdown\n";
  for (const auto& [name, n] : model.parameter_breakdown(2)) {
    std::cout << "  " << std::left << std::setw(26) << name << std::right << std::setw(12) << n << '\n';
  }
  std::cout << "\ntotal " << model.parameter_count() << " (" << std::fixed << std::setprecision(2)
            << model.parameter_count() / 1e6 << " M)\n";
  return kOk;
}

int cmd_gradcheck(int seeds, bool inject_fault) {
  GradcheckSuiteOptions o;
  o.seeds = seeds;
  o.inject_fault = inject_fault;
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(o)) {
    std::printf("%-24s max rel err %.3e  tol %.0e  %5lld coords  %2d seeds  %s%s%s\n", r.name.c_str(),
                r.max_rel_error, r.tolerance, static_cast<long long>(r.coordinates), r.seeds,
                r.passed ? "PASS" : "FAIL", r.message.empty() ? "" : "  ", r.message.c_str());
    ok = ok && r.passed;
  }
  return ok ? kOk : kInternal;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TorNet: temporal-oriented broadcast-residual audio classifier"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads for feature extraction (default: all cores)");
  app.add_flag("--single-thread", g.single_thread, "Force one worker and deterministic output");

  auto* synth = app.add_subcommand("synth-data", "Write the synthetic two-class corpus and its manifest");
  fs::path synth_out;
  int synth_n = 10;
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n", synth_n, "Clips per class per split")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "Generator seed");

  auto* feats = app.add_subcommand("features", "Extract features of one split into a cache directory");
  fs::path feat_manifest, feat_cache;
  std::string feat_split = "train";
  feats->add_option("--manifest", feat_manifest, "Manifest CSV")->required();
  feats->add_option("--split", feat_split, "train, devel or test");
  feats->add_option("--cache", feat_cache, "Cache directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model; writes best.ckpt, final.ckpt and history.jsonl");
  TrainArgs ta;
  tr->add_option("--manifest", ta.manifest, "Manifest CSV")->required();
  tr->add_option("--config", ta.config, "Config file (key = value lines)");
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--epochs", ta.epochs, "Maximum epochs");
  tr->add_option("--seed", ta.seed, "Run seed (init, dropout, shuffling)");
  tr->add_option("--variant", ta.variant, "default, no-instancenorm, only-transition or no-last-conv");
  tr->add_option("--lr", ta.lr, "Learning rate");
  tr->add_option("--set", ta.sets, "Override any config key: key=value");
  tr->add_flag("--single-thread", g.single_thread, "Force one worker and deterministic output");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  fs::path ev_ckpt, ev_manifest;
  std::string ev_split = "test";
  bool ev_json = false;
  int ev_boot = 1000;
  std::uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--manifest", ev_manifest, "Manifest CSV")->required();
  ev->add_option("--split", ev_split, "train, devel or test");
  ev->add_option("--n-bootstrap", ev_boot, "Bootstrap resamples")->check(CLI::PositiveNumber);
  ev->add_option("--seed", ev_seed, "Bootstrap seed");
  ev->add_flag("--json", ev_json, "Print the report as JSON");

  auto* pr = app.add_subcommand("predict", "Classify one WAV file");
  fs::path pr_ckpt, pr_wav;
  pr->add_option("--checkpoint", pr_ckpt, "Checkpoint file")->required();
  pr->add_option("--wav", pr_wav, "Audio file")->required();

  auto* pa = app.add_subcommand("params", "Print the layer table and parameter breakdown");
  std::string pa_variant = "default";
  pa->add_option("--variant", pa_variant, "Model variant");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  int gc_seeds = 20;
  bool gc_fault = false;
  gc->add_option("--seeds", gc_seeds, "Random seeds per op")->check(CLI::PositiveNumber);
  gc->add_flag("--inject-fault", gc_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_n, synth_seed);
    if (*feats) return cmd_features(feat_manifest, feat_split, feat_cache, g);
    if (*tr) return cmd_train(ta, g);
    if (*ev) return cmd_eval(ev_ckpt, ev_manifest, ev_split, ev_json, ev_boot, ev_seed, g);
    if (*pr) return cmd_predict(pr_ckpt, pr_wav);
    if (*pa) return cmd_params(pa_variant);
    if (*gc) return cmd_gradcheck(gc_seeds, gc_fault);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}
