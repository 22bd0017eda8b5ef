#include "tornet/train.hpp"

#include <json.hpp>

#include <chrono>

namespace tornet {

void validate(const TrainConfig& c) {
  if (!(c.adam.lr >= 0)) throw ConfigError("lr must be >= 0");
  if (!(c.adam.eps > 0)) throw ConfigError("adam eps must be > 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.max_epochs < 1) throw ConfigError("epochs must be >= 1: no epoch would be trained");
  if (c.patience < 0) throw ConfigError("patience must be >= 0");
  if (c.grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
}

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["adam_eps"] = c.adam.eps;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.max_epochs;
  j["seed"] = c.seed;
  j["patience"] = c.patience;
  j["class_weighting"] = c.class_weighting == ClassWeighting::balanced ? "balanced" : "off";
  j["grad_clip"] = c.grad_clip;
  j["stop_at_val_uar"] = c.stop_at_val_uar;
  return j.dump();
}

std::string history_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_uar"] = r.val_uar;
  if (r.seconds) j["seconds"] = *r.seconds;
  return j.dump();
}

TensorF predict_logits(Model<float>& model, const FeatureSet& set, Index batch_size) {
  if (set.size() == 0) throw ConfigError("cannot predict on an empty set");
  const Index K = model.config().n_classes;
  TensorF out(Shape{static_cast<Index>(set.size()), K});
  Index row = 0;
  for (const auto& idx : batch_indices(set.size(), static_cast<std::size_t>(batch_size), false, 0, 0)) {
    const TensorF logits = model.logits(set.batch(idx));
    std::copy(logits.data(), logits.data() + logits.size(), out.data() + row * K);
    row += logits.dim(0);
  }
  return out;
}

std::vector<int> argmax_rows(const TensorF& logits) {
  require_rank(logits, 2, "argmax_rows");
  std::vector<int> out(static_cast<std::size_t>(logits.dim(0)));
  for (Index i = 0; i < logits.dim(0); ++i) {
    Index best = 0;
    for (Index k = 1; k < logits.dim(1); ++k)
      if (logits(i, k) > logits(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

EvalReport evaluate(Model<float>& model, const FeatureSet& set, Index batch_size, int n_bootstrap, std::uint64_t seed) {
  const auto preds = argmax_rows(predict_logits(model, set, batch_size));
  return make_report(set.labels, preds, static_cast<int>(model.config().n_classes), n_bootstrap, 0.95, seed);
}

namespace {

std::vector<double> class_weights(const TrainConfig& config, const FeatureSet& set, int n_classes) {
  if (config.class_weighting == ClassWeighting::off) return {};
  std::vector<double> counts(static_cast<std::size_t>(n_classes), 0.0);
  for (int y : set.labels) counts.at(static_cast<std::size_t>(y)) += 1.0;
  std::vector<double> w(counts.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (counts[k] == 0) throw ConfigError("balanced class weights: class " + std::to_string(k) + " absent from train split");
    w[k] = static_cast<double>(set.size()) / (n_classes * counts[k]);
  }
  return w;
}

void clip_gradients(ParameterStore<float>& store, double max_norm) {
  double sq = 0;
  for (const auto& p : store.parameters()) sq += p.grad.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const auto scale = static_cast<float>(max_norm / norm);
  for (auto& p : store.parameters()) p.grad.array() *= scale;
}

}  // namespace

TrainResult train(Model<float>& model, const FeatureSet& train_set, const FeatureSet& val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  validate(config);
  const int K = static_cast<int>(model.config().n_classes);
  if (train_set.size() == 0) throw ConfigError("train split is empty");
  if (val_set.size() == 0) throw ConfigError("validation split is empty");
  {
    std::vector<bool> present(static_cast<std::size_t>(K), false);
    for (int y : val_set.labels) present.at(static_cast<std::size_t>(y)) = true;
    for (int k = 0; k < K; ++k) {
      if (!present[static_cast<std::size_t>(k)]) {
        throw ConfigError("validation split has no examples of class " + std::to_string(k) + "; UAR is undefined");
      }
    }
  }
  const std::vector<double> weights = class_weights(config, train_set, K);
  Adam<float> adam(config.adam);
  Rng dropout_rng = Rng(config.seed).stream("dropout");
  auto& store = model.store();

  TrainResult result;
  CheckpointMeta meta;
  meta.train_config = train_config_to_json(config);
  meta.seed = config.seed;
  meta.created = config.created;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0;
    for (const auto& idx : batch_indices(train_set.size(), static_cast<std::size_t>(config.batch_size), true,
                                         config.seed, epoch)) {
      store.zero_grad();
      Tape<float> tape;
      Context<float> ctx{tape, store, Mode::train, &dropout_rng};
      const std::vector<int> labels = train_set.batch_labels(idx);
      Var logits = model.forward(ctx, tape.constant(train_set.batch(idx)));
      Var loss = softmax_cross_entropy(tape, logits, labels, weights);
      tape.backward(loss);
      if (config.grad_clip > 0) clip_gradients(store, config.grad_clip);
      adam.step(store);
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val_uar = uar(val_set.labels, argmax_rows(predict_logits(model, val_set, config.batch_size)), K);
    if (!config.deterministic) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.history.push_back(rec);
    meta.epoch = epoch;
    meta.val_uar = rec.val_uar;
    result.last = capture(model, meta);
    if (rec.val_uar > result.best_val_uar) {
      result.best_val_uar = rec.val_uar;
      result.best_epoch = epoch;
      result.best = result.last;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (on_epoch) on_epoch(rec);
    if (config.stop_at_val_uar > 0 && result.best_val_uar >= config.stop_at_val_uar) break;
    if (config.patience > 0 && since_best >= config.patience) break;
  }
  return result;
}

}  // namespace tornet
