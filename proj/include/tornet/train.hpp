#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tornet/checkpoint.hpp"
#include "tornet/data.hpp"
#include "tornet/layers.hpp"
#include "tornet/metrics.hpp"
#include "tornet/network.hpp"

namespace tornet {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `p` given gradient `g` at step t >= 1.
template <typename Scalar>
void adam_update(Tensor<Scalar>& p, const Tensor<Scalar>& g, Tensor<Scalar>& m, Tensor<Scalar>& v, long t,
                 const AdamConfig& c) {
  if (g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape()) {
    throw ConfigError("adam: state shapes do not match parameter " + to_string(p.shape()));
  }
  if (t < 1) throw ConfigError("adam: step counter must start at 1");
  const auto b1 = static_cast<Scalar>(c.beta1), b2 = static_cast<Scalar>(c.beta2);
  m.array() = b1 * m.array() + (Scalar(1) - b1) * g.array();
  v.array() = b2 * v.array() + (Scalar(1) - b2) * g.array().square();
  const auto mhat_scale = static_cast<Scalar>(1.0 / (1.0 - std::pow(c.beta1, static_cast<double>(t))));
  const auto vhat_scale = static_cast<Scalar>(1.0 / (1.0 - std::pow(c.beta2, static_cast<double>(t))));
  p.array() -= static_cast<Scalar>(c.lr) * (m.array() * mhat_scale) /
               ((v.array() * vhat_scale).sqrt() + static_cast<Scalar>(c.eps));
}

/// Adam over every parameter of a store; moment buffers are created lazily.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {
    if (!(config.lr >= 0)) throw ConfigError("adam: lr must be >= 0");
    if (!(config.eps > 0)) throw ConfigError("adam: eps must be > 0");
    if (!(config.beta1 >= 0 && config.beta1 < 1 && config.beta2 >= 0 && config.beta2 < 1)) {
      throw ConfigError("adam: betas must lie in [0, 1)");
    }
  }

  void step(ParameterStore<Scalar>& store) {
    auto& params = store.parameters();
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.shape());
        v_.emplace_back(p.value.shape());
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("adam: parameter set changed between steps");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) adam_update(params[i].value, params[i].grad, m_[i], v_[i], t_, config_);
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<Tensor<Scalar>> m_, v_;
  long t_ = 0;
};

enum class ClassWeighting { off, balanced };

struct TrainConfig {
  AdamConfig adam;
  Index batch_size = 16;
  int max_epochs = 0;
  std::uint64_t seed = 0;
  /// Stop after this many epochs without a better validation UAR (0: never).
  int patience = 0;
  ClassWeighting class_weighting = ClassWeighting::off;
  /// Global gradient-norm clip (0: off).
  double grad_clip = 0.0;
  /// Stop once the best validation UAR reaches this value (0: off).
  double stop_at_val_uar = 0.0;
  /// Omits wall-clock fields so repeated runs produce identical history.
  bool deterministic = false;
  /// Timestamp recorded in checkpoints written by train().
  std::string created;
};

void validate(const TrainConfig& config);
std::string train_config_to_json(const TrainConfig& config);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_uar = 0.0;
  std::optional<double> seconds;
};

/// One JSON object per line: epoch, train_loss, val_uar[, seconds].
std::string history_line(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_uar = -1.0;
  Checkpoint best;
  Checkpoint last;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on `train_set`, keeping the checkpoint with the highest
/// validation UAR (earliest epoch on ties).
TrainResult train(Model<float>& model, const FeatureSet& train_set, const FeatureSet& val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Eval-mode logits [N, K] for a whole set, batch by batch.
TensorF predict_logits(Model<float>& model, const FeatureSet& set, Index batch_size = 16);

/// Argmax per row; ties go to the lower class id.
std::vector<int> argmax_rows(const TensorF& logits);

EvalReport evaluate(Model<float>& model, const FeatureSet& set, Index batch_size = 16, int n_bootstrap = 1000,
                    std::uint64_t seed = 0);

}  // namespace tornet
