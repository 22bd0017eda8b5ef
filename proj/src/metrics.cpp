#include "tornet/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "tornet/errors.hpp"
#include "tornet/rng.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

ConfusionMatrix confusion_matrix(std::span<const int> labels, std::span<const int> predictions, int n_classes) {
  if (n_classes < 2) throw ConfigError("confusion matrix needs at least two classes");
  if (labels.size() != predictions.size()) {
    throw ConfigError("labels (" + std::to_string(labels.size()) + ") and predictions (" +
                      std::to_string(predictions.size()) + ") differ in length");
  }
  ConfusionMatrix cm = ConfusionMatrix::Zero(n_classes, n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes || predictions[i] < 0 || predictions[i] >= n_classes) {
      throw ConfigError("class id out of range at position " + std::to_string(i));
    }
    ++cm(labels[i], predictions[i]);
  }
  return cm;
}

Eigen::VectorXd per_class_recall(const ConfusionMatrix& cm) {
  Eigen::VectorXd recall(cm.rows());
  for (Index k = 0; k < cm.rows(); ++k) {
    const std::int64_t total = cm.row(k).sum();
    if (total == 0) throw ConfigError("recall undefined: class " + std::to_string(k) + " has no examples");
    recall[k] = static_cast<double>(cm(k, k)) / static_cast<double>(total);
  }
  return recall;
}

namespace {

/// Sequential sum, independent of vectorized reduction order.
double mean_recall(const Eigen::VectorXd& r) {
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
}

}  // namespace

double uar(std::span<const int> labels, std::span<const int> predictions, int n_classes) {
  return mean_recall(per_class_recall(confusion_matrix(labels, predictions, n_classes)));
}

double nearest_rank(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ConfigError("percentile of an empty sample");
  if (!(p > 0 && p <= 100)) throw ConfigError("percentile must lie in (0, 100]");
  // the small slack keeps exact ranks such as 2.5% of 1000 from rounding up
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(sorted.size()) - 1e-9));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

std::pair<double, double> bootstrap_ci(std::span<const int> labels, std::span<const int> predictions, int n_classes,
                                       int n_resamples, double level, std::uint64_t seed) {
  if (n_resamples < 1) throw ConfigError("bootstrap needs at least one resample");
  if (!(level > 0 && level < 1)) throw ConfigError("bootstrap level must lie in (0, 1)");
  per_class_recall(confusion_matrix(labels, predictions, n_classes));  // validates presence of every class
  Rng rng = Rng(seed).stream("bootstrap");
  const std::size_t n = labels.size();
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(n_resamples));
  ConfusionMatrix cm(n_classes, n_classes);
  while (stats.size() < static_cast<std::size_t>(n_resamples)) {
    cm.setZero();
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = static_cast<std::size_t>(rng.below(n));
      ++cm(labels[j], predictions[j]);
    }
    if ((cm.rowwise().sum().array() == 0).any()) continue;
    stats.push_back(mean_recall(per_class_recall(cm)));
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0 * 100.0;
  return {nearest_rank(stats, tail), nearest_rank(stats, 100.0 - tail)};
}

EvalReport make_report(std::span<const int> labels, std::span<const int> predictions, int n_classes, int n_bootstrap,
                       double level, std::uint64_t seed) {
  EvalReport r;
  r.confusion = confusion_matrix(labels, predictions, n_classes);
  r.recalls = per_class_recall(r.confusion);
  r.uar = mean_recall(r.recalls);
  std::tie(r.ci_low, r.ci_high) = bootstrap_ci(labels, predictions, n_classes, n_bootstrap, level, seed);
  r.n_bootstrap = n_bootstrap;
  r.level = level;
  r.n_examples = labels.size();
  return r;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["split"] = r.split;
  j["n_examples"] = r.n_examples;
  j["uar"] = r.uar;
  j["recalls"] = std::vector<double>(r.recalls.data(), r.recalls.data() + r.recalls.size());
  auto& cm = j["confusion"] = nlohmann::ordered_json::array();
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    std::vector<std::int64_t> row(static_cast<std::size_t>(r.confusion.cols()));
    for (Index k = 0; k < r.confusion.cols(); ++k) row[static_cast<std::size_t>(k)] = r.confusion(i, k);
    cm.push_back(row);
  }
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  j["level"] = r.level;
  j["n_bootstrap"] = r.n_bootstrap;
  return j.dump(2);
}

std::string report_to_table(const EvalReport& r, const std::vector<std::string>& class_names) {
  auto name = [&](Index k) {
    return static_cast<std::size_t>(k) < class_names.size() ? class_names[static_cast<std::size_t>(k)]
                                                            : "class " + std::to_string(k);
  };
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "split      " << (r.split.empty() ? "-" : r.split) << " (" << r.n_examples << " examples)\n";
  os << "UAR        " << r.uar << "\n";
  os << std::setprecision(1) << r.level * 100 << "% CI    " << std::setprecision(4) << "[" << r.ci_low << ", "
     << r.ci_high << "] (" << r.n_bootstrap << " bootstrap resamples)\n";
  os << "\n" << std::left << std::setw(14) << "true \\ pred";
  for (Index k = 0; k < r.confusion.cols(); ++k) os << std::setw(12) << name(k);
  os << std::setw(10) << "recall" << "\n";
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    os << std::setw(14) << name(i);
    for (Index k = 0; k < r.confusion.cols(); ++k) os << std::setw(12) << r.confusion(i, k);
    os << std::setw(10) << r.recalls[i] << "\n";
  }
  return os.str();
}

}  // namespace tornet
