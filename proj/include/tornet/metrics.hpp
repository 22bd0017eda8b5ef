#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tornet {

/// counts(true, predicted)
using ConfusionMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Throws ConfigError on label/prediction length mismatch or ids outside [0, K).
ConfusionMatrix confusion_matrix(std::span<const int> labels, std::span<const int> predictions, int n_classes);

/// Recall per true class. Throws ConfigError when a class has no examples.
Eigen::VectorXd per_class_recall(const ConfusionMatrix& cm);

/// Unweighted average recall: mean of per-class recalls.
double uar(std::span<const int> labels, std::span<const int> predictions, int n_classes);

/// Nearest-rank percentile (p in (0, 100]) of an ascending-sorted sample.
double nearest_rank(std::span<const double> sorted, double p);

/// Percentile bootstrap interval of UAR. Resamples lacking any class are redrawn,
/// so exactly `n_resamples` valid UARs are used.
std::pair<double, double> bootstrap_ci(std::span<const int> labels, std::span<const int> predictions, int n_classes,
                                       int n_resamples = 1000, double level = 0.95, std::uint64_t seed = 0);

struct EvalReport {
  std::string split;
  double uar = 0.0;
  Eigen::VectorXd recalls;
  ConfusionMatrix confusion;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_bootstrap = 1000;
  double level = 0.95;
  std::size_t n_examples = 0;
};

EvalReport make_report(std::span<const int> labels, std::span<const int> predictions, int n_classes,
                       int n_bootstrap = 1000, double level = 0.95, std::uint64_t seed = 0);

std::string report_to_json(const EvalReport& report);
std::string report_to_table(const EvalReport& report, const std::vector<std::string>& class_names = {});

}  // namespace tornet
