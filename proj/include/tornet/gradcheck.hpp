#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tornet/autodiff.hpp"

namespace tornet {

struct GradcheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  Index coordinates = 0;
  int seeds = 0;
  bool passed = false;
  std::string message;
};

/// Relative error between analytic and numeric derivatives. The denominator is
/// floored so coordinates whose true derivative is ~0 are judged on absolute
/// error at that floor instead of amplifying finite-difference roundoff.
inline double gradcheck_rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Scalar-valued function of the tape; every differentiable input enters
/// through `tape.parameter(*inputs[i])`.
using GradFunction = std::function<Var(Tape<double>&)>;

/// Compares reverse-mode gradients of `fn` with respect to every entry of
/// `inputs` against central differences with h = 1e-5 * max(1, |x|).
/// Never throws: exceptions from `fn` are reported as a failure.
inline GradcheckReport gradcheck(const std::string& name, const GradFunction& fn,
                                 const std::vector<Parameter<double>*>& inputs, double tolerance) {
  GradcheckReport report;
  report.name = name;
  report.tolerance = tolerance;
  report.seeds = 1;
  try {
    for (auto* p : inputs) p->zero_grad();
    {
      Tape<double> tape;
      Var out = fn(tape);
      if (tape.value(out).size() != 1) throw ConfigError("gradcheck function must return a scalar");
      tape.backward(out);
    }
    auto eval = [&]() {
      Tape<double> tape;
      tape.set_grad_enabled(false);
      return tape.value(fn(tape))[0];
    };
    for (auto* p : inputs) {
      for (Index i = 0; i < p->value.size(); ++i) {
        const double x0 = p->value[i];
        const double h = 1e-5 * std::max(1.0, std::abs(x0));
        p->value[i] = x0 + h;
        const double up = eval();
        p->value[i] = x0 - h;
        const double down = eval();
        p->value[i] = x0;
        const double numeric = (up - down) / (2 * h);
        report.max_rel_error = std::max(report.max_rel_error, gradcheck_rel_error(p->grad[i], numeric));
        ++report.coordinates;
      }
    }
    report.passed = report.max_rel_error < tolerance;
  } catch (const std::exception& e) {
    report.passed = false;
    report.message = e.what();
  }
  return report;
}

/// Folds per-seed reports of the same check into one line.
inline GradcheckReport merge_reports(const std::string& name, const std::vector<GradcheckReport>& runs) {
  GradcheckReport out;
  out.name = name;
  out.passed = !runs.empty();
  for (const auto& r : runs) {
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.tolerance = r.tolerance;
    out.coordinates += r.coordinates;
    out.seeds += r.seeds;
    out.passed = out.passed && r.passed;
    if (!r.message.empty() && out.message.empty()) out.message = r.message;
  }
  return out;
}

struct GradcheckSuiteOptions {
  int seeds = 20;
  /// Adds a deliberately wrong backward to prove the harness can fail.
  bool inject_fault = false;
};

/// Every differentiable op plus a full normal BC ResBlock, one report per op.
std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckSuiteOptions& options = {});

}  // namespace tornet
