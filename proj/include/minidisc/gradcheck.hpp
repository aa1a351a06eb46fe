#pragma once

// Central finite-difference verification of autodiff gradients. Runs in
// double regardless of the storage type used in training; the op rules are
// identical templates, so checking them in double checks the float path.

#include "minidisc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace minidisc {

struct GradCheckTarget {
  std::string name;
  std::shared_ptr<std::vector<double>> value;
  std::shared_ptr<std::vector<double>> grad;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "name[i]" of the worst element
  size_t checked = 0;
};

// rel err = |a - f| / max(|a|, |f|, 1e-8)
inline double grad_rel_err(double a, double f) {
  double denom = std::max({std::abs(a), std::abs(f), 1e-8});
  return std::abs(a - f) / denom;
}

// `eval(with_grad)` must rebuild the graph from the target buffers and
// return the scalar loss; when with_grad it must zero the target grads,
// run backward, and leave gradients in the grad buffers. Probes every
// element of every target with a central difference of the given step.
inline GradCheckReport check_gradients(const std::function<double(bool)>& eval,
                                       const std::vector<GradCheckTarget>& targets,
                                       double step = 1e-4) {
  GradCheckReport report;
  eval(true);
  // snapshot the autodiff gradients before FD evaluations disturb anything
  std::vector<std::vector<double>> autodiff;
  autodiff.reserve(targets.size());
  for (const auto& t : targets) autodiff.push_back(*t.grad);

  for (size_t ti = 0; ti < targets.size(); ++ti) {
    auto& buf = *targets[ti].value;
    for (size_t i = 0; i < buf.size(); ++i) {
      double saved = buf[i];
      buf[i] = saved + step;
      double f1 = eval(false);
      buf[i] = saved - step;
      double f2 = eval(false);
      buf[i] = saved;
      double fd = (f1 - f2) / (2.0 * step);
      double err = grad_rel_err(autodiff[ti][i], fd);
      ++report.checked;
      if (err > report.max_rel_err || !std::isfinite(err)) {
        report.max_rel_err = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        report.worst = targets[ti].name + "[" + std::to_string(i) + "]";
        if (!std::isfinite(err)) return report;
      }
    }
  }
  return report;
}

}  // namespace minidisc
