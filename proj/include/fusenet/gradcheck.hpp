#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fusenet/tensor.hpp"

namespace fusenet {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;
  std::vector<GradCheckEntry> entries;

  bool pass(double tolerance) const { return max_rel_error <= tolerance; }
};

/// Compares analytic gradients against central finite differences with step
/// h = 1e-3 * max(1, |x|). `build` must re-run the forward graph from the
/// current leaf values and return the scalar loss; `leaves` lists the tensors
/// whose gradients are checked (they must have requires_grad set). Meant to
/// run with S = double; inputs should stay clear of ReLU zeros and pool ties.
template <typename S, typename BuildFn>
GradCheckReport gradient_check(BuildFn&& build,
                               std::vector<std::pair<std::string, Tensor<S>>> leaves) {
  GradCheckReport report;

  for (auto& [name, leaf] : leaves) leaf.zero_grad();
  Tensor<S> loss = build();
  backward(loss);

  std::vector<ArrayX<S>> analytic;
  analytic.reserve(leaves.size());
  for (auto& [name, leaf] : leaves) analytic.push_back(leaf.grad());

  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& [name, leaf] = leaves[li];
    GradCheckEntry entry;
    entry.name = name;
    for (Eigen::Index i = 0; i < leaf.size(); ++i) {
      const S saved = leaf.raw()[i];
      const S h = S(1e-3) * std::max(S(1), std::abs(saved));
      leaf.raw()[i] = saved + h;
      const S lp = build().value();
      leaf.raw()[i] = saved - h;
      const S lm = build().value();
      leaf.raw()[i] = saved;

      const double num = double(lp - lm) / double(2 * h);
      const double ana = double(analytic[li][i]);
      const double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = ana;
        entry.numeric = num;
      }
    }
    if (entry.max_rel_error > report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst = entry.name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace fusenet
