#pragma once

// Central-difference gradient checking. The analytic gradient comes from one
// tape replay; the numeric one re-evaluates the forward closure at x +- h per
// sampled coordinate. Relative error uses a floor so coordinates where both
// sides vanish do not divide by zero.

#include <functional>
#include <string>
#include <vector>

#include "udit/rng.hpp"
#include "udit/tensor.hpp"

namespace udit {

struct GradCheckReport {
  double worst_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  std::string worst_coord;
};

struct GradCheckOptions {
  double h = 1e-4;     // step, scaled per coordinate by max(1, |x|)
  double floor = 1e-6; // relative-error denominator floor; below it the
                       // comparison is effectively absolute, since central
                       // differences cannot resolve near-zero gradients
                       // beyond the function's own roundoff noise
  std::int64_t max_coords = 120;
  std::uint64_t seed = 0x9d1fc661;
};

// leaves: tensors to perturb (marked requires_grad here). fwd: recomputes the
// scalar loss from the current leaf contents.
template <typename T>
GradCheckReport gradcheck(std::vector<Tensor<T>> leaves, const std::function<Tensor<T>()>& fwd,
                          const GradCheckOptions& opt = {}) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  {
    GradTape<T> tape;
    Tensor<T> loss = fwd();
    tape.backward(loss);
  }
  for (auto& l : leaves)
    analytic.push_back(l.grad().empty() ? std::vector<T>(l.data().size(), T(0)) : l.grad());

  std::int64_t total = 0;
  for (auto& l : leaves) total += l.numel();
  std::vector<std::pair<size_t, std::int64_t>> coords;
  if (total <= opt.max_coords) {
    for (size_t li = 0; li < leaves.size(); ++li)
      for (std::int64_t i = 0; i < leaves[li].numel(); ++i) coords.push_back({li, i});
  } else {
    Rng rng(opt.seed);
    for (std::int64_t c = 0; c < opt.max_coords; ++c) {
      std::int64_t flat = rng.uniform_int(0, total);
      for (size_t li = 0; li < leaves.size(); ++li) {
        if (flat < leaves[li].numel()) {
          coords.push_back({li, flat});
          break;
        }
        flat -= leaves[li].numel();
      }
    }
  }

  GradCheckReport rep;
  for (auto [li, idx] : coords) {
    auto& buf = leaves[li].data_mut();
    const T x0 = buf[static_cast<size_t>(idx)];
    const T h = static_cast<T>(opt.h * std::max(1.0, std::fabs(static_cast<double>(x0))));
    buf[static_cast<size_t>(idx)] = x0 + h;
    const double fp = static_cast<double>(fwd().item());
    buf[static_cast<size_t>(idx)] = x0 - h;
    const double fm = static_cast<double>(fwd().item());
    buf[static_cast<size_t>(idx)] = x0;
    const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
    const double ad = static_cast<double>(analytic[li][static_cast<size_t>(idx)]);
    const double denom = std::max({std::fabs(ad), std::fabs(fd), opt.floor});
    const double rel = std::fabs(ad - fd) / denom;
    ++rep.coords_checked;
    if (rel > rep.worst_rel_err) {
      rep.worst_rel_err = rel;
      rep.worst_coord =
          "leaf" + std::to_string(li) + "[" + std::to_string(idx) + "] ad=" +
          std::to_string(ad) + " fd=" + std::to_string(fd);
    }
  }
  return rep;
}

}  // namespace udit
