#pragma once

// Test-only reference computations: finite differences, exhaustive
// enumerations and naive recursions used to pin expected values. These are
// independent of the library's own computation paths.

#include <cmath>
#include <functional>
#include <vector>

#include "snt/tensor.hpp"

namespace oracle {

// Central finite difference of f w.r.t. every element of `param`.
inline std::vector<double> finite_diff(snt::Tensor param,
                                       const std::function<double()>& f,
                                       double h = 1e-5) {
  std::vector<double> out(param.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + h;
    const double fp = f();
    param.data()[i] = saved - h;
    const double fm = f();
    param.data()[i] = saved;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

// Largest relative error between an analytic gradient and a reference, with
// an absolute floor so near-zero entries do not blow up the ratio.
inline double max_rel_err(const std::vector<double>& got,
                          const std::vector<double>& want,
                          double floor_ = 1e-6) {
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(std::abs(want[i]), floor_);
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace oracle
