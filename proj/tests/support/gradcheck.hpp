#pragma once

// Central finite-difference gradient oracle. Independent of the autodiff
// path: it only re-evaluates a scalar function of raw input buffers.

#include <cmath>
#include <functional>
#include <vector>

namespace pavt::testing {

using Buffers = std::vector<std::vector<double>>;
using ScalarFn = std::function<double(const Buffers&)>;

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-3});
  return std::abs(a - b) / denom;
}

// Max relative error between analytic gradients and the central difference
// (f(x+h) - f(x-h)) / 2h over every entry of every input buffer.
inline double max_grad_rel_err(const ScalarFn& f, Buffers x,
                               const Buffers& analytic, double h = 1e-5) {
  double worst = 0.0;
  for (size_t b = 0; b < x.size(); ++b) {
    for (size_t i = 0; i < x[b].size(); ++i) {
      const double keep = x[b][i];
      x[b][i] = keep + h;
      const double fp = f(x);
      x[b][i] = keep - h;
      const double fm = f(x);
      x[b][i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[b][i], numeric));
    }
  }
  return worst;
}

}  // namespace pavt::testing
