#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "nfres/error.hpp"
#include "nfres/tensor.hpp"

namespace nfres {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;
};

/// Relative error with the max(|a|, |b|, 1e-8) denominator.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences (f(x+h) - f(x-h)) / 2h of `loss` against `analytic`,
/// element by element over every tensor in `inputs`.
///
/// The difference is also taken at h/2. Where the two disagree by more than
/// `kink_tol` (relative), a ReLU kink lies within the step and no derivative
/// estimate is reliable; such elements are counted and skipped. On smooth or
/// linear pieces the two agree to O(h^2).
template <typename Loss>
GradCheckReport finite_difference_check(Loss&& loss, const std::vector<Tensor<double>*>& inputs,
                                        const std::vector<Tensor<double>>& analytic, double step,
                                        double kink_tol = 1e-6) {
  if (inputs.size() != analytic.size()) throw InvalidArgument("finite_difference_check: gradient count mismatch");
  if (!(step > 0.0)) throw InvalidArgument("finite_difference_check: step must be positive");
  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<double>& x = *inputs[t];
    if (analytic[t].shape() != x.shape()) {
      throw InvalidArgument("finite_difference_check: analytic gradient " + std::to_string(t) + " has shape " +
                            shape_string(analytic[t].shape()) + ", input has " + shape_string(x.shape()));
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      auto central = [&](double h) {
        x.mutable_data()[i] = orig + h;
        const double plus = loss();
        x.mutable_data()[i] = orig - h;
        const double minus = loss();
        x.mutable_data()[i] = orig;
        return (plus - minus) / (2.0 * h);
      };
      const double numeric = central(step);
      const double half = central(0.5 * step);
      if (relative_error(numeric, half) > kink_tol) {
        ++report.kinks_skipped;
        continue;
      }
      report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic[t][i], numeric));
      ++report.checked;
    }
  }
  return report;
}

/// sum(y * r): the scalar whose gradient w.r.t. y is r.
template <typename T>
double projected_sum(const Tensor<T>& y, const Tensor<T>& r) {
  if (y.shape() != r.shape()) throw InvalidArgument("projected_sum: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * static_cast<double>(r[i]);
  return s;
}

}  // namespace nfres
