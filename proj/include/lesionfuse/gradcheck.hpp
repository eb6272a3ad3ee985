#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lesionfuse/tensor.hpp"

namespace lesionfuse {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;  // index into the checked tensor list
  std::size_t worst_index = 0;   // flat coordinate within that tensor
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of the scalar `loss_fn()` with respect to every
/// coordinate of every tensor in `inputs` against central differences with step `h`.
/// Relative error is |analytic - numeric| / max(1, |analytic|).
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                       double h = 1e-5) {
  Tape::current().clear();
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  if (loss.size() != 1) throw ContractError("check_gradients: loss must be scalar");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs)
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.size(), 0.0));

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto data = inputs[ti].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[ti][i]))
        throw NonFiniteError("non-finite value in gradient check at tensor " + std::to_string(ti) +
                             ", coordinate " + std::to_string(i));
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[ti][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = ti;
        result.worst_index = i;
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

/// Single-input form: max relative error of d f(x)/dx.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5) {
  return check_gradients([&] { return f(x); }, {x}, h).max_rel_error;
}

}  // namespace lesionfuse
