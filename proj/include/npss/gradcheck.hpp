#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "npss/autodiff.hpp"
#include "npss/errors.hpp"
#include "npss/rng.hpp"

namespace npss {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar on the tape it is given and must be a deterministic function of the
/// parameter values. For every parameter up to `coords_per_param` coordinates (all of them
/// when the parameter is smaller) are perturbed by +-step; the error per coordinate is
/// |analytic - numeric| / max(1, |numeric|).
template <class T>
GradCheckResult finite_difference_check(const std::function<Var(Tape<T>&)>& f,
                                        const std::vector<BasicParameter<T>*>& params, double step = 1e-4,
                                        std::uint64_t seed = 0, std::size_t coords_per_param = 12) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    Var root = f(tape);
    tape.backward(root);
  }
  std::vector<BasicTensor<T>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  auto eval = [&]() -> double {
    Tape<T> tape(false);
    const double v = static_cast<double>(tape.value(f(tape))[0]);
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: objective is not finite");
    return v;
  };

  Rng rng(seed, "gradcheck");
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi]->value;
    std::vector<std::size_t> coords;
    if (value.size() <= coords_per_param) {
      for (std::size_t i = 0; i < value.size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < coords_per_param; ++i)
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(value.size()) - 1)));
    }
    for (std::size_t idx : coords) {
      const T saved = value[idx];
      value[idx] = static_cast<T>(saved + step);
      const double up = eval();
      value[idx] = static_cast<T>(saved - step);
      const double down = eval();
      value[idx] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = std::abs(static_cast<double>(analytic[pi][idx]) - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = params[pi]->name;
        result.worst_index = idx;
      }
    }
  }
  for (auto* p : params) p->zero_grad();
  return result;
}

}  // namespace npss
