#pragma once

// Central finite-difference verification of analytic gradients (64-bit only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qghc/autodiff.hpp"

namespace qghc {

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  double max_rel_err = 0;
  std::vector<GradCheckEntry> entries;
  bool passed = false;
};

struct NamedVar {
  std::string name;
  Var<double> var;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// `f` must rebuild the graph from the current values of `params` on every
// call. Up to `samples_per_param` coordinates of each parameter are checked.
inline GradCheckReport finite_diff_check(const std::function<Var<double>()>& f, const std::vector<NamedVar>& params,
                                         double eps, double tol, std::size_t samples_per_param, Rng& rng) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) throw ConfigError("finite_diff_check: eps must lie in [1e-5, 1e-2]");

  for (const auto& p : params) p.var.node()->grad = Tensor<double>();
  Var<double> loss = f();
  if (!std::isfinite(loss.value().item())) throw NumericError("finite_diff_check: f is non-finite at the base point");
  backward(loss);

  GradCheckReport rep;
  for (const auto& p : params) {
    const Tensor<double> analytic = p.var.grad();
    auto& data = p.var.node()->value.vec();
    std::vector<std::size_t> coords(data.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > samples_per_param) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(samples_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (auto idx : coords) {
      const double orig = data[idx];
      auto eval_at = [&](double x) {
        data[idx] = x;
        double v = f().value().item();
        data[idx] = orig;
        if (!std::isfinite(v))
          throw NumericError("finite_diff_check: f non-finite at " + p.name + "[" + std::to_string(idx) + "]");
        return v;
      };
      const double fp = eval_at(orig + eps);
      const double fm = eval_at(orig - eps);
      GradCheckEntry e;
      e.param = p.name;
      e.index = idx;
      e.analytic = analytic[idx];
      e.numeric = (fp - fm) / (2 * eps);
      e.rel_err = relative_error(e.analytic, e.numeric);
      rep.max_rel_err = std::max(rep.max_rel_err, e.rel_err);
      rep.entries.push_back(e);
    }
  }
  for (const auto& p : params) p.var.node()->grad = Tensor<double>();
  rep.passed = rep.max_rel_err < tol;
  return rep;
}

}  // namespace qghc
