#pragma once

#include <functional>
#include <string>
#include <vector>

#include "snr/graph.hpp"

namespace snr {

struct GradCheckReport {
  double max_err = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::string worst_param;
  Index worst_coord = -1;

  bool pass(double tol) const { return max_err < tol; }
};

// Central finite differences against the analytic gradient, in double
// precision. `build` reconstructs the scalar objective from the current
// parameter values on every call. The error metric is
// |a - n| / max(1, |a|, |n|): absolute for small gradients, relative above 1.
inline GradCheckReport grad_check(const std::vector<Parameter<double>*>& inputs,
                                  const std::function<Var<double>(Graph<double>&)>& build, double step = 1e-4) {
  if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");

  auto eval = [&](bool with_grad) {
    Graph<double> g;
    Var<double> loss = build(g);
    if (loss.shape().rank != 0) throw std::invalid_argument("grad_check: objective must be scalar");
    if (with_grad) g.backward(loss);
    return loss.scalar();
  };

  for (Parameter<double>* p : inputs) p->zero_grad();
  eval(true);
  std::vector<ArrayX<double>> analytic;
  analytic.reserve(inputs.size());
  for (Parameter<double>* p : inputs) analytic.push_back(p->grad);

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
    Parameter<double>& p = *inputs[pi];
    for (Index j = 0; j < p.count(); ++j) {
      const double saved = p.value[j];
      p.value[j] = saved + step;
      const double fp = eval(false);
      p.value[j] = saved - step;
      const double fm = eval(false);
      p.value[j] = saved;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = analytic[pi][j];
      const double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      if (err > rep.max_err) {
        rep.max_err = err;
        rep.worst_analytic = ana;
        rep.worst_numeric = num;
        rep.worst_param = p.name;
        rep.worst_coord = j;
      }
    }
  }
  return rep;
}

}  // namespace snr
