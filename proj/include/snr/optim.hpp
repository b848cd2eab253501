#pragma once

#include <cmath>
#include <vector>

#include "snr/graph.hpp"

namespace snr {

// Adam with bias correction and decoupled weight decay applied directly to
// the parameter values each step.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Parameter<S>*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.0)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (Parameter<S>* p : params_) {
      m_.push_back(ArrayX<S>::Zero(p->count()));
      v_.push_back(ArrayX<S>::Zero(p->count()));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<S>& p = *params_[i];
      m_[i] = static_cast<S>(beta1_) * m_[i] + static_cast<S>(1.0 - beta1_) * p.grad;
      v_[i] = static_cast<S>(beta2_) * v_[i] + static_cast<S>(1.0 - beta2_) * p.grad.square();
      for (Index j = 0; j < p.count(); ++j) {
        const double mhat = static_cast<double>(m_[i][j]) / bc1;
        const double vhat = static_cast<double>(v_[i][j]) / bc2;
        double val = static_cast<double>(p.value[j]);
        val -= lr * mhat / (std::sqrt(vhat) + eps_);
        val -= lr * weight_decay_ * static_cast<double>(p.value[j]);
        p.value[j] = static_cast<S>(val);
      }
    }
  }

  void zero_grad() {
    for (Parameter<S>* p : params_) p->zero_grad();
  }

 private:
  std::vector<Parameter<S>*> params_;
  std::vector<ArrayX<S>> m_, v_;
  long t_ = 0;
  double beta1_, beta2_, eps_, weight_decay_;
};

}  // namespace snr
