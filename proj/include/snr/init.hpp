#pragma once

#include <cmath>
#include <random>

#include "snr/graph.hpp"

namespace snr {

template <typename S>
void fill_normal(Parameter<S>& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < p.count(); ++i) p.value[i] = static_cast<S>(dist(rng));
}

// He-normal for layers feeding a ReLU: std = sqrt(2 / fan_in).
template <typename S>
void fill_he_normal(Parameter<S>& p, std::mt19937_64& rng, Index fan_in) {
  fill_normal(p, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// Xavier-normal for linear layers: std = sqrt(2 / (fan_in + fan_out)).
template <typename S>
void fill_xavier_normal(Parameter<S>& p, std::mt19937_64& rng, Index fan_in, Index fan_out) {
  fill_normal(p, rng, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
}

template <typename S>
void fill_constant(Parameter<S>& p, S v) {
  p.value.setConstant(v);
}

}  // namespace snr
