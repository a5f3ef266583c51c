#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "oudefend/autodiff.hpp"
#include "oudefend/gradcheck.hpp"

namespace oudefend::testing {

inline Tensor random_normal(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor random_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor random_integers(Shape shape, std::mt19937_64& rng, int lo, int hi) {
  std::uniform_int_distribution<int> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

using oudefend::GraphFn;
using oudefend::max_gradient_error;

}  // namespace oudefend::testing
