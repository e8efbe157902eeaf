#pragma once

#include <random>

#include "tsubf/tensor.hpp"

namespace tsubf {

using Rng = std::mt19937_64;

template <class T>
void fill_uniform(Tensor<T>& t, Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<T> d(lo, hi);
  for (long long i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
}

template <class T>
void fill_normal(Tensor<T>& t, Rng& rng, T mean, T stddev) {
  std::normal_distribution<T> d(mean, stddev);
  for (long long i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
}

template <class T>
Tensor<T> random_uniform(Shape shape, Rng& rng, T lo = T(-1), T hi = T(1)) {
  Tensor<T> t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return t;
}

}  // namespace tsubf
