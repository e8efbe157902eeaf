#pragma once

#include <functional>
#include <random>
#include <vector>

#include "tsubf/tensor.hpp"

// Central finite-difference verification of tape gradients, always in double
// precision. The forward function must be a pure function of the leaves.

namespace tsubf {

struct GradCheckResult {
  double max_rel_err = 0;
  double max_abs_err = 0;
  long long coords_checked = 0;
};

using GradCheckFn = std::function<Tensor<double>(Tape<double>&,
                                                 std::vector<Tensor<double>>&)>;

// Compares analytic gradients of f w.r.t. every leaf against central
// differences. When max_coords_per_leaf >= 0, a random subset of coordinates
// per leaf is probed instead of all of them.
inline GradCheckResult check_gradients(const GradCheckFn& f,
                                       std::vector<Tensor<double>> leaves,
                                       double h = 1e-5,
                                       long long max_coords_per_leaf = -1,
                                       std::uint64_t seed = 7) {
  GradCheckResult r;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Tensor<double>> tracked;
    tracked.reserve(leaves.size());
    for (auto& l : leaves) {
      Tensor<double> t = l.clone();
      tape.watch(t);
      tracked.push_back(t);
    }
    Tensor<double> loss = f(tape, tracked);
    tape.backward(loss);
    for (auto& t : tracked) analytic.push_back(tape.grad_or_zero(t));
  }
  auto eval = [&](const std::vector<Tensor<double>>& pts) {
    Tape<double> tape;  // fresh tape, gradients unused
    std::vector<Tensor<double>> copy;
    for (const auto& p : pts) copy.push_back(p.clone());
    return f(tape, copy).item();
  };
  std::mt19937_64 rng(seed);
  for (size_t li = 0; li < leaves.size(); ++li) {
    const long long n = leaves[li].size();
    std::vector<long long> coords;
    if (max_coords_per_leaf < 0 || max_coords_per_leaf >= n) {
      coords.resize(static_cast<size_t>(n));
      for (long long i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      std::uniform_int_distribution<long long> d(0, n - 1);
      for (long long i = 0; i < max_coords_per_leaf; ++i)
        coords.push_back(d(rng));
    }
    for (long long c : coords) {
      const double orig = leaves[li].data()[c];
      leaves[li].data()[c] = orig + h;
      const double fp = eval(leaves);
      leaves[li].data()[c] = orig - h;
      const double fm = eval(leaves);
      leaves[li].data()[c] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[li].data()[c];
      const double abs_err = std::fabs(a - numeric);
      const double denom =
          std::max({std::fabs(a), std::fabs(numeric), 1e-4});
      r.max_abs_err = std::max(r.max_abs_err, abs_err);
      r.max_rel_err = std::max(r.max_rel_err, abs_err / denom);
      ++r.coords_checked;
    }
  }
  return r;
}

}  // namespace tsubf
