#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcs/core/tensor.hpp"

namespace dcs {

/// Scalar function of a list of leaf tensors.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradcheckResult {
  /// |a - n| / max(|a|, |n|, 1e-6) over the concatenated gradient vectors.
  double error = 0.0;
  /// False when central differences at h and h/4 disagree, i.e. some
  /// perturbation crosses a kink (ReLU, max, nearest-neighbour switch).
  bool smooth = true;
};

/// Compares reverse-mode gradients of `f` at `inputs` with central finite
/// differences of step `h`, perturbing every value of every input that
/// requires a gradient.
GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5);

struct GradcheckCase {
  std::string name;
  std::size_t instances = 0;
  /// Draws rejected because the function was not smooth around them.
  std::size_t redrawn = 0;
  double max_error = 0.0;
  bool passed = false;
};

/// Finite-difference checks of every differentiable operation on
/// `instances` random small inputs each.
std::vector<GradcheckCase> run_gradcheck_suite(std::size_t instances = 20, std::uint64_t seed = 1,
                                               double tolerance = 1e-4);

}  // namespace dcs
