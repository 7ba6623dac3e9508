#pragma once

// Extension surface for fused operations defined outside tensor.cpp
// (distances, normalization layers). Ordinary callers only need tensor.hpp.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dcs/core/tensor.hpp"

namespace dcs {
namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool grad_ready = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  /// Reads this node's `grad` and accumulates into parents that require it.
  std::function<void(Node&)> backward;

  std::span<double> grad_buffer() {
    if (!grad_ready) {
      grad.assign(value.size(), 0.0);
      grad_ready = true;
    }
    return grad;
  }

  /// Gradient buffer of parent `i`, or an empty span when the parent does
  /// not require a gradient.
  std::span<double> parent_grad(std::size_t i) {
    Node& p = *parents[i];
    if (!p.requires_grad) return {};
    return p.grad_buffer();
  }

  const std::vector<double>& parent_value(std::size_t i) const {
    return parents[i]->value;
  }
};

}  // namespace detail

/// Builds the result of an operation. The node keeps its parents and backward
/// function only when some parent requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& parents,
                   std::function<void(detail::Node&)> backward);

}  // namespace dcs
