#pragma once

#include <span>
#include <vector>

#include "dcs/core/rng.hpp"
#include "dcs/core/tensor.hpp"

namespace dcs {

enum class GumbelMode {
  Soft,
  /// Forward pass emits the one-hot argmax; backward uses the soft gradient.
  HardStraightThrough,
};

/// `count` draws of -log(-log(u)), u = rng.uniform_open().
std::vector<double> sample_gumbel_noise(std::size_t count, Rng& rng);

/// Row-wise softmax((logits + noise) / tau) over an [N x G] matrix.
/// Differentiable in `logits` for the given noise.
Tensor gumbel_softmax(const Tensor& logits, double tau, std::span<const double> noise,
                      GumbelMode mode = GumbelMode::Soft);
Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng,
                      GumbelMode mode = GumbelMode::Soft);

}  // namespace dcs
