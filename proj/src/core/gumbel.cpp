#include "dcs/core/gumbel.hpp"

#include <fmt/format.h>

#include <cmath>

#include "dcs/core/error.hpp"

namespace dcs {

std::vector<double> sample_gumbel_noise(std::size_t count, Rng& rng) {
  std::vector<double> out(count);
  for (double& g : out) g = -std::log(-std::log(rng.uniform_open()));
  return out;
}

Tensor gumbel_softmax(const Tensor& logits, double tau, std::span<const double> noise,
                      GumbelMode mode) {
  if (!(tau > 0.0)) throw Error(fmt::format("gumbel_softmax: temperature must be > 0, got {}", tau));
  if (logits.dim() != 2) {
    throw Error(fmt::format("gumbel_softmax: expected [N x G] logits, got {}",
                            shape_string(logits.shape())));
  }
  if (logits.size(1) < 2) throw Error("gumbel_softmax: need at least 2 categories");
  if (noise.size() != logits.numel()) {
    throw Error(fmt::format("gumbel_softmax: noise has {} entries, logits {}", noise.size(),
                            logits.numel()));
  }
  Tensor g(logits.shape(), std::vector<double>(noise.begin(), noise.end()));
  Tensor soft = softmax(scale(add(logits, g), 1.0 / tau), 1);
  if (mode == GumbelMode::Soft) return soft;

  const std::size_t n = logits.size(0), c = logits.size(1);
  const auto y = soft.values();
  std::vector<double> shift(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (y[i * c + j] > y[i * c + best]) best = j;
    for (std::size_t j = 0; j < c; ++j) shift[i * c + j] = (j == best ? 1.0 : 0.0) - y[i * c + j];
  }
  return add(soft, Tensor(logits.shape(), std::move(shift)));
}

Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng, GumbelMode mode) {
  const auto noise = sample_gumbel_noise(logits.numel(), rng);
  return gumbel_softmax(logits, tau, noise, mode);
}

}  // namespace dcs
