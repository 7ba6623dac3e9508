#pragma once

#include <cstdint>
#include <vector>

#include "dcs/core/nn.hpp"

namespace dcs {

/// Moments and hyper-parameters of an AdamW optimizer. Moment vectors are
/// indexed in the order of the parameter list the optimizer was built with.
struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
  double lr = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay:
///   p <- p * (1 - lr * wd)
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Parameters whose `trainable` flag is false are skipped entirely.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, double lr, double weight_decay);

  /// Applies one update from the gradients left by `backward()` and then
  /// clears them. Throws if a trainable parameter has no gradient.
  void step();
  void zero_grad();

  void set_lr(double lr) { state_.lr = lr; }
  double lr() const { return state_.lr; }

  AdamWState& state() { return state_; }
  const AdamWState& state() const { return state_; }
  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  AdamWState state_;
};

/// Linear warmup from 0 to `base` over `warmup` epochs, then cosine decay to
/// `min_lr` at `total`.
struct CosineWarmupSchedule {
  double base = 5e-4;
  std::size_t warmup = 10;
  std::size_t total = 300;
  double min_lr = 1e-6;

  double lr_at(std::size_t epoch) const;
};

}  // namespace dcs
