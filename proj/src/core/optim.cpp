#include "dcs/core/optim.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "dcs/core/error.hpp"

namespace dcs {

AdamW::AdamW(std::vector<Parameter*> params, double lr, double weight_decay)
    : params_(std::move(params)) {
  state_.lr = lr;
  state_.weight_decay = weight_decay;
  for (const Parameter* p : params_) {
    state_.m.emplace_back(p->tensor.numel(), 0.0);
    state_.v.emplace_back(p->tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  for (const Parameter* p : params_) {
    if (p->trainable && !p->tensor.has_grad()) {
      throw Error(fmt::format("optimizer step: parameter '{}' has no gradient (call backward first)",
                              p->name));
    }
  }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(state_.beta1, t);
  const double bc2 = 1.0 - std::pow(state_.beta2, t);
  const double decay = 1.0 - state_.lr * state_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state_.beta1 * m[j] + (1.0 - state_.beta1) * g[j];
      v[j] = state_.beta2 * v[j] + (1.0 - state_.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] = w[j] * decay - state_.lr * m_hat / (std::sqrt(v_hat) + state_.eps);
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->tensor.zero_grad();
}

double CosineWarmupSchedule::lr_at(std::size_t epoch) const {
  if (epoch > total) {
    throw Error(fmt::format("lr_at: epoch {} outside [0, {}]", epoch, total));
  }
  if (epoch < warmup) {
    return base * static_cast<double>(epoch) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base;
  const double progress =
      static_cast<double>(epoch - warmup) / static_cast<double>(total - warmup);
  return min_lr + (base - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace dcs
