#include "dcs/core/nn.hpp"

#include <fmt/format.h>

#include <cmath>
#include <cstring>

#include "dcs/core/autograd.hpp"
#include "dcs/core/error.hpp"

namespace dcs {

using detail::Node;

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::insert(std::string name, Tensor init, bool trainable, bool buffer) {
  if (contains(name)) throw Error(fmt::format("parameter '{}' registered twice", name));
  if (!init.is_leaf()) throw Error(fmt::format("parameter '{}' must be a leaf tensor", name));
  init.set_requires_grad(trainable && !buffer);
  auto& list = buffer ? buffers_ : params_;
  list.push_back(Parameter{std::move(name), std::move(init), trainable && !buffer});
  return list.back();
}

Tensor ParameterSet::add(std::string name, Tensor init, bool trainable) {
  return insert(std::move(name), std::move(init), trainable, false).tensor;
}

Tensor ParameterSet::add_buffer(std::string name, Tensor init) {
  return insert(std::move(name), std::move(init), false, true).tensor;
}

Parameter& ParameterSet::get(std::string_view name) {
  for (auto& p : params_) if (p.name == name) return p;
  for (auto& p : buffers_) if (p.name == name) return p;
  throw Error(fmt::format("unknown parameter '{}'", name));
}

const Parameter& ParameterSet::get(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->get(name);
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto& p : params_) if (p.name == name) return true;
  for (const auto& p : buffers_) if (p.name == name) return true;
  return false;
}

std::vector<Parameter*> ParameterSet::parameters(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_) if (p.name.starts_with(prefix)) out.push_back(&p);
  return out;
}

std::vector<Parameter*> ParameterSet::buffers(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto& p : buffers_) if (p.name.starts_with(prefix)) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  for (const auto& p : buffers_) out.push_back(&p);
  return out;
}

void ParameterSet::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& p : params_) {
    if (!p.name.starts_with(prefix)) continue;
    p.trainable = trainable;
    p.tensor.set_requires_grad(trainable);
    if (!trainable) p.tensor.zero_grad();
  }
}

std::uint64_t ParameterSet::hash(std::string_view prefix) const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const Parameter* p : all()) {
    if (!p->name.starts_with(prefix)) continue;
    feed(p->name.data(), p->name.size());
    for (std::size_t e : p->tensor.shape()) {
      const std::uint64_t e64 = e;
      feed(&e64, sizeof e64);
    }
    const auto v = p->tensor.values();
    feed(v.data(), v.size() * sizeof(double));
  }
  return h;
}

void ParameterSet::round_to_float() {
  auto round_list = [](std::deque<Parameter>& list) {
    for (auto& p : list) {
      for (double& v : p.tensor.mutable_values()) v = static_cast<double>(static_cast<float>(v));
    }
  };
  round_list(params_);
  round_list(buffers_);
}

std::size_t ParameterSet::parameter_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_) if (p.name.starts_with(prefix)) n += p.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
               Rng& init, bool bias)
    : in_(in), out_(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = init.uniform(-bound, bound);
  weight_ = params.add(name + ".weight", Tensor(Shape{in, out}, std::move(w)));
  if (bias) {
    std::vector<double> b(out);
    for (double& v : b) v = init.uniform(-bound, bound);
    bias_ = params.add(name + ".bias", Tensor(Shape{out}, std::move(b)));
  }
}

void Linear::zero() {
  Tensor w = weight_;
  for (double& v : w.mutable_values()) v = 0.0;
  if (bias_.defined()) {
    Tensor b = bias_;
    for (double& v : b.mutable_values()) v = 0.0;
  }
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

void check_norm_operands(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
  if (x.dim() != 2) {
    throw Error(fmt::format("{}: expected [n x C] input, got {}", op, shape_string(x.shape())));
  }
  const std::size_t c = x.size(1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw Error(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(x.shape()),
                            shape_string(gamma.shape())));
  }
}

}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean, std::vector<double>* batch_var) {
  check_norm_operands(x, gamma, beta, "batch_norm");
  const std::size_t n = x.size(0), c = x.size(1);
  if (n < 2) throw Error("batch_norm: train mode needs at least 2 rows (variance undefined)");
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += xv[i * c + j];
  for (double& m : mu) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mu[j];
      var[j] += d * d;
    }
  for (double& v : var) v /= static_cast<double>(n);
  auto inv_std = std::make_shared<std::vector<double>>(c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
  auto xhat = std::make_shared<std::vector<double>>(n * c);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv[i * c + j] - mu[j]) * (*inv_std)[j];
      (*xhat)[i * c + j] = h;
      out[i * c + j] = gv[j] * h + bv[j];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  return make_result("batch_norm", Shape{n, c}, std::move(out), {x, gamma, beta},
                     [n, c, inv_std, xhat](Node& self) {
                       const auto& g = self.grad;
                       const auto& gam = self.parent_value(1);
                       std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           sum_g[j] += g[i * c + j];
                           sum_gh[j] += g[i * c + j] * (*xhat)[i * c + j];
                         }
                       if (auto gx = self.parent_grad(0); !gx.empty()) {
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < c; ++j) {
                             const std::size_t k = i * c + j;
                             gx[k] += gam[j] * (*inv_std)[j] *
                                      (g[k] - inv_n * sum_g[j] - (*xhat)[k] * inv_n * sum_gh[j]);
                           }
                       }
                       if (auto gg = self.parent_grad(1); !gg.empty())
                         for (std::size_t j = 0; j < c; ++j) gg[j] += sum_gh[j];
                       if (auto gb = self.parent_grad(2); !gb.empty())
                         for (std::size_t j = 0; j < c; ++j) gb[j] += sum_g[j];
                     });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> mean, std::span<const double> var, double eps) {
  check_norm_operands(x, gamma, beta, "batch_norm");
  const std::size_t n = x.size(0), c = x.size(1);
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto inv_std = std::make_shared<std::vector<double>>(c);
  auto mu = std::make_shared<std::vector<double>>(mean.begin(), mean.end());
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = gv[j] * (xv[i * c + j] - (*mu)[j]) * (*inv_std)[j] + bv[j];
  return make_result("batch_norm_eval", Shape{n, c}, std::move(out), {x, gamma, beta},
                     [n, c, inv_std, mu](Node& self) {
                       const auto& g = self.grad;
                       const auto& xs = self.parent_value(0);
                       const auto& gam = self.parent_value(1);
                       auto gx = self.parent_grad(0);
                       auto gg = self.parent_grad(1);
                       auto gb = self.parent_grad(2);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t k = i * c + j;
                           if (!gx.empty()) gx[k] += g[k] * gam[j] * (*inv_std)[j];
                           if (!gg.empty()) gg[j] += g[k] * (xs[k] - (*mu)[j]) * (*inv_std)[j];
                           if (!gb.empty()) gb[j] += g[k];
                         }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_norm_operands(x, gamma, beta, "layer_norm");
  const std::size_t n = x.size(0), c = x.size(1);
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto inv_std = std::make_shared<std::vector<double>>(n);
  auto xhat = std::make_shared<std::vector<double>>(n * c);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv[i * c + j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = gv[j] * h + bv[j];
    }
  }
  return make_result("layer_norm", Shape{n, c}, std::move(out), {x, gamma, beta},
                     [n, c, inv_std, xhat](Node& self) {
                       const auto& g = self.grad;
                       const auto& gam = self.parent_value(1);
                       auto gx = self.parent_grad(0);
                       auto gg = self.parent_grad(1);
                       auto gb = self.parent_grad(2);
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t i = 0; i < n; ++i) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t k = i * c + j;
                           const double dh = g[k] * gam[j];
                           s1 += dh;
                           s2 += dh * (*xhat)[k];
                           if (!gg.empty()) gg[j] += g[k] * (*xhat)[k];
                           if (!gb.empty()) gb[j] += g[k];
                         }
                         if (gx.empty()) continue;
                         for (std::size_t j = 0; j < c; ++j) {
                           const std::size_t k = i * c + j;
                           const double dh = g[k] * gam[j];
                           gx[k] += (*inv_std)[i] * (dh - inv_c * s1 - (*xhat)[k] * inv_c * s2);
                         }
                       }
                     });
}

BatchNorm1d::BatchNorm1d(ParameterSet& params, const std::string& name, std::size_t channels,
                         double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  gamma_ = params.add(name + ".gamma", Tensor::full(Shape{channels}, 1.0));
  beta_ = params.add(name + ".beta", Tensor::zeros(Shape{channels}));
  running_mean_ = params.add_buffer(name + ".running_mean", Tensor::zeros(Shape{channels}));
  running_var_ = params.add_buffer(name + ".running_var", Tensor::full(Shape{channels}, 1.0));
}

Tensor BatchNorm1d::operator()(const Tensor& x, bool training) const {
  if (!training) {
    return batch_norm_eval(x, gamma_, beta_, running_mean_.values(), running_var_.values(), eps_);
  }
  std::vector<double> mu, var;
  Tensor out = batch_norm_train(x, gamma_, beta_, eps_, &mu, &var);
  const double n = static_cast<double>(x.size(0));
  Tensor rm = running_mean_;
  Tensor rv = running_var_;
  auto m = rm.mutable_values();
  auto v = rv.mutable_values();
  for (std::size_t j = 0; j < mu.size(); ++j) {
    m[j] = (1.0 - momentum_) * m[j] + momentum_ * mu[j];
    v[j] = (1.0 - momentum_) * v[j] + momentum_ * var[j] * n / (n - 1.0);
  }
  return out;
}

Tensor BatchNorm1d::input_statistics(const Tensor& x) const {
  return batch_norm_train(x, gamma_, beta_, eps_);
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, std::size_t width, double eps)
    : eps_(eps) {
  gamma_ = params.add(name + ".gamma", Tensor::full(Shape{width}, 1.0));
  beta_ = params.add(name + ".beta", Tensor::zeros(Shape{width}));
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma_, beta_, eps_); }

Tensor dropout(const Tensor& x, double p, const ForwardContext& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout: probability must be below 1");
  if (!ctx.rng) throw Error("dropout: training mode needs a random generator");
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = ctx.rng->uniform() < p ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace dcs
