#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "dcs/core/rng.hpp"
#include "dcs/core/tensor.hpp"

namespace dcs {

/// A named learnable tensor. When `trainable` is false the tensor takes no
/// part in differentiation and optimizer steps leave it bit-identical.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// Ordered registry of a model's parameters and persistent buffers (batch-norm
/// running statistics). Names are unique across both.
class ParameterSet {
 public:
  Tensor add(std::string name, Tensor init, bool trainable = true);
  Tensor add_buffer(std::string name, Tensor init);

  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  /// Parameters (not buffers) whose name starts with `prefix`.
  std::vector<Parameter*> parameters(std::string_view prefix = "");
  std::vector<Parameter*> buffers(std::string_view prefix = "");
  /// Parameters followed by buffers, in registration order.
  std::vector<const Parameter*> all() const;

  void set_trainable(std::string_view prefix, bool trainable);

  /// FNV-1a over names, shapes and value bytes of every parameter and buffer
  /// under `prefix`.
  std::uint64_t hash(std::string_view prefix = "") const;

  /// Rounds every stored value through IEEE binary32.
  void round_to_float();

  std::size_t parameter_count(std::string_view prefix = "") const;

 private:
  Parameter& insert(std::string name, Tensor init, bool trainable, bool buffer);

  std::deque<Parameter> params_;
  std::deque<Parameter> buffers_;
};

/// Per-call forward settings. `rng` feeds dropout and other stochastic layers.
struct ForwardContext {
  bool training = true;
  Rng* rng = nullptr;
};

/// Shared affine map applied to every row. Weights are stored [in x out].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& init,
         bool bias = true);

  Tensor operator()(const Tensor& x) const { return linear(x, weight_, bias_); }

  /// Zeroes weight and bias.
  void zero();

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

/// Batch normalization over the rows of an [n x C] input. Train mode uses
/// batch statistics and updates running estimates with momentum 0.1
/// (unbiased variance); eval mode normalizes with the running estimates.
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(ParameterSet& params, const std::string& name, std::size_t channels,
              double momentum = 0.1, double eps = 1e-5);

  Tensor operator()(const Tensor& x, bool training) const;
  /// Normalizes with the statistics of `x` itself; running averages are
  /// left untouched.
  Tensor input_statistics(const Tensor& x) const;

 private:
  Tensor gamma_;
  Tensor beta_;
  Tensor running_mean_;
  Tensor running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, std::size_t width, double eps = 1e-5);

  Tensor operator()(const Tensor& x) const;

 private:
  Tensor gamma_;
  Tensor beta_;
  double eps_ = 1e-5;
};

// Functional forms of the normalization layers, exposed for gradient checks.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean = nullptr,
                        std::vector<double>* batch_var = nullptr);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> mean, std::span<const double> var, double eps);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Inverted dropout; identity when not training or p == 0.
Tensor dropout(const Tensor& x, double p, const ForwardContext& ctx);

}  // namespace dcs
