#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dcs/core/gumbel.hpp"
#include "dcs/core/nn.hpp"
#include "dcs/geometry/grouping.hpp"

namespace dcs {

struct SamplerConfig {
  std::size_t groups = 64;
  std::size_t points_per_group = 32;
  std::size_t depth = 2;
  std::size_t hidden = 128;
  double temperature = 1.0;
  /// Multiplicative temperature decay per epoch; 1 disables annealing.
  double anneal = 1.0;
  double prior_weight = 0.0;
  bool normalize_columns = true;
  bool hard = false;
  /// Outside training, normalize U with the statistics of the input cloud
  /// (as during training) instead of the running averages.
  bool per_cloud_stats = true;

  void validate() const;
  /// Temperature in effect during 1-based `epoch`.
  double temperature_at(std::size_t epoch) const;
};

/// N x G row-stochastic assignment of points to groups.
struct ProbabilityMap {
  Tensor matrix;
  double temperature = 1.0;
  bool relaxed = false;

  std::size_t rows() const { return matrix.size(0); }
  std::size_t groups() const { return matrix.size(1); }
};

/// Per-point network U: (Linear -> BatchNorm -> ReLU) x (depth - 1), then
/// Linear -> BatchNorm to G logits. Batch statistics are taken over the
/// points of one input; outside training they come from the running
/// averages only when per_cloud_stats is off.
class CompositionNet {
 public:
  CompositionNet() = default;
  CompositionNet(ParameterSet& params, const std::string& name, const SamplerConfig& config,
                 Rng& init);

  /// [N x G] logits for inputs [N x 3].
  Tensor logits(const Tensor& x, bool training) const;
  /// Row softmax of the logits.
  ProbabilityMap operator()(const Tensor& x, bool training) const;

  /// Zeroes the last linear layer, making every row of the map uniform.
  void zero_final_layer();

  std::size_t groups() const { return groups_; }

 private:
  std::vector<Linear> layers_;
  std::vector<BatchNorm1d> norms_;
  std::size_t groups_ = 0;
  bool per_cloud_stats_ = true;
};

/// Chamfer (L2) between the composition points weighted_centers(decoded, Q)
/// and the input cloud, averaging the first term over groups.
Tensor stage2_loss(const Tensor& cloud, const Tensor& decoded, const ProbabilityMap& q,
                   bool normalize_columns = true);

struct DcsSample {
  CenterSet centers;
  ProbabilityMap raw;      ///< softmax(U(p))
  ProbabilityMap relaxed;  ///< Gumbel-softmax of U's logits
  Patches patches;
};

/// Differentiable center sampling on a cloud [N x 3]. With empty `noise` the
/// relaxed map is the noise-free softmax(logits / tau). `bn_training`
/// selects batch statistics (and running-stat updates) in U's norms.
DcsSample dcs_sample(const Tensor& cloud, const CompositionNet& net, const SamplerConfig& config,
                     double tau, std::span<const double> noise, bool bn_training);
/// Draws the Gumbel noise from `rng`; a null `rng` means no noise.
DcsSample dcs_sample(const Tensor& cloud, const CompositionNet& net, const SamplerConfig& config,
                     double tau, Rng* rng, bool bn_training);

enum class GlobalLoss { L1, L2, L1L2, Mmd };

GlobalLoss parse_global_loss(const std::string& name);
std::string to_string(GlobalLoss mode);

/// Center reconstruction loss between one center set and its cloud. The
/// single-cloud MMD reduces to the L2 chamfer distance.
Tensor global_recon_loss(const CenterSet& centers, const Tensor& cloud, GlobalLoss mode);
/// Batch form: mean of the per-cloud losses, or for MMD the set-level
/// distance between all center sets and all clouds of the batch.
Tensor global_recon_loss(std::span<const Tensor> centers, std::span<const Tensor> clouds,
                         GlobalLoss mode);

/// weight * KL(column mass || uniform), column mass m_j = mean_i Q_ij.
Tensor uniform_prior_penalty(const Tensor& q, double weight = 1.0);

/// One CSV row per point: x, y, z, argmax group, max probability, then the
/// G probabilities. No header.
void write_heatmap(std::ostream& out, const Tensor& coords, const ProbabilityMap& q);

}  // namespace dcs
