#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dcs/core/optim.hpp"
#include "dcs/io/checkpoint.hpp"
#include "dcs/pipeline/model.hpp"

namespace dcs {

enum class StageId : std::uint32_t { Stage1 = 1, Stage2 = 2, Stage3 = 3, Finetune = 4 };

std::string to_string(StageId id);

struct LossRecipe {
  double emd_weight = 1.0;
  double local_weight = 1.0;
  double global_weight = 1.0;
  double prior_weight = 0.0;
  GlobalLoss global_mode = GlobalLoss::L2;
};

struct StagePlan {
  StageId stage = StageId::Stage1;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  CosineWarmupSchedule schedule;
  double weight_decay = 0.0;
  LossRecipe recipe;
  /// Parameter-name prefixes trained in this stage; everything else is
  /// frozen and hashed before and after to prove it stayed bit-identical.
  std::vector<std::string> trainable;
};

/// The plan for a stage as configured. Finetune trains the sampler too only
/// when `stop_gradient` is false.
StagePlan make_plan(const RunConfig& config, StageId stage, bool stop_gradient = true);

/// Epoch-averaged loss terms. CSV: epoch,lr,<term>... with a header row.
struct LossLog {
  struct Row {
    std::size_t epoch = 0;
    double lr = 0.0;
    std::vector<double> values;
  };
  std::vector<std::string> terms;
  std::vector<Row> rows;

  std::string csv() const;
  void write_csv(std::ostream& out) const;
  /// Column of one term across epochs.
  std::vector<double> series(const std::string& term) const;
};

struct StageOptions {
  std::uint64_t seed = 1;
  /// Continue a partially trained stage from this checkpoint.
  const Checkpoint* resume = nullptr;
  /// Stop (and checkpoint) after this epoch instead of the planned last one.
  std::optional<std::size_t> stop_after;
  std::function<void(const LossLog::Row&)> on_epoch;
};

struct StageResult {
  Checkpoint checkpoint;
  LossLog log;
  std::uint64_t frozen_hash = 0;
};

/// Weighted total of one batch plus the unweighted term values to log.
struct BatchLoss {
  Tensor total;
  std::vector<double> values;
};

using BatchFn = std::function<BatchLoss(std::span<const std::size_t> batch, std::size_t epoch, Rng& rng)>;

/// Shared epoch loop: freezes everything outside `plan.trainable`, shuffles
/// the samples each epoch with a generator forked from the seed, steps AdamW
/// once per batch, and checks that frozen weights stayed bit-identical.
StageResult run_training(DcsNetModel& model, const StagePlan& plan, std::size_t samples,
                         std::vector<std::string> terms, const BatchFn& batch_fn,
                         const StageOptions& options);

/// Stage 1: encoder and decoder on the chamfer + EMD reconstruction loss.
StageResult run_stage1(DcsNetModel& model, const Dataset& data, const StagePlan& plan,
                       const StageOptions& options);
/// Stage 2: U on the composition-point chamfer loss; needs a finished
/// stage-1 checkpoint (or a stage-2 checkpoint to resume).
StageResult run_stage2(DcsNetModel& model, const Dataset& data, const Checkpoint& previous,
                       const StagePlan& plan, const StageOptions& options);
/// Stage 3: U and the point transformer on local + global reconstruction;
/// needs a finished stage-2 checkpoint (or a stage-3 checkpoint to resume).
StageResult run_stage3(DcsNetModel& model, const Dataset& data, const Checkpoint& previous,
                       const StagePlan& plan, const StageOptions& options);

/// Loads `previous` into the model after checking it is a finished
/// checkpoint of `required`. Throws with a diagnostic otherwise.
void load_predecessor(DcsNetModel& model, const Checkpoint& previous, StageId required);

/// Stage-3 loss terms of one cloud: {local, global, prior}, unweighted.
struct Stage3Terms {
  Tensor local;
  Tensor global;
  Tensor prior;
  CenterSet centers;
};
Stage3Terms stage3_terms(const DcsNetModel& model, const PreparedCloud& cloud, const LossRecipe& recipe,
                         double tau, Rng& rng, bool bn_training);

/// L2 norm of the gradient of the global center loss with respect to U's
/// parameters for one cloud, with fixed Gumbel noise drawn from `seed`.
/// With `detach_sampler` U is frozen first and the norm is taken over
/// whatever gradient reaches it (none).
double sampler_gradient_norm(DcsNetModel& model, const Tensor& cloud, std::uint64_t seed,
                             bool detach_sampler);

}  // namespace dcs
