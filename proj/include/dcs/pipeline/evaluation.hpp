#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dcs/pipeline/stages.hpp"

namespace dcs {

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Stratified split: in every class, round(holdout * count) clouds chosen
/// with `seed` go to the test side.
DataSplit split_dataset(const Dataset& data, double holdout, std::uint64_t seed);

struct FinetuneResult {
  StageResult stage;
  double accuracy = 0.0;
  std::uint64_t sampler_hash_before = 0;
  std::uint64_t sampler_hash_after = 0;
};

/// Top-1 accuracy of the classifier over `data` (eval mode).
double evaluate_accuracy(const DcsNetModel& model, const Dataset& data);

/// Classification finetuning from a finished stage-3 checkpoint. With
/// `stop_gradient` the sampler is frozen and run on running statistics.
FinetuneResult finetune(DcsNetModel& model, const DataSplit& data, const Checkpoint& stage3,
                        const StagePlan& plan, bool stop_gradient, const StageOptions& options);

/// The same training loop on whatever weights `model` currently holds; used
/// for the random-initialization baseline.
FinetuneResult finetune_from_current(DcsNetModel& model, const DataSplit& data,
                                     const StagePlan& plan, bool stop_gradient,
                                     const StageOptions& options);

struct FewShotTask {
  std::size_t ways = 5;
  std::size_t shots = 10;
  std::size_t queries = 20;
  std::uint64_t seed = 1;
  std::size_t head_epochs = 50;
  double lr = 1e-3;
};

struct Episode {
  std::vector<int> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  double accuracy = 0.0;
};

struct FewShotResult {
  std::vector<Episode> episodes;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Support/query indices of one episode, deterministic in `episode_seed`.
Episode sample_episode(const Dataset& data, const FewShotTask& task, std::uint64_t episode_seed);

/// Per episode: a fresh head trained on frozen classification features of
/// the support set, evaluated on the query set. Reports mean and population
/// standard deviation of the episode accuracies.
FewShotResult few_shot_eval(const DcsNetModel& model, const Dataset& data, const FewShotTask& task,
                            std::size_t episodes);

struct CompareRow {
  std::string id;
  double fps = 0.0;
  double dcs = 0.0;
  double random = 0.0;
};

struct CompareReport {
  std::vector<CompareRow> rows;
  double mean_fps = 0.0;
  double mean_dcs = 0.0;
  double mean_random = 0.0;
  /// Fraction of clouds whose DCS centers beat the random subset.
  double dcs_beats_random = 0.0;

  /// CSV with header id,fps,dcs,random and a trailing mean row.
  void write_csv(std::ostream& out) const;
};

/// Chamfer (L2) from G centers to each cloud for FPS (seed index 0), noise-
/// free DCS, and a uniformly random subset of the cloud's points.
CompareReport baseline_compare(const DcsNetModel& model, const Dataset& data, std::uint64_t seed);

}  // namespace dcs
