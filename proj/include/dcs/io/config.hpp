#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dcs/backbone/backbone.hpp"
#include "dcs/sampler/composition.hpp"

namespace dcs {

struct DataConfig {
  std::string dir = "data";
  std::vector<std::string> classes{"sphere", "cube", "cylinder", "cone", "torus"};
  std::size_t per_class = 50;
  std::size_t points = 512;
  double holdout = 0.2;
  double scale_jitter = 0.2;
  double noise = 0.01;
};

struct ModelConfig {
  std::size_t latent = 128;
  std::size_t edge_k = 8;
  std::size_t edge_hidden = 64;
  std::size_t decoder_hidden = 256;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 5e-4;
  double weight_decay = 0.05;
  std::size_t warmup = 10;
  double min_lr = 1e-6;
};

struct Stage1Config : TrainConfig {
  double emd_weight = 1.0;
};

struct Stage3Config : TrainConfig {
  double local_weight = 1.0;
  double global_weight = 1.0;
  std::string global_loss = "l2";
};

struct FewShotConfig {
  std::size_t ways = 5;
  std::size_t shots = 10;
  std::size_t queries = 20;
  std::size_t episodes = 10;
  std::size_t head_epochs = 50;
  double lr = 1e-3;
};

/// Every setting of a run, read from an INI-style file:
///
///   # comment
///   [section]
///   key = value
///
/// Unknown sections and keys are errors. Omitted keys keep their defaults.
struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  ModelConfig model;
  SamplerConfig sampler;
  BackboneConfig backbone;
  Stage1Config stage1;
  TrainConfig stage2;
  Stage3Config stage3;
  TrainConfig finetune;
  FewShotConfig fewshot;

  RunConfig();

  /// Cross-field checks (e.g. k <= points, width divisible by heads).
  void validate() const;

  /// Serializes every field; `parse(to_ini())` reproduces the config.
  std::string to_ini() const;

  static RunConfig parse(std::istream& in);
  static RunConfig parse_string(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace dcs
