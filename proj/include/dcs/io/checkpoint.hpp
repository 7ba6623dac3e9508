#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dcs/core/nn.hpp"
#include "dcs/core/optim.hpp"
#include "dcs/core/rng.hpp"

namespace dcs {

/// Binary little-endian layout:
///
///   "DCSN"  u32 version  u32 stage  u32 block-count
///   per block:  u32 name-length, name bytes, u32 rank, u64 extents[rank],
///               f32 values[numel]
///   u64 epoch  u64 total-epochs  u64 rng-seed  u64 rng-counter
///   u64 optimizer-step  u32 moment-count
///   per moment: u32 name-length, name bytes, u64 count, f64 m[count], f64 v[count]
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct Block {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  struct Moment {
    std::string name;
    std::vector<double> m;
    std::vector<double> v;
  };

  std::uint32_t stage = 0;
  std::vector<Block> blocks;
  std::uint64_t epoch = 0;
  std::uint64_t total_epochs = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::uint64_t optimizer_step = 0;
  std::vector<Moment> moments;

  bool complete() const { return epoch == total_epochs; }

  /// Rounds every parameter and buffer of `params` to binary32 in place and
  /// records them, so that a restored model matches the saved one bitwise.
  static Checkpoint capture(ParameterSet& params, std::uint32_t stage);

  /// Copies stored blocks into `params`. Every entry of `params` must be
  /// present with a matching shape.
  void restore(ParameterSet& params) const;

  void store_optimizer(const AdamW& opt);
  /// Throws when the stored moments do not line up with `opt`'s parameters.
  void restore_optimizer(AdamW& opt) const;

  void write(std::ostream& out) const;
  static Checkpoint read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace dcs
