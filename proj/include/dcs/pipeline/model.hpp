#pragma once

#include <cstdint>
#include <vector>

#include "dcs/backbone/backbone.hpp"
#include "dcs/io/config.hpp"
#include "dcs/io/dataset.hpp"
#include "dcs/sampler/canonical.hpp"
#include "dcs/sampler/composition.hpp"

namespace dcs {

/// Parameter-name prefixes of the model's weight groups.
namespace groups {
inline constexpr const char* kCanonical = "canon.";
inline constexpr const char* kSampler = "dcs.";
inline constexpr const char* kBackbone = "backbone.";
inline constexpr const char* kMae = "mae.";
inline constexpr const char* kHead = "head.";
}  // namespace groups

/// Every learned component of the framework over one parameter registry:
/// the canonical-sphere encoder/decoder, the composition network U, and the
/// point transformer with its reconstruction decoder and classifier.
class DcsNetModel {
 public:
  DcsNetModel(const RunConfig& config, std::size_t classes, std::uint64_t seed);

  DcsNetModel(const DcsNetModel&) = delete;
  DcsNetModel& operator=(const DcsNetModel&) = delete;

  ParameterSet params;
  PointEncoder encoder;
  SphereDecoder decoder;
  CompositionNet dcs;
  PointTransformer backbone;
  SphereSamples sphere;
  Tensor sphere_tensor;
  SamplerConfig sampler_config;
  std::size_t classes;

  /// Decoded sphere points [M x 3] for one cloud.
  Tensor reconstruct(const Tensor& cloud, const EdgeGraph& graph) const;

  /// Composition points of a cloud from its decoded sphere and U evaluated
  /// on the sphere samples (eval-mode statistics).
  CenterSet composition_centers(const Tensor& cloud, const EdgeGraph& graph) const;

  /// Noise-free DCS centers and patches (U in eval mode).
  DcsSample sample_eval(const Tensor& cloud) const;

  std::uint64_t hash(const char* prefix) const { return params.hash(prefix); }
};

/// A cloud as used by training: its tensor, cached encoder graph and label.
struct PreparedCloud {
  Tensor points;
  EdgeGraph graph;
  int label = -1;
};

std::vector<PreparedCloud> prepare(const Dataset& ds, std::size_t edge_k);

}  // namespace dcs
