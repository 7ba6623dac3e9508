#pragma once

#include <string>
#include <vector>

#include "dcs/core/nn.hpp"
#include "dcs/geometry/point_cloud.hpp"
#include "dcs/geometry/sampling.hpp"

namespace dcs {

/// k-nearest-neighbor graph over the distinct points of a cloud. Exact
/// duplicate coordinates collapse to their first occurrence, so a cloud and
/// the same cloud with repeated points share one graph.
struct EdgeGraph {
  std::vector<std::size_t> unique;    ///< cloud row of each distinct point
  std::vector<std::size_t> center;    ///< per edge, position in `unique`
  std::vector<std::size_t> neighbor;  ///< per edge, position in `unique`
  std::size_t k = 0;

  std::size_t nodes() const { return unique.size(); }
};

/// Throws when the cloud has fewer than k + 1 distinct points.
EdgeGraph build_edge_graph(const Tensor& cloud, std::size_t k);

struct LatentEmbedding {
  Tensor value;  ///< [1 x L]
  std::size_t width() const { return value.size(1); }
};

/// Single edge-convolution layer followed by a max-pool over points:
///   f_i = max_j MLP([p_i ; p_j - p_i]),  latent = max_i f_i
/// with MLP 6 -> hidden -> L and ReLU between the two layers.
class PointEncoder {
 public:
  PointEncoder() = default;
  PointEncoder(ParameterSet& params, const std::string& name, std::size_t latent_width,
               std::size_t hidden, std::size_t k, Rng& init);

  LatentEmbedding operator()(const Tensor& cloud) const;
  LatentEmbedding operator()(const Tensor& cloud, const EdgeGraph& graph) const;

  std::size_t k() const { return k_; }
  std::size_t latent_width() const { return fc2_.out_features(); }

 private:
  Linear fc1_;
  Linear fc2_;
  std::size_t k_ = 8;
};

/// Folding-style decoder F([latent ; s]) for sphere samples s, through
/// (L + 3) -> hidden -> hidden -> 3 with ReLU between layers.
class SphereDecoder {
 public:
  SphereDecoder() = default;
  SphereDecoder(ParameterSet& params, const std::string& name, std::size_t latent_width,
                std::size_t hidden, Rng& init);

  /// [M x 3] decoded points for sphere samples [M x 3].
  Tensor operator()(const LatentEmbedding& latent, const Tensor& sphere) const;

 private:
  Linear fc1_;
  Linear fc2_;
  Linear fc3_;
  std::size_t latent_width_ = 0;
};

/// Chamfer (L2) plus `emd_weight` times EMD. EMD requires equal sizes.
Tensor stage1_loss(const Tensor& cloud, const Tensor& decoded, double emd_weight = 1.0);

/// Cloud-to-sphere correspondence: each point maps to the sphere sample whose
/// decoded image is nearest (ties to the lowest sample index).
struct SphereMapping {
  std::vector<std::size_t> sample_index;
  std::vector<Point3> coords;
};

SphereMapping forward_map(const PointCloud& cloud, const SphereSamples& sphere);

}  // namespace dcs
