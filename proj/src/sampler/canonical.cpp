#include "dcs/sampler/canonical.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <map>

#include "dcs/core/error.hpp"
#include "dcs/geometry/distance.hpp"
#include "dcs/geometry/grouping.hpp"

namespace dcs {

EdgeGraph build_edge_graph(const Tensor& cloud, std::size_t k) {
  if (cloud.dim() != 2 || cloud.size(1) != 3) {
    throw Error(fmt::format("edge graph: expected [N x 3] cloud, got {}", shape_string(cloud.shape())));
  }
  const auto v = cloud.values();
  const std::size_t n = cloud.size(0);
  EdgeGraph g;
  g.k = k;
  std::map<Point3, std::size_t> seen;
  std::vector<double> pts;
  for (std::size_t i = 0; i < n; ++i) {
    const Point3 p{v[3 * i], v[3 * i + 1], v[3 * i + 2]};
    if (seen.emplace(p, i).second) {
      g.unique.push_back(i);
      pts.insert(pts.end(), p.begin(), p.end());
    }
  }
  const std::size_t u = g.unique.size();
  if (u < k + 1) {
    throw Error(fmt::format("encoder: need at least {} distinct points for k = {}, got {}", k + 1, k, u));
  }
  g.center.reserve(u * k);
  g.neighbor.reserve(u * k);
  for (std::size_t i = 0; i < u; ++i) {
    const Point3 q{pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]};
    // The point itself is always its own nearest neighbor; drop it.
    auto idx = nearest_indices(pts, q, k + 1);
    idx.erase(std::find(idx.begin(), idx.end(), i));
    for (std::size_t j = 0; j < k; ++j) {
      g.center.push_back(i);
      g.neighbor.push_back(idx[j]);
    }
  }
  return g;
}

PointEncoder::PointEncoder(ParameterSet& params, const std::string& name, std::size_t latent_width,
                           std::size_t hidden, std::size_t k, Rng& init)
    : fc1_(params, name + ".edge1", 6, hidden, init),
      fc2_(params, name + ".edge2", hidden, latent_width, init),
      k_(k) {}

LatentEmbedding PointEncoder::operator()(const Tensor& cloud) const {
  return (*this)(cloud, build_edge_graph(cloud, k_));
}

LatentEmbedding PointEncoder::operator()(const Tensor& cloud, const EdgeGraph& graph) const {
  if (graph.k != k_) throw Error(fmt::format("encoder: graph built with k = {}, expected {}", graph.k, k_));
  const Tensor pu = gather_rows(cloud, graph.unique);
  const Tensor pi = gather_rows(pu, graph.center);
  const Tensor pj = gather_rows(pu, graph.neighbor);
  const Tensor edge = concat({pi, sub(pj, pi)}, 1);
  const Tensor f = fc2_(relu(fc1_(edge)));
  const std::size_t l = fc2_.out_features();
  const Tensor per_point = max(reshape(f, Shape{graph.nodes(), k_, l}), 1);
  return LatentEmbedding{reshape(max(per_point, 0), Shape{1, l})};
}

SphereDecoder::SphereDecoder(ParameterSet& params, const std::string& name,
                             std::size_t latent_width, std::size_t hidden, Rng& init)
    : fc1_(params, name + ".fc1", latent_width + 3, hidden, init),
      fc2_(params, name + ".fc2", hidden, hidden, init),
      fc3_(params, name + ".fc3", hidden, 3, init),
      latent_width_(latent_width) {}

Tensor SphereDecoder::operator()(const LatentEmbedding& latent, const Tensor& sphere) const {
  if (latent.value.dim() != 2 || latent.value.size(0) != 1 || latent.width() != latent_width_) {
    throw Error(fmt::format("decoder: latent shape {} does not match width {}",
                            shape_string(latent.value.shape()), latent_width_));
  }
  if (sphere.dim() != 2 || sphere.size(1) != 3 || sphere.size(0) == 0) {
    throw Error(fmt::format("decoder: expected [M x 3] sphere samples, got {}",
                            shape_string(sphere.shape())));
  }
  // First layer on [latent ; s] split by rows of the weight so the latent
  // half is computed once instead of M times.
  const Tensor& w = fc1_.weight();
  const Tensor w_latent = slice(w, 0, 0, latent_width_);
  const Tensor w_sphere = slice(w, 0, latent_width_, latent_width_ + 3);
  const Tensor shared = linear(latent.value, w_latent, fc1_.bias());
  const Tensor h1 = relu(add(matmul(sphere, w_sphere), shared));
  return fc3_(relu(fc2_(h1)));
}

Tensor stage1_loss(const Tensor& cloud, const Tensor& decoded, double emd_weight) {
  Tensor loss = chamfer(decoded, cloud, ChamferForm::L2);
  if (emd_weight != 0.0) {
    if (cloud.size(0) != decoded.size(0)) {
      throw Error(fmt::format("stage1 loss: EMD needs equal sizes, got {} decoded vs {} input",
                              decoded.size(0), cloud.size(0)));
    }
    loss = add(loss, scale(emd(decoded, cloud).first, emd_weight));
  }
  return loss;
}

SphereMapping forward_map(const PointCloud& cloud, const SphereSamples& sphere) {
  if (!sphere.decoded) throw Error("forward_map: decoded sphere points not materialized");
  const auto& dec = *sphere.decoded;
  SphereMapping out;
  out.sample_index.reserve(cloud.size());
  for (const Point3& p : cloud.points) {
    std::size_t arg = 0;
    double best = squared_distance(p, dec[0]);
    for (std::size_t j = 1; j < dec.size(); ++j) {
      const double d = squared_distance(p, dec[j]);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    out.sample_index.push_back(arg);
    out.coords.push_back(sphere.samples[arg]);
  }
  return out;
}

}  // namespace dcs
