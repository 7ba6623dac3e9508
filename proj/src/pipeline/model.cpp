#include "dcs/pipeline/model.hpp"

#include "dcs/core/error.hpp"

namespace dcs {

DcsNetModel::DcsNetModel(const RunConfig& config, std::size_t classes_, std::uint64_t seed)
    : sampler_config(config.sampler), classes(classes_) {
  const Rng root(seed);
  Rng init_canon = root.fork(1);
  Rng init_dcs = root.fork(2);
  Rng init_backbone = root.fork(3);
  encoder = PointEncoder(params, "canon.encoder", config.model.latent, config.model.edge_hidden,
                         config.model.edge_k, init_canon);
  decoder = SphereDecoder(params, "canon.decoder", config.model.latent, config.model.decoder_hidden,
                          init_canon);
  dcs = CompositionNet(params, "dcs", config.sampler, init_dcs);
  backbone = PointTransformer(params, config.backbone, config.sampler.points_per_group, classes,
                              init_backbone);
  sphere = sphere_samples(config.data.points, SphereMethod::Fibonacci);
  sphere_tensor = sphere.tensor();
}

Tensor DcsNetModel::reconstruct(const Tensor& cloud, const EdgeGraph& graph) const {
  return decoder(encoder(cloud, graph), sphere_tensor);
}

CenterSet DcsNetModel::composition_centers(const Tensor& cloud, const EdgeGraph& graph) const {
  const Tensor decoded = reconstruct(cloud, graph).detach();
  const ProbabilityMap q = dcs(sphere_tensor, false);
  return weighted_centers(decoded, q.matrix, sampler_config.normalize_columns,
                          CenterSource::Composition);
}

DcsSample DcsNetModel::sample_eval(const Tensor& cloud) const {
  return dcs_sample(cloud, dcs, sampler_config, sampler_config.temperature,
                    std::span<const double>{}, false);
}

std::vector<PreparedCloud> prepare(const Dataset& ds, std::size_t edge_k) {
  std::vector<PreparedCloud> out;
  out.reserve(ds.size());
  for (const PointCloud& c : ds.clouds) {
    Tensor t = c.to_tensor();
    EdgeGraph g = build_edge_graph(t, edge_k);
    out.push_back(PreparedCloud{std::move(t), std::move(g), c.label.value_or(-1)});
  }
  return out;
}

}  // namespace dcs
