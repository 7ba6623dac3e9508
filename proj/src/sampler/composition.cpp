#include "dcs/sampler/composition.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <cmath>
#include <ostream>

#include "dcs/core/autograd.hpp"
#include "dcs/core/error.hpp"
#include "dcs/geometry/distance.hpp"

namespace dcs {

void SamplerConfig::validate() const {
  if (groups < 2) throw Error(fmt::format("sampler: groups must be >= 2, got {}", groups));
  if (depth < 1 || depth > 3) throw Error(fmt::format("sampler: depth must be 1, 2 or 3, got {}", depth));
  if (!(temperature > 0.0)) throw Error(fmt::format("sampler: temperature must be > 0, got {}", temperature));
  if (!(anneal > 0.0)) throw Error(fmt::format("sampler: anneal factor must be > 0, got {}", anneal));
  if (points_per_group < 1) throw Error("sampler: points_per_group must be >= 1");
}

double SamplerConfig::temperature_at(std::size_t epoch) const {
  const double e = epoch > 0 ? static_cast<double>(epoch - 1) : 0.0;
  return temperature * std::pow(anneal, e);
}

CompositionNet::CompositionNet(ParameterSet& params, const std::string& name,
                               const SamplerConfig& config, Rng& init)
    : groups_(config.groups), per_cloud_stats_(config.per_cloud_stats) {
  config.validate();
  std::size_t in = 3;
  for (std::size_t d = 0; d < config.depth; ++d) {
    const bool last = d + 1 == config.depth;
    const std::size_t out = last ? config.groups : config.hidden;
    layers_.emplace_back(params, fmt::format("{}.fc{}", name, d + 1), in, out, init);
    norms_.emplace_back(params, fmt::format("{}.bn{}", name, d + 1), out);
    in = out;
  }
}

Tensor CompositionNet::logits(const Tensor& x, bool training) const {
  Tensor h = x;
  for (std::size_t d = 0; d < layers_.size(); ++d) {
    const Tensor z = layers_[d](h);
    h = !training && per_cloud_stats_ ? norms_[d].input_statistics(z) : norms_[d](z, training);
    if (d + 1 < layers_.size()) h = relu(h);
  }
  return h;
}

ProbabilityMap CompositionNet::operator()(const Tensor& x, bool training) const {
  return ProbabilityMap{softmax(logits(x, training), 1), 1.0, false};
}

void CompositionNet::zero_final_layer() { layers_.back().zero(); }

Tensor stage2_loss(const Tensor& cloud, const Tensor& decoded, const ProbabilityMap& q,
                   bool normalize_columns) {
  const CenterSet c = weighted_centers(decoded, q.matrix, normalize_columns, CenterSource::Composition);
  return chamfer(c.coords, cloud, ChamferForm::L2);
}

DcsSample dcs_sample(const Tensor& cloud, const CompositionNet& net, const SamplerConfig& config,
                     double tau, std::span<const double> noise, bool bn_training) {
  const Tensor z = net.logits(cloud, bn_training);
  DcsSample s;
  s.raw = ProbabilityMap{softmax(z, 1), 1.0, false};
  Tensor relaxed;
  if (noise.empty()) {
    if (!(tau > 0.0)) throw Error(fmt::format("dcs_sample: temperature must be > 0, got {}", tau));
    relaxed = softmax(scale(z, 1.0 / tau), 1);
  } else {
    relaxed = gumbel_softmax(z, tau, noise,
                             config.hard ? GumbelMode::HardStraightThrough : GumbelMode::Soft);
  }
  s.relaxed = ProbabilityMap{relaxed, tau, true};
  s.centers = weighted_centers(cloud, relaxed, config.normalize_columns, CenterSource::Dcs);
  s.patches = knn_group(cloud, s.centers, config.points_per_group);
  return s;
}

DcsSample dcs_sample(const Tensor& cloud, const CompositionNet& net, const SamplerConfig& config,
                     double tau, Rng* rng, bool bn_training) {
  std::vector<double> noise;
  if (rng) noise = sample_gumbel_noise(cloud.size(0) * net.groups(), *rng);
  return dcs_sample(cloud, net, config, tau, noise, bn_training);
}

GlobalLoss parse_global_loss(const std::string& name) {
  if (name == "l1") return GlobalLoss::L1;
  if (name == "l2") return GlobalLoss::L2;
  if (name == "l1+l2" || name == "l1l2") return GlobalLoss::L1L2;
  if (name == "mmd") return GlobalLoss::Mmd;
  throw Error(fmt::format("unknown global loss '{}' (expected l1, l2, l1+l2 or mmd)", name));
}

std::string to_string(GlobalLoss mode) {
  switch (mode) {
    case GlobalLoss::L1: return "l1";
    case GlobalLoss::L2: return "l2";
    case GlobalLoss::L1L2: return "l1+l2";
    case GlobalLoss::Mmd: return "mmd";
  }
  return "?";
}

Tensor global_recon_loss(const CenterSet& centers, const Tensor& cloud, GlobalLoss mode) {
  switch (mode) {
    case GlobalLoss::L1: return chamfer(centers.coords, cloud, ChamferForm::L1);
    case GlobalLoss::L2:
    case GlobalLoss::Mmd: return chamfer(centers.coords, cloud, ChamferForm::L2);
    case GlobalLoss::L1L2:
      return add(chamfer(centers.coords, cloud, ChamferForm::L1),
                 chamfer(centers.coords, cloud, ChamferForm::L2));
  }
  throw Error("global_recon_loss: unknown mode");
}

Tensor global_recon_loss(std::span<const Tensor> centers, std::span<const Tensor> clouds,
                         GlobalLoss mode) {
  if (centers.empty() || centers.size() != clouds.size()) {
    throw Error(fmt::format("global_recon_loss: {} center sets for {} clouds", centers.size(),
                            clouds.size()));
  }
  if (mode == GlobalLoss::Mmd) return mmd(centers, clouds, SetMetric::Chamfer);
  Tensor total;
  for (std::size_t b = 0; b < centers.size(); ++b) {
    Tensor l = global_recon_loss(CenterSet{centers[b], CenterSource::Dcs}, clouds[b], mode);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(centers.size()));
}

Tensor uniform_prior_penalty(const Tensor& q, double weight) {
  if (q.dim() != 2) {
    throw Error(fmt::format("uniform prior: expected [N x G] map, got {}", shape_string(q.shape())));
  }
  const std::size_t n = q.size(0), g = q.size(1);
  const auto v = q.values();
  auto dlog = std::make_shared<std::vector<double>>(g, 0.0);
  double kl = 0.0;
  for (std::size_t j = 0; j < g; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += v[i * g + j];
    m /= static_cast<double>(n);
    if (m > 0.0) {
      const double l = std::log(m * static_cast<double>(g));
      kl += m * l;
      (*dlog)[j] = l + 1.0;
    }
  }
  return make_result("uniform_prior", Shape{}, {weight * kl}, {q},
                     [n, g, weight, dlog](detail::Node& self) {
                       auto gq = self.parent_grad(0);
                       const double s = self.grad[0] * weight / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < g; ++j) gq[i * g + j] += s * (*dlog)[j];
                     });
}

void write_heatmap(std::ostream& out, const Tensor& coords, const ProbabilityMap& q) {
  const std::size_t n = q.rows(), g = q.groups();
  if (coords.dim() != 2 || coords.size(0) != n || coords.size(1) != 3) {
    throw Error(fmt::format("heatmap: coordinates {} do not match map {}",
                            shape_string(coords.shape()), shape_string(q.matrix.shape())));
  }
  const auto p = q.matrix.values();
  const auto c = coords.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < g; ++j)
      if (p[i * g + j] > p[i * g + arg]) arg = j;
    fmt::print(out, "{},{},{},{},{}", c[3 * i], c[3 * i + 1], c[3 * i + 2], arg, p[i * g + arg]);
    for (std::size_t j = 0; j < g; ++j) fmt::print(out, ",{}", p[i * g + j]);
    out << '\n';
  }
}

}  // namespace dcs
