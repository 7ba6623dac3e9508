#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dcs/core/rng.hpp"
#include "dcs/geometry/point_cloud.hpp"

namespace dcs {

/// Greedy farthest point sampling. The first pick is `seed_index`; each next
/// pick maximizes the distance to the selected set, ties to the lowest index.
std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t k, std::size_t seed_index = 0);

/// `k` distinct indices drawn uniformly from 0..n-1, in draw order.
std::vector<std::size_t> random_subset(std::size_t n, std::size_t k, Rng& rng);

std::vector<Point3> gather_points(const PointCloud& cloud, std::span<const std::size_t> index);

enum class SphereMethod { Fibonacci, UniformRandom };

/// Points on the unit canonical sphere and, once a decoder has been run,
/// their images in cloud space.
struct SphereSamples {
  std::vector<Point3> samples;
  std::optional<std::vector<Point3>> decoded;

  std::size_t size() const { return samples.size(); }
  Tensor tensor() const;
  Tensor decoded_tensor() const;
};

SphereSamples sphere_samples(std::size_t n, SphereMethod method = SphereMethod::Fibonacci,
                             std::uint64_t seed = 0);

}  // namespace dcs
