#include "dcs/geometry/sampling.hpp"

#include <fmt/format.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "dcs/core/error.hpp"

namespace dcs {

std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t k, std::size_t seed_index) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) throw Error(fmt::format("fps: k = {} outside [1, {}]", k, n));
  if (seed_index >= n) throw Error(fmt::format("fps: seed index {} outside [0, {})", seed_index, n));
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> out;
  out.reserve(k);
  std::size_t pick = seed_index;
  for (std::size_t s = 0; s < k; ++s) {
    out.push_back(pick);
    const Point3& p = cloud.points[pick];
    std::size_t next = 0;
    double far = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], squared_distance(cloud.points[i], p));
      if (best[i] > far) {
        far = best[i];
        next = i;
      }
    }
    pick = next;
  }
  return out;
}

std::vector<std::size_t> random_subset(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) throw Error(fmt::format("random_subset: k = {} exceeds n = {}", k, n));
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  pool.resize(k);
  return pool;
}

std::vector<Point3> gather_points(const PointCloud& cloud, std::span<const std::size_t> index) {
  std::vector<Point3> out;
  out.reserve(index.size());
  for (std::size_t i : index) out.push_back(cloud.points.at(i));
  return out;
}

namespace {

Tensor points_tensor(const std::vector<Point3>& pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 3);
  for (const auto& p : pts) v.insert(v.end(), p.begin(), p.end());
  return Tensor(Shape{pts.size(), 3}, std::move(v));
}

Point3 unit(Point3 p) {
  const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  return {p[0] / r, p[1] / r, p[2] / r};
}

}  // namespace

Tensor SphereSamples::tensor() const { return points_tensor(samples); }

Tensor SphereSamples::decoded_tensor() const {
  if (!decoded) throw Error("sphere samples: decoded points not materialized");
  return points_tensor(*decoded);
}

SphereSamples sphere_samples(std::size_t n, SphereMethod method, std::uint64_t seed) {
  if (n == 0) throw Error("sphere_samples: n must be at least 1");
  SphereSamples out;
  out.samples.reserve(n);
  if (method == SphereMethod::Fibonacci) {
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < n; ++i) {
      const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double phi = golden * static_cast<double>(i);
      out.samples.push_back(unit({r * std::cos(phi), r * std::sin(phi), z}));
    }
  } else {
    Rng rng(seed);
    while (out.samples.size() < n) {
      Point3 p{rng.normal(), rng.normal(), rng.normal()};
      if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] < 1e-12) continue;
      out.samples.push_back(unit(p));
    }
  }
  return out;
}

}  // namespace dcs
