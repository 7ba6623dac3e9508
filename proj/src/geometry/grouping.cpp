#include "dcs/geometry/grouping.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>

#include "dcs/core/error.hpp"

namespace dcs {

Point3 CenterSet::point(std::size_t j) const {
  return {coords(j, 0), coords(j, 1), coords(j, 2)};
}

CenterSet centers_from_points(const std::vector<Point3>& pts, CenterSource source) {
  PointCloud c;
  c.points = pts;
  return CenterSet{c.to_tensor(), source};
}

CenterSet weighted_centers(const Tensor& points, const Tensor& weights, bool normalize_columns,
                           CenterSource source) {
  if (points.dim() != 2 || points.size(1) != 3) {
    throw Error(fmt::format("weighted_centers: expected [N x 3] points, got {}",
                            shape_string(points.shape())));
  }
  if (weights.dim() != 2 || weights.size(0) != points.size(0)) {
    throw Error(fmt::format("weighted_centers: shape mismatch {} vs {}",
                            shape_string(points.shape()), shape_string(weights.shape())));
  }
  Tensor raw = matmul(transpose(weights), points);
  if (!normalize_columns) return CenterSet{raw, source};
  Tensor mass = sum(weights, 0);
  const auto mv = mass.values();
  for (std::size_t j = 0; j < mv.size(); ++j) {
    if (!(mv[j] > 0.0)) {
      throw Error(fmt::format("weighted_centers: column {} has zero total weight", j));
    }
  }
  return CenterSet{div(raw, reshape(mass, Shape{mv.size(), 1})), source};
}

Tensor Patches::patch(std::size_t j) const { return slice(relative, 0, j * k, (j + 1) * k); }

std::vector<std::size_t> nearest_indices(std::span<const double> points, const Point3& q,
                                         std::size_t k) {
  const std::size_t n = points.size() / 3;
  std::vector<std::pair<double, std::size_t>> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = points[3 * i] - q[0], dy = points[3 * i + 1] - q[1],
                 dz = points[3 * i + 2] - q[2];
    d[i] = {dx * dx + dy * dy + dz * dz, i};
  }
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

Patches knn_group(const Tensor& cloud, const CenterSet& centers, std::size_t k) {
  if (cloud.dim() != 2 || cloud.size(1) != 3) {
    throw Error(fmt::format("knn_group: expected [N x 3] cloud, got {}", shape_string(cloud.shape())));
  }
  const std::size_t n = cloud.size(0);
  if (k < 1 || k > n) throw Error(fmt::format("knn_group: k = {} outside [1, {}]", k, n));
  const std::size_t g = centers.size();
  Patches out;
  out.groups = g;
  out.k = k;
  out.indices.reserve(g * k);
  std::vector<std::size_t> owner;
  owner.reserve(g * k);
  for (std::size_t j = 0; j < g; ++j) {
    const auto idx = nearest_indices(cloud.values(), centers.point(j), k);
    out.indices.insert(out.indices.end(), idx.begin(), idx.end());
    owner.insert(owner.end(), k, j);
  }
  out.relative = sub(gather_rows(cloud, out.indices), gather_rows(centers.coords, owner));
  return out;
}

}  // namespace dcs
