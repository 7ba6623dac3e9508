#include "dcs/geometry/point_cloud.hpp"

#include <fmt/format.h>

#include <cmath>

#include "dcs/core/error.hpp"

namespace dcs {

double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void PointCloud::validate() const {
  if (points.empty()) throw Error(fmt::format("point cloud '{}' is empty", id));
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (double c : points[i]) {
      if (!std::isfinite(c)) {
        throw Error(fmt::format("point cloud '{}': non-finite coordinate at point {}", id, i));
      }
    }
  }
}

void PointCloud::normalize() {
  validate();
  Point3 c{0.0, 0.0, 0.0};
  for (const auto& p : points)
    for (int d = 0; d < 3; ++d) c[d] += p[d];
  for (double& v : c) v /= static_cast<double>(points.size());
  double r2 = 0.0;
  for (auto& p : points) {
    for (int d = 0; d < 3; ++d) p[d] -= c[d];
    r2 = std::max(r2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  }
  if (r2 == 0.0) return;
  const double inv = 1.0 / std::sqrt(r2);
  for (auto& p : points)
    for (double& v : p) v *= inv;
}

PointCloud PointCloud::normalized() const {
  PointCloud out = *this;
  out.normalize();
  return out;
}

Tensor PointCloud::to_tensor(bool requires_grad) const {
  std::vector<double> v;
  v.reserve(points.size() * 3);
  for (const auto& p : points) v.insert(v.end(), p.begin(), p.end());
  return Tensor(Shape{points.size(), 3}, std::move(v), requires_grad);
}

PointCloud PointCloud::from_tensor(const Tensor& t, std::string id) {
  if (t.dim() != 2 || t.size(1) != 3) {
    throw Error(fmt::format("expected [N x 3] points, got {}", shape_string(t.shape())));
  }
  PointCloud out;
  out.id = std::move(id);
  const auto v = t.values();
  out.points.resize(t.size(0));
  for (std::size_t i = 0; i < out.points.size(); ++i)
    out.points[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  return out;
}

}  // namespace dcs
