#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dcs/core/tensor.hpp"

namespace dcs {

using Point3 = std::array<double, 3>;

/// Ordered set of 3-D points with an optional class label.
struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;
  std::string id;

  std::size_t size() const { return points.size(); }

  /// Throws unless the cloud is non-empty and every coordinate is finite.
  void validate() const;

  /// Centers on the centroid and scales the farthest point to unit norm.
  void normalize();
  PointCloud normalized() const;

  /// [N x 3] tensor of the coordinates.
  Tensor to_tensor(bool requires_grad = false) const;
  static PointCloud from_tensor(const Tensor& points, std::string id = {});
};

double squared_distance(const Point3& a, const Point3& b);

}  // namespace dcs
