#pragma once

#include <vector>

#include "dcs/core/tensor.hpp"
#include "dcs/geometry/point_cloud.hpp"

namespace dcs {

enum class CenterSource { Fps, Dcs, Composition, Random };

/// G centers as a [G x 3] tensor, possibly attached to a gradient graph.
struct CenterSet {
  Tensor coords;
  CenterSource source = CenterSource::Dcs;

  std::size_t size() const { return coords.size(0); }
  Point3 point(std::size_t j) const;
};

CenterSet centers_from_points(const std::vector<Point3>& pts, CenterSource source);

/// C_j = sum_i w_ij p_i, divided by sum_i w_ij when `normalize_columns`.
/// Throws naming the column when a normalized column has zero mass.
CenterSet weighted_centers(const Tensor& points, const Tensor& weights,
                           bool normalize_columns = true,
                           CenterSource source = CenterSource::Dcs);

/// k-nearest-neighbor patches, one per center, stacked as [(G*k) x 3] rows of
/// coordinates relative to their center. Rows j*k .. j*k+k-1 hold patch j in
/// increasing distance order (ties to the lowest point index).
struct Patches {
  Tensor relative;
  std::vector<std::size_t> indices;
  std::size_t groups = 0;
  std::size_t k = 0;

  /// [k x 3] rows of patch j.
  Tensor patch(std::size_t j) const;
};

/// Indices of the k nearest points of `points` [N x 3] to `query`.
std::vector<std::size_t> nearest_indices(std::span<const double> points, const Point3& query,
                                         std::size_t k);

Patches knn_group(const Tensor& cloud, const CenterSet& centers, std::size_t k);

}  // namespace dcs
