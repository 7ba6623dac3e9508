#pragma once

#include <span>
#include <utility>
#include <vector>

#include "dcs/core/tensor.hpp"
#include "dcs/geometry/point_cloud.hpp"

namespace dcs {

enum class ChamferForm {
  L1,  ///< unsquared Euclidean nearest-neighbor distances
  L2,  ///< squared Euclidean nearest-neighbor distances
};

/// Chamfer distance between point sets P [n x 3] and G [m x 3]:
///   (1/n) sum_p min_g d(p, g) + (1/m) sum_g min_p d(g, p)
/// Nearest-neighbor ties go to the lowest index. Differentiable in both
/// inputs; in the L1 form coincident pairs contribute a zero gradient.
Tensor chamfer(const Tensor& p, const Tensor& g, ChamferForm form = ChamferForm::L2);
double chamfer(const PointCloud& p, const PointCloud& g, ChamferForm form = ChamferForm::L2);

/// Optimal bijection between equal-size point sets. `permutation[i]` is the
/// target index matched to source point i.
struct Matching {
  std::vector<std::size_t> permutation;
  double cost = 0.0;
};

/// Minimum-cost assignment for a dense n x n row-major cost matrix
/// (Hungarian method, O(n^3)).
Matching hungarian(std::span<const double> cost, std::size_t n);

/// The same problem solved with Jonker-Volgenant; much faster on the dense
/// Euclidean costs EMD produces. Used by `emd`. When `duals` holds n column
/// potentials from an earlier solve of a similar problem they seed the
/// search; on return it holds the final potentials. The optimum does not
/// depend on the seed, only the running time does.
Matching linear_assignment(std::span<const double> cost, std::size_t n,
                           std::vector<double>* duals = nullptr);

/// Earth mover's distance: min over bijections phi of sum_i |p_i - g_phi(i)|.
/// The gradient is taken through the matched distances with the optimal
/// matching held fixed.
std::pair<Tensor, Matching> emd(const Tensor& p, const Tensor& g, std::vector<double>* duals = nullptr);
double emd(const PointCloud& p, const PointCloud& g);

enum class SetMetric { Chamfer, Emd };

/// Set-level distance: (1/|ref|) sum over reference clouds X of
/// min over generated clouds Y of D(X, Y). Chamfer uses the L2 form.
Tensor mmd(std::span<const Tensor> generated, std::span<const Tensor> reference,
           SetMetric metric = SetMetric::Chamfer);

}  // namespace dcs
