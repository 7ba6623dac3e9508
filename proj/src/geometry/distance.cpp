#include "dcs/geometry/distance.hpp"

#include <fmt/format.h>

#include <cmath>
#include <limits>
#include <memory>

#include "dcs/core/autograd.hpp"
#include "dcs/core/error.hpp"

namespace dcs {

using detail::Node;

namespace {

void check_points(const Tensor& t, const char* op) {
  if (t.dim() != 2 || t.size(1) != 3) {
    throw Error(fmt::format("{}: expected [n x 3] points, got {}", op, shape_string(t.shape())));
  }
  if (t.size(0) == 0) throw Error(fmt::format("{}: empty point set", op));
}

struct NearestPairs {
  std::vector<std::size_t> row_nn;  // for each p, nearest g
  std::vector<std::size_t> col_nn;  // for each g, nearest p
  std::vector<double> row_d2;
  std::vector<double> col_d2;
};

NearestPairs nearest_pairs(std::span<const double> p, std::size_t n, std::span<const double> g,
                           std::size_t m) {
  NearestPairs r;
  r.row_nn.assign(n, 0);
  r.col_nn.assign(m, 0);
  r.row_d2.assign(n, std::numeric_limits<double>::infinity());
  r.col_d2.assign(m, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    const double px = p[3 * i], py = p[3 * i + 1], pz = p[3 * i + 2];
    double best = r.row_d2[i];
    std::size_t arg = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double dx = px - g[3 * j], dy = py - g[3 * j + 1], dz = pz - g[3 * j + 2];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        arg = j;
      }
      if (d < r.col_d2[j]) {
        r.col_d2[j] = d;
        r.col_nn[j] = i;
      }
    }
    r.row_d2[i] = best;
    r.row_nn[i] = arg;
  }
  return r;
}

}  // namespace

Tensor chamfer(const Tensor& p, const Tensor& g, ChamferForm form) {
  check_points(p, "chamfer");
  check_points(g, "chamfer");
  const std::size_t n = p.size(0), m = g.size(0);
  auto nn = std::make_shared<NearestPairs>(nearest_pairs(p.values(), n, g.values(), m));
  const bool l2 = form == ChamferForm::L2;
  double a = 0.0, b = 0.0;
  for (double d : nn->row_d2) a += l2 ? d : std::sqrt(d);
  for (double d : nn->col_d2) b += l2 ? d : std::sqrt(d);
  const double value = a / static_cast<double>(n) + b / static_cast<double>(m);
  return make_result("chamfer", Shape{}, {value}, {p, g}, [nn, n, m, l2](Node& self) {
    const double up = self.grad[0];
    const auto& pv = self.parent_value(0);
    const auto& gv = self.parent_value(1);
    auto gp = self.parent_grad(0);
    auto gg = self.parent_grad(1);
    auto pair = [&](std::size_t i, std::size_t j, double d2, double w) {
      double s;
      if (l2) {
        s = 2.0 * w;
      } else {
        if (d2 == 0.0) return;
        s = w / std::sqrt(d2);
      }
      for (int k = 0; k < 3; ++k) {
        const double diff = s * (pv[3 * i + k] - gv[3 * j + k]);
        if (!gp.empty()) gp[3 * i + k] += diff;
        if (!gg.empty()) gg[3 * j + k] -= diff;
      }
    };
    const double wn = up / static_cast<double>(n), wm = up / static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i) pair(i, nn->row_nn[i], nn->row_d2[i], wn);
    for (std::size_t j = 0; j < m; ++j) pair(nn->col_nn[j], j, nn->col_d2[j], wm);
  });
}

double chamfer(const PointCloud& p, const PointCloud& g, ChamferForm form) {
  return chamfer(p.to_tensor(), g.to_tensor(), form).item();
}

Matching hungarian(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) {
    throw Error(fmt::format("hungarian: cost has {} entries, expected {}", cost.size(), n * n));
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // Potentials-based shortest augmenting path, 1-based with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      const double* row = cost.data() + (i0 - 1) * n;
      const double ui = u[i0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - ui - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Matching out;
  out.permutation.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.permutation[owner[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) out.cost += cost[i * n + out.permutation[i]];
  return out;
}

namespace {

// Dense Jonker-Volgenant: column reduction, two rounds of augmenting row
// reduction, then shortest augmenting paths for the remaining free rows.
class Lapjv {
 public:
  Lapjv(std::span<const double> cost, std::size_t n)
      : c_(cost.data()), n_(static_cast<long>(n)), x_(n, -1), y_(n, -1), v_(n), d_(n), pred_(n),
        cols_(n) {}

  std::vector<long> solve(std::vector<double>* duals) {
    std::vector<long> free_rows(n_);
    long n_free = 0;
    if (duals && duals->size() == static_cast<std::size_t>(n_)) {
      // Any column potentials are valid with an empty assignment.
      v_ = *duals;
      for (long i = 0; i < n_; ++i) free_rows[n_free++] = i;
    } else {
      n_free = column_reduction(free_rows);
      for (int round = 0; round < 2 && n_free > 0; ++round) n_free = row_reduction(free_rows, n_free);
    }
    for (long f = 0; f < n_free; ++f) augment(free_rows[f]);
    if (duals) *duals = v_;
    return x_;
  }

 private:
  double cost(long i, long j) const { return c_[i * n_ + j]; }

  long column_reduction(std::vector<long>& free_rows) {
    std::vector<char> unique(n_, 1);
    std::fill(v_.begin(), v_.end(), std::numeric_limits<double>::infinity());
    std::vector<long> owner(n_, 0);
    for (long i = 0; i < n_; ++i) {
      for (long j = 0; j < n_; ++j) {
        if (cost(i, j) < v_[j]) {
          v_[j] = cost(i, j);
          owner[j] = i;
        }
      }
    }
    for (long j = n_ - 1; j >= 0; --j) {
      const long i = owner[j];
      if (x_[i] < 0) {
        x_[i] = j;
        y_[j] = i;
      } else {
        unique[i] = 0;
      }
    }
    long n_free = 0;
    for (long i = 0; i < n_; ++i) {
      if (x_[i] < 0) {
        free_rows[n_free++] = i;
      } else if (unique[i] && n_ > 1) {
        const long j = x_[i];
        double m = std::numeric_limits<double>::infinity();
        for (long j2 = 0; j2 < n_; ++j2) {
          if (j2 != j) m = std::min(m, cost(i, j2) - v_[j2]);
        }
        v_[j] -= m - (cost(i, j) - v_[j]);
      }
    }
    return n_free;
  }

  long row_reduction(std::vector<long>& free_rows, long n_free) {
    long current = 0, next_free = 0, count = 0;
    while (current < n_free) {
      ++count;
      const long i = free_rows[current++];
      long j1 = 0, j2 = -1;
      double u1 = cost(i, 0) - v_[0], u2 = std::numeric_limits<double>::infinity();
      for (long j = 1; j < n_; ++j) {
        const double h = cost(i, j) - v_[j];
        if (h < u2) {
          if (h >= u1) {
            u2 = h;
            j2 = j;
          } else {
            u2 = u1;
            u1 = h;
            j2 = j1;
            j1 = j;
          }
        }
      }
      long i0 = y_[j1];
      const double lowered = v_[j1] - (u2 - u1);
      const bool lowers = lowered < v_[j1];
      if (count < current * n_) {
        if (lowers) {
          v_[j1] = lowered;
        } else if (i0 >= 0 && j2 >= 0) {
          j1 = j2;
          i0 = y_[j2];
        }
        if (i0 >= 0) {
          if (lowers) free_rows[--current] = i0;
          else free_rows[next_free++] = i0;
        }
      } else if (i0 >= 0) {
        free_rows[next_free++] = i0;
      }
      x_[i] = j1;
      y_[j1] = i;
    }
    return next_free;
  }

  // Dijkstra over reduced costs from `start`; returns the free column reached.
  long find_path(long start) {
    long lo = 0, hi = 0, ready = 0, last = -1;
    for (long j = 0; j < n_; ++j) {
      cols_[j] = j;
      pred_[j] = start;
      d_[j] = cost(start, j) - v_[j];
    }
    while (last < 0) {
      if (lo == hi) {
        ready = lo;
        hi = lo + 1;
        double m = d_[cols_[lo]];
        for (long k = hi; k < n_; ++k) {
          const long j = cols_[k];
          if (d_[j] <= m) {
            if (d_[j] < m) {
              hi = lo;
              m = d_[j];
            }
            cols_[k] = cols_[hi];
            cols_[hi++] = j;
          }
        }
        for (long k = lo; k < hi; ++k) {
          if (y_[cols_[k]] < 0) {
            last = cols_[k];
            break;
          }
        }
      }
      if (last < 0) last = scan(lo, hi);
    }
    const double m = d_[cols_[lo]];
    for (long k = 0; k < ready; ++k) v_[cols_[k]] += d_[cols_[k]] - m;
    return last;
  }

  // Lowers d over the unscanned columns through the rows at cols_[lo, hi).
  // Bounds are written back only when no free column was reached, so the
  // caller still sees the frontier minimum at cols_[lo].
  long scan(long& lo_out, long& hi_out) {
    long lo = lo_out, hi = hi_out;
    while (lo != hi) {
      long j = cols_[lo++];
      const long i = y_[j];
      const double m = d_[j];
      const double h = cost(i, j) - v_[j] - m;
      for (long k = hi; k < n_; ++k) {
        j = cols_[k];
        const double reduced = cost(i, j) - v_[j] - h;
        if (reduced < d_[j]) {
          d_[j] = reduced;
          pred_[j] = i;
          if (reduced == m) {
            if (y_[j] < 0) return j;
            cols_[k] = cols_[hi];
            cols_[hi++] = j;
          }
        }
      }
    }
    lo_out = lo;
    hi_out = hi;
    return -1;
  }

  void augment(long start) {
    long j = find_path(start);
    long i = -1;
    while (i != start) {
      i = pred_[j];
      y_[j] = i;
      std::swap(j, x_[i]);
    }
  }

  const double* c_;
  long n_;
  std::vector<long> x_, y_;
  std::vector<double> v_, d_;
  std::vector<long> pred_, cols_;
};

}  // namespace

Matching linear_assignment(std::span<const double> cost, std::size_t n, std::vector<double>* duals) {
  if (cost.size() != n * n) {
    throw Error(fmt::format("assignment: cost has {} entries, expected {}", cost.size(), n * n));
  }
  Matching out;
  if (n == 0) return out;
  const std::vector<long> x = Lapjv(cost, n).solve(duals);
  out.permutation.assign(x.begin(), x.end());
  for (std::size_t i = 0; i < n; ++i) out.cost += cost[i * n + out.permutation[i]];
  return out;
}

std::pair<Tensor, Matching> emd(const Tensor& p, const Tensor& g, std::vector<double>* duals) {
  check_points(p, "emd");
  check_points(g, "emd");
  const std::size_t n = p.size(0);
  if (g.size(0) != n) {
    throw Error(fmt::format("emd: point sets must have equal size, got {} vs {}", n, g.size(0)));
  }
  const auto pv = p.values();
  const auto gv = g.values();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = pv[3 * i] - gv[3 * j], dy = pv[3 * i + 1] - gv[3 * j + 1],
                   dz = pv[3 * i + 2] - gv[3 * j + 2];
      cost[i * n + j] = std::sqrt(dx * dx + dy * dy + dz * dz);
    }
  Matching match = linear_assignment(cost, n, duals);
  auto perm = std::make_shared<std::vector<std::size_t>>(match.permutation);
  Tensor value = make_result("emd", Shape{}, {match.cost}, {p, g}, [perm, n](Node& self) {
    const double up = self.grad[0];
    const auto& pv = self.parent_value(0);
    const auto& gv = self.parent_value(1);
    auto gp = self.parent_grad(0);
    auto gg = self.parent_grad(1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = (*perm)[i];
      double d[3];
      double r2 = 0.0;
      for (int k = 0; k < 3; ++k) {
        d[k] = pv[3 * i + k] - gv[3 * j + k];
        r2 += d[k] * d[k];
      }
      if (r2 == 0.0) continue;
      const double s = up / std::sqrt(r2);
      for (int k = 0; k < 3; ++k) {
        if (!gp.empty()) gp[3 * i + k] += s * d[k];
        if (!gg.empty()) gg[3 * j + k] -= s * d[k];
      }
    }
  });
  return {value, std::move(match)};
}

double emd(const PointCloud& p, const PointCloud& g) {
  return emd(p.to_tensor(), g.to_tensor()).first.item();
}

Tensor mmd(std::span<const Tensor> generated, std::span<const Tensor> reference, SetMetric metric) {
  if (generated.empty() || reference.empty()) throw Error("mmd: both cloud sets must be non-empty");
  std::vector<Tensor> picked;
  picked.reserve(reference.size());
  for (const Tensor& x : reference) {
    Tensor best;
    for (const Tensor& y : generated) {
      Tensor d = metric == SetMetric::Chamfer ? chamfer(x, y, ChamferForm::L2) : emd(x, y).first;
      if (!best.defined() || d.item() < best.item()) best = d;
    }
    picked.push_back(best);
  }
  Tensor total = picked.front();
  for (std::size_t i = 1; i < picked.size(); ++i) total = add(total, picked[i]);
  return scale(total, 1.0 / static_cast<double>(reference.size()));
}

}  // namespace dcs
