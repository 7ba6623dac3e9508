#include "dcs/core/tensor.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "dcs/core/autograd.hpp"
#include "dcs/core/error.hpp"

namespace dcs {

using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// out (+)= op(a) * op(b) over row-major buffers. The operands go through
// Eigen-owned aligned storage because Eigen's vector kernels peel by pointer
// alignment, and results must not depend on where a buffer landed.
void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b, std::size_t br,
          std::size_t bc, bool tb, double* out, bool accumulate) {
  const RowMat lhs = ta ? RowMat(ConstMap(a, ar, ac).transpose()) : RowMat(ConstMap(a, ar, ac));
  const RowMat rhs = tb ? RowMat(ConstMap(b, br, bc).transpose()) : RowMat(ConstMap(b, br, bc));
  RowMat prod(lhs.rows(), rhs.cols());
  prod.noalias() = lhs * rhs;
  const double* p = prod.data();
  const std::size_t size = static_cast<std::size_t>(prod.size());
  if (accumulate) {
    for (std::size_t i = 0; i < size; ++i) out[i] += p[i];
  } else {
    std::copy(p, p + size, out);
  }
}

const Node& node_of(const Tensor& t, const char* op) {
  if (!t.defined()) throw Error(fmt::format("{}: undefined tensor operand", op));
  return *t.node();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (node_of(t, op).shape.size() != rank) {
    throw Error(fmt::format("{}: expected rank {} tensor, got shape {}", op, rank,
                            shape_string(t.shape())));
  }
}

// Outer/axis/inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw Error(fmt::format("{}: axis {} out of range for shape {}", op, axis,
                            shape_string(shape)));
  }
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (d != axis) out.push_back(shape[d]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  enum Kind { kSame, kScalarA, kScalarB, kTileA, kTileB, kGeneral } kind = kSame;
  Shape out;
  std::size_t n = 0, na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;
};

Shape strip_leading_ones(const Shape& s) {
  std::size_t k = 0;
  while (k < s.size() && s[k] == 1) ++k;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(k), s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
  Shape trimmed = strip_leading_ones(small);
  if (trimmed.size() > big.size()) return false;
  return std::equal(trimmed.begin(), trimmed.end(), big.end() - static_cast<std::ptrdiff_t>(trimmed.size()));
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t da = d + a.size() >= rank ? a[d + a.size() - rank] : 1;
    const std::size_t db = d + b.size() >= rank ? b[d + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) {
      throw Error(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a),
                              shape_string(b)));
    }
    p.out[d] = da == 1 ? db : da;
  }
  p.n = shape_numel(p.out);
  p.na = shape_numel(a);
  p.nb = shape_numel(b);
  if (a == b) {
    p.kind = Broadcast::kSame;
  } else if (p.nb == 1 && p.na == p.n) {
    p.kind = Broadcast::kScalarB;
  } else if (p.na == 1 && p.nb == p.n) {
    p.kind = Broadcast::kScalarA;
  } else if (p.na == p.n && is_suffix(b, a)) {
    p.kind = Broadcast::kTileB;
  } else if (p.nb == p.n && is_suffix(a, b)) {
    p.kind = Broadcast::kTileA;
  } else {
    p.kind = Broadcast::kGeneral;
    auto strides_for = [&](const Shape& s) {
      std::vector<std::size_t> st(rank, 0);
      std::size_t acc = 1;
      for (std::size_t k = 0; k < s.size(); ++k) {
        const std::size_t d = rank - 1 - k;
        const std::size_t ext = s[s.size() - 1 - k];
        st[d] = ext == 1 ? 0 : acc;
        acc *= ext;
      }
      return st;
    };
    const auto sa = strides_for(a);
    const auto sb = strides_for(b);
    p.ia.resize(p.n);
    p.ib.resize(p.n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < p.n; ++i) {
      p.ia[i] = oa;
      p.ib[i] = ob;
      for (std::size_t d = rank; d-- > 0;) {
        ++counter[d];
        oa += sa[d];
        ob += sb[d];
        if (counter[d] < p.out[d]) break;
        oa -= sa[d] * counter[d];
        ob -= sb[d] * counter[d];
        counter[d] = 0;
      }
    }
  }
  return p;
}

template <class Body>
void for_each_index(const Broadcast& p, Body&& body) {
  const std::size_t n = p.n;
  switch (p.kind) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < n; ++i) body(i, i, i);
      break;
    case Broadcast::kScalarA:
      for (std::size_t i = 0; i < n; ++i) body(i, std::size_t{0}, i);
      break;
    case Broadcast::kScalarB:
      for (std::size_t i = 0; i < n; ++i) body(i, i, std::size_t{0});
      break;
    case Broadcast::kTileA: {
      std::size_t j = 0;
      for (std::size_t i = 0; i < n; ++i) {
        body(i, j, i);
        if (++j == p.na) j = 0;
      }
      break;
    }
    case Broadcast::kTileB: {
      std::size_t j = 0;
      for (std::size_t i = 0; i < n; ++i) {
        body(i, i, j);
        if (++j == p.nb) j = 0;
      }
      break;
    }
    case Broadcast::kGeneral:
      for (std::size_t i = 0; i < n; ++i) body(i, p.ia[i], p.ib[i]);
      break;
  }
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd f, DA da, DB db) {
  const Node& na = node_of(a, op);
  const Node& nb = node_of(b, op);
  auto plan = std::make_shared<Broadcast>(plan_broadcast(na.shape, nb.shape, op));
  std::vector<double> out(plan->n);
  const double* x = na.value.data();
  const double* y = nb.value.data();
  for_each_index(*plan, [&](std::size_t i, std::size_t ja, std::size_t jb) {
    out[i] = f(x[ja], y[jb]);
  });
  Shape shape = plan->out;
  return make_result(op, std::move(shape), std::move(out), {a, b},
                     [plan, da, db](Node& self) {
                       const double* g = self.grad.data();
                       const double* xv = self.parent_value(0).data();
                       const double* yv = self.parent_value(1).data();
                       auto gx = self.parent_grad(0);
                       auto gy = self.parent_grad(1);
                       if (!gx.empty()) {
                         for_each_index(*plan, [&](std::size_t i, std::size_t ja, std::size_t jb) {
                           gx[ja] += g[i] * da(xv[ja], yv[jb]);
                         });
                       }
                       if (!gy.empty()) {
                         for_each_index(*plan, [&](std::size_t i, std::size_t ja, std::size_t jb) {
                           gy[jb] += g[i] * db(xv[ja], yv[jb]);
                         });
                       }
                     });
}

// `d(x, y)` is dy/dx where y = f(x).
template <class Fwd, class D>
Tensor unary_op(const char* op, const Tensor& a, Fwd f, D d) {
  const Node& na = node_of(a, op);
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(na.value[i]);
  return make_result(op, na.shape, std::move(out), {a}, [d](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    const auto& x = self.parent_value(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * d(x[i], self.value[i]);
  });
}

Tensor extreme_along(const char* op, const Tensor& a, std::size_t axis, bool want_max) {
  const Node& na = node_of(a, op);
  const AxisSplit s = split_axis(na.shape, axis, op);
  if (s.len == 0) throw Error(fmt::format("{}: empty axis", op));
  const std::size_t n_out = s.outer * s.inner;
  std::vector<double> out(n_out);
  auto arg = std::make_shared<std::vector<std::size_t>>(n_out);
  const double* x = na.value.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    double* best = out.data() + o * s.inner;
    std::size_t* where = arg->data() + o * s.inner;
    const std::size_t base = o * s.len * s.inner;
    for (std::size_t in = 0; in < s.inner; ++in) {
      best[in] = x[base + in];
      where[in] = base + in;
    }
    // Strict comparison keeps the first index on ties.
    for (std::size_t l = 1; l < s.len; ++l) {
      const std::size_t row = base + l * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) {
        const double v = x[row + in];
        const bool better = want_max ? v > best[in] : v < best[in];
        best[in] = better ? v : best[in];
        where[in] = better ? row + in : where[in];
      }
    }
  }
  return make_result(op, drop_axis(na.shape, axis), std::move(out), {a}, [arg](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += self.grad[i];
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Shapes and tensor handle

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

Tensor make_tensor_from_node(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }

struct TensorAccess {
  static const std::shared_ptr<Node>& ptr(const Tensor& t) { return t.node_; }
};

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& parents,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs_grad = false;
  for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) {
      node->parents.push_back(TensorAccess::ptr(p));
    }
    node->backward = std::move(backward);
  }
  return make_tensor_from_node(std::move(node));
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw Error(fmt::format("Tensor: shape {} needs {} values, got {}", shape_string(shape),
                            shape_numel(shape), values.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error("Tensor::matrix: ragged rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return node_of(*this, "shape").shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw Error(fmt::format("size: axis {} out of range for shape {}", axis, shape_string(s)));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this, "numel").value.size(); }

std::span<const double> Tensor::values() const { return node_of(*this, "values").value; }

std::span<double> Tensor::mutable_values() {
  node_of(*this, "mutable_values");
  if (!node_->parents.empty()) throw Error("mutable_values: tensor is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw Error(fmt::format("item: tensor of shape {} is not a scalar", shape_string(shape())));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t flat) const {
  const auto v = values();
  if (flat >= v.size()) throw Error(fmt::format("at: index {} out of range {}", flat, v.size()));
  return v[flat];
}

double Tensor::operator()(std::size_t row, std::size_t col) const {
  require_rank(*this, 2, "operator()");
  return at(row * node_->shape[1] + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  node_of(*this, "set_requires_grad");
  if (!node_->parents.empty()) throw Error("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_of(*this, "is_leaf").parents.empty(); }

bool Tensor::has_grad() const { return node_ && node_->grad_ready; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("grad: no gradient materialized");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad.clear();
  node_->grad_ready = false;
}

const char* Tensor::op_name() const { return node_of(*this, "op_name").op; }

Tensor Tensor::detach() const {
  const Node& n = node_of(*this, "detach");
  return Tensor(n.shape, n.value, false);
}

void Tensor::backward() const {
  const Node& root_node = node_of(*this, "backward");
  if (root_node.value.size() != 1) {
    throw Error(fmt::format("backward: loss must be a scalar, got shape {}",
                            shape_string(root_node.shape)));
  }
  if (!root_node.requires_grad) return;

  // Iterative post-order DFS over nodes that require a gradient.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->parents.empty()) {
      n->grad.clear();
      n->grad_ready = false;
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad_ready) {
      n->backward(*n);
      // Intermediate gradients are not needed once propagated; returning
      // them keeps the working set small.
      std::vector<double>().swap(n->grad);
      n->grad_ready = false;
    }
  }
}

// ---------------------------------------------------------------------------
// Element-wise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(
      "add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw Error(fmt::format("matmul: shape mismatch {} vs {}", shape_string(a.shape()),
                            shape_string(b.shape())));
  }
  std::vector<double> out(m * n);
  gemm(a.values().data(), m, k, false, b.values().data(), k, n, false, out.data(), false);
  return make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* g = self.grad.data();
    auto ga = self.parent_grad(0);
    auto gb = self.parent_grad(1);
    if (!ga.empty()) gemm(g, m, n, false, self.parent_value(1).data(), k, n, true, ga.data(), true);
    if (!gb.empty()) gemm(self.parent_value(0).data(), m, k, true, g, m, n, false, gb.data(), true);
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.size(0), c = a.size(1);
  std::vector<double> out(r * c);
  MutMap(out.data(), c, r) = ConstMap(a.values().data(), r, c).transpose();
  return make_result("transpose", Shape{c, r}, std::move(out), {a}, [r, c](Node& self) {
    auto ga = self.parent_grad(0);
    if (ga.empty()) return;
    MutMap(ga.data(), r, c) += ConstMap(self.grad.data(), c, r).transpose();
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t n = x.size(0), in = x.size(1), out_dim = w.size(1);
  if (w.size(0) != in) {
    throw Error(fmt::format("linear: shape mismatch {} vs {}", shape_string(x.shape()),
                            shape_string(w.shape())));
  }
  const bool has_bias = b.defined();
  if (has_bias && b.numel() != out_dim) {
    throw Error(fmt::format("linear: bias shape {} does not match output width {}",
                            shape_string(b.shape()), out_dim));
  }
  std::vector<double> out(n * out_dim);
  gemm(x.values().data(), n, in, false, w.values().data(), in, out_dim, false, out.data(), false);
  if (has_bias) {
    const auto bias = b.values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bias[j];
  }
  std::vector<Tensor> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_result("linear", Shape{n, out_dim}, std::move(out), parents,
                     [n, in, out_dim, has_bias](Node& self) {
                       const double* g = self.grad.data();
                       auto gx = self.parent_grad(0);
                       auto gw = self.parent_grad(1);
                       if (!gx.empty()) {
                         gemm(g, n, out_dim, false, self.parent_value(1).data(), in, out_dim, true, gx.data(),
                              true);
                       }
                       if (!gw.empty()) {
                         gemm(self.parent_value(0).data(), n, in, true, g, n, out_dim, false, gw.data(), true);
                       }
                       if (has_bias) {
                         auto gb = self.parent_grad(2);
                         if (!gb.empty()) {
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& a, std::size_t axis) {
  const Node& na = node_of(a, "softmax");
  const AxisSplit s = split_axis(na.shape, axis, "softmax");
  std::vector<double> out(na.value.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, na.value[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(na.value[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  }
  return make_result("softmax", na.shape, std::move(out), {a}, [s](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const Node& na = node_of(a, "log_softmax");
  const AxisSplit s = split_axis(na.shape, axis, "log_softmax");
  std::vector<double> out(na.value.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, na.value[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(na.value[base + l * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = na.value[base + l * s.inner] - lse;
    }
  }
  return make_result("log_softmax", na.shape, std::move(out), {a}, [s](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double gsum = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) gsum += g[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t i = base + l * s.inner;
          gx[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  const Node& na = node_of(a, "sum");
  double total = 0.0;
  for (double v : na.value) total += v;
  return make_result("sum", Shape{}, {total}, {a}, [](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw Error("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const Node& na = node_of(a, "sum");
  const AxisSplit s = split_axis(na.shape, axis, "sum");
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* src = na.value.data() + (o * s.len + l) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  }
  return make_result("sum_axis", drop_axis(na.shape, axis), std::move(out), {a}, [s](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t l = 0; l < s.len; ++l) {
        double* dst = gx.data() + (o * s.len + l) * s.inner;
        const double* g = self.grad.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) dst[in] += g[in];
      }
    }
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const std::size_t len = split_axis(a.shape(), axis, "mean").len;
  if (len == 0) throw Error("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(len));
}

Tensor max(const Tensor& a, std::size_t axis) { return extreme_along("max", a, axis, true); }

Tensor min(const Tensor& a, std::size_t axis) { return extreme_along("min", a, axis, false); }

// ---------------------------------------------------------------------------
// Structural

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error("concat: no operands");
  const Shape& first = node_of(parts[0], "concat").shape;
  if (axis >= first.size()) {
    throw Error(fmt::format("concat: axis {} out of range for shape {}", axis, shape_string(first)));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Shape& s = node_of(p, "concat").shape;
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw Error(fmt::format("concat: shape mismatch {} vs {}", shape_string(first), shape_string(s)));
    }
    lens.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit s = split_axis(out_shape, axis, "concat");
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].node()->value;
    const std::size_t chunk = lens[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.data() + o * chunk, chunk, out.data() + o * s.len * s.inner + offset);
    }
    offset += chunk;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts, [s, lens](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      const std::size_t chunk = lens[p] * s.inner;
      auto gp = self.parent_grad(p);
      if (!gp.empty()) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = self.grad.data() + o * s.len * s.inner + offset;
          double* dst = gp.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const Node& na = node_of(a, "gather_rows");
  if (na.shape.empty()) throw Error("gather_rows: scalar operand");
  const std::size_t rows = na.shape[0];
  const std::size_t width = rows == 0 ? 0 : na.value.size() / rows;
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  std::vector<double> out(idx->size() * width);
  for (std::size_t r = 0; r < idx->size(); ++r) {
    const std::size_t src = (*idx)[r];
    if (src >= rows) throw Error(fmt::format("gather_rows: index {} out of range {}", src, rows));
    std::copy_n(na.value.data() + src * width, width, out.data() + r * width);
  }
  Shape shape = na.shape;
  shape[0] = idx->size();
  return make_result("gather_rows", std::move(shape), std::move(out), {a}, [idx, width](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const double* g = self.grad.data() + r * width;
      double* dst = gx.data() + (*idx)[r] * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += g[c];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Node& na = node_of(a, "slice");
  const AxisSplit s = split_axis(na.shape, axis, "slice");
  if (begin > end || end > s.len) {
    throw Error(fmt::format("slice: range [{}, {}) invalid for axis {} of shape {}", begin, end,
                            axis, shape_string(na.shape)));
  }
  Shape shape = na.shape;
  shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  std::vector<double> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(na.value.data() + (o * s.len + begin) * s.inner, chunk, out.data() + o * chunk);
  }
  return make_result("slice", std::move(shape), std::move(out), {a}, [s, begin, chunk](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* g = self.grad.data() + o * chunk;
      double* dst = gx.data() + (o * s.len + begin) * s.inner;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  const Node& na = node_of(a, "reshape");
  if (shape_numel(shape) != na.value.size()) {
    throw Error(fmt::format("reshape: shape mismatch {} vs {}", shape_string(na.shape),
                            shape_string(shape)));
  }
  return make_result("reshape", std::move(shape), na.value, {a}, [](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor broadcast_to(const Tensor& a, Shape shape) {
  const Node& na = node_of(a, "broadcast_to");
  auto plan = std::make_shared<Broadcast>(plan_broadcast(na.shape, shape, "broadcast_to"));
  if (plan->out != shape) {
    throw Error(fmt::format("broadcast_to: shape mismatch {} vs {}", shape_string(na.shape),
                            shape_string(shape)));
  }
  std::vector<double> out(plan->n);
  for_each_index(*plan, [&](std::size_t i, std::size_t ja, std::size_t) { out[i] = na.value[ja]; });
  return make_result("broadcast_to", std::move(shape), std::move(out), {a}, [plan](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    for_each_index(*plan, [&](std::size_t i, std::size_t ja, std::size_t) { gx[ja] += self.grad[i]; });
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.size(0), c = logits.size(1);
  if (labels.size() != b) {
    throw Error(fmt::format("cross_entropy: {} labels for {} rows", labels.size(), b));
  }
  auto probs = std::make_shared<std::vector<double>>(b * c);
  auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
  const auto x = logits.values();
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if ((*lab)[r] >= c) throw Error(fmt::format("cross_entropy: label {} out of range {}", (*lab)[r], c));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[r * c + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(x[r * c + j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(x[r * c + j] - lse);
    loss += lse - x[r * c + (*lab)[r]];
  }
  loss /= static_cast<double>(b);
  return make_result("cross_entropy", Shape{}, {loss}, {logits}, [probs, lab, b, c](Node& self) {
    auto gx = self.parent_grad(0);
    if (gx.empty()) return;
    const double g = self.grad[0] / static_cast<double>(b);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        const double target = j == (*lab)[r] ? 1.0 : 0.0;
        gx[r * c + j] += g * ((*probs)[r * c + j] - target);
      }
    }
  });
}

}  // namespace dcs
