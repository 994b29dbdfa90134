#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "atdgnn/errors.hpp"
#include "atdgnn/rng.hpp"

namespace atdgnn {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // pushes node.grad into parents

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

}  // namespace detail

// Dense row-major tensor of doubles with reverse-mode autodiff. Value
// semantics on the handle; the storage node is shared, so copies alias the
// same buffer (like the usual tape-based engines). Ops are free functions
// that record a backward closure when any input requires a gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    for (int d : shape)
      if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    return from_data(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), value),
                     requires_grad);
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, 0.0, requires_grad);
  }

  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return full(shape, 1.0, requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return from_data(shape, std::move(d), requires_grad);
  }

  static Tensor randn(const Shape& shape, double stddev, Rng& rng, bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : d) x = rng.normal(0.0, stddev);
    return from_data(shape, std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double value() const {
    if (numel() != 1) throw ContractError("value() requires a scalar tensor");
    return node_->data[0];
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient; run backward() first");
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Deep copy detached from the graph.
  Tensor detach() const {
    return from_data(node_->shape, node_->data, false);
  }

  // Deep copy that is a fresh leaf with the same requires_grad flag.
  Tensor clone() const {
    return from_data(node_->shape, node_->data, node_->requires_grad);
  }

  // Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
  // calls; interior gradients are reset so each sweep contributes exactly one
  // unit of upstream seed.
  void backward() const {
    if (!defined() || numel() != 1) throw ContractError("backward() requires a scalar loss");
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    // order is now a topological sort (parents before children)
    for (detail::Node* n : order)
      if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_result(Shape shape, std::vector<double> data,
                                         std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  for (auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) n->parents = std::move(parents);
  return n;
}

// numpy-style broadcast of two shapes (align from the trailing axis)
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// strides of `in` viewed under `out` (0 stride on broadcast axes)
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  auto st = row_major_strides(in);
  std::vector<int64_t> res(out.size(), 0);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    res[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
  return res;
}

// Applies fn(out_index, a_index, b_index) over every element of `out`.
template <typename Fn>
inline void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                               const std::vector<int64_t>& sb, Fn&& fn) {
  int64_t total = shape_numel(out);
  size_t nd = out.size();
  std::vector<int64_t> idx(nd, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t lin = 0; lin < total; ++lin) {
    fn(lin, ia, ib);
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      ia += sa[ud];
      ib += sb[ud];
      if (++idx[ud] < out[ud]) break;
      ia -= sa[ud] * out[ud];
      ib -= sb[ud] * out[ud];
      idx[ud] = 0;
    }
  }
}

inline void accumulate_grad(Node& parent, const std::vector<double>& contribution) {
  parent.ensure_grad();
  for (size_t i = 0; i < contribution.size(); ++i) parent.grad[i] += contribution[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting

namespace detail {

enum class BinOp { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
  auto an = a.node();
  auto bn = b.node();
  const Shape out_shape = broadcast_shape(an->shape, bn->shape);
  const auto sa = broadcast_strides(an->shape, out_shape);
  const auto sb = broadcast_strides(bn->shape, out_shape);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  const double* pa = an->data.data();
  const double* pb = bn->data.data();

  const bool same = an->shape == bn->shape;
  if (same) {
    // fast path: contiguous, no index bookkeeping
    size_t n = out.size();
    switch (op) {
      case BinOp::Add: for (size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
      case BinOp::Div: for (size_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i]; break;
    }
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
      switch (op) {
        case BinOp::Add: out[static_cast<size_t>(o)] = pa[ia] + pb[ib]; break;
        case BinOp::Sub: out[static_cast<size_t>(o)] = pa[ia] - pb[ib]; break;
        case BinOp::Mul: out[static_cast<size_t>(o)] = pa[ia] * pb[ib]; break;
        case BinOp::Div: out[static_cast<size_t>(o)] = pa[ia] / pb[ib]; break;
      }
    });
  }

  auto res = make_result(out_shape, std::move(out), {an, bn});
  if (res->requires_grad) {
    res->backward_fn = [an, bn, sa, sb, op](Node& self) {
      const double* g = self.grad.data();
      const double* da = an->data.data();
      const double* db = bn->data.data();
      std::vector<double> ga, gb;
      if (an->requires_grad) ga.assign(an->data.size(), 0.0);
      if (bn->requires_grad) gb.assign(bn->data.size(), 0.0);
      for_each_broadcast(self.shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
        double go = g[o];
        switch (op) {
          case BinOp::Add:
            if (!ga.empty()) ga[static_cast<size_t>(ia)] += go;
            if (!gb.empty()) gb[static_cast<size_t>(ib)] += go;
            break;
          case BinOp::Sub:
            if (!ga.empty()) ga[static_cast<size_t>(ia)] += go;
            if (!gb.empty()) gb[static_cast<size_t>(ib)] -= go;
            break;
          case BinOp::Mul:
            if (!ga.empty()) ga[static_cast<size_t>(ia)] += go * db[ib];
            if (!gb.empty()) gb[static_cast<size_t>(ib)] += go * da[ia];
            break;
          case BinOp::Div: {
            double inv = 1.0 / db[ib];
            if (!ga.empty()) ga[static_cast<size_t>(ia)] += go * inv;
            if (!gb.empty()) gb[static_cast<size_t>(ib)] -= go * da[ia] * inv * inv;
            break;
          }
        }
      });
      if (!ga.empty()) accumulate_grad(*an, ga);
      if (!gb.empty()) accumulate_grad(*bn, gb);
    };
  }
  return Tensor::wrap(res);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Div); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// scalar and unary ops

namespace detail {

template <typename Fwd, typename Bwd>
inline Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_factor) {
  auto an = a.node();
  std::vector<double> out(an->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(an->data[i]);
  auto res = make_result(an->shape, std::move(out), {an});
  if (res->requires_grad) {
    res->backward_fn = [an, bwd_factor](Node& self) {
      std::vector<double> ga(an->data.size());
      for (size_t i = 0; i < ga.size(); ++i)
        ga[i] = self.grad[i] * bwd_factor(an->data[i], self.data[i]);
      accumulate_grad(*an, ga);
    };
  }
  return Tensor::wrap(res);
}

}  // namespace detail

inline Tensor mul_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x * s; },
                          [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x + s; },
                          [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp_op(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt_op(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}

inline Tensor pow_scalar(const Tensor& a, double p) {
  return detail::unary_op(a, [p](double x) { return std::pow(x, p); },
                          [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

// max(x, floor); subgradient 0 on the clamped side
inline Tensor clamp_min(const Tensor& a, double floor_value) {
  return detail::unary_op(a, [floor_value](double x) { return x > floor_value ? x : floor_value; },
                          [floor_value](double x, double) { return x > floor_value ? 1.0 : 0.0; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x * x; },
                          [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

inline int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw DimensionError("axis out of range");
  return axis;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, int axis, bool keepdim = true) {
  auto an = a.node();
  axis = detail::normalize_axis(axis, a.ndim());
  const Shape& s = an->shape;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t n = s[static_cast<size_t>(axis)];

  Shape out_shape = s;
  if (keepdim) {
    out_shape[static_cast<size_t>(axis)] = 1;
  } else {
    out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
  }
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const double* p = an->data.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const double* row = p + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
  auto res = detail::make_result(out_shape, std::move(out), {an});
  if (res->requires_grad) {
    res->backward_fn = [an, outer, inner, n](detail::Node& self) {
      std::vector<double> ga(an->data.size());
      const double* g = self.grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k) {
          double* dst = ga.data() + (o * n + k) * inner;
          const double* src = g + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] = src[i];
        }
      detail::accumulate_grad(*an, ga);
    };
  }
  return Tensor::wrap(res);
}

inline Tensor mean(const Tensor& a, int axis, bool keepdim = true) {
  int n = a.dim(detail::normalize_axis(axis, a.ndim()));
  return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

inline Tensor sum_all(const Tensor& a) {
  auto an = a.node();
  double total = std::accumulate(an->data.begin(), an->data.end(), 0.0);
  auto res = detail::make_result({1}, {total}, {an});
  if (res->requires_grad) {
    res->backward_fn = [an](detail::Node& self) {
      std::vector<double> ga(an->data.size(), self.grad[0]);
      detail::accumulate_grad(*an, ga);
    };
  }
  return Tensor::wrap(res);
}

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Per-slice max along `axis`, detached from the graph (no gradient flows).
// Softmax and log-sum-exp are shift invariant, so subtracting a detached max
// leaves their gradients exact while guarding against overflow.
inline Tensor detached_max(const Tensor& a, int axis) {
  auto an = a.node();
  int ax = detail::normalize_axis(axis, a.ndim());
  const Shape& s = an->shape;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t n = s[static_cast<size_t>(ax)];
  Shape out_shape = s;
  out_shape[static_cast<size_t>(ax)] = 1;
  std::vector<double> out(static_cast<size_t>(outer * inner), -std::numeric_limits<double>::infinity());
  const double* p = an->data.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const double* row = p + (o * n + k) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = std::max(dst[i], row[i]);
    }
  return Tensor::from_data(out_shape, std::move(out), false);
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  // a single -1 dimension is inferred
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape allows at most one -1 dimension");
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known != 0)
      throw DimensionError("cannot infer reshape dimension");
    new_shape[static_cast<size_t>(infer)] = static_cast<int>(a.numel() / known);
  }
  if (shape_numel(new_shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
  auto an = a.node();
  auto res = detail::make_result(new_shape, an->data, {an});
  if (res->requires_grad) {
    res->backward_fn = [an](detail::Node& self) { detail::accumulate_grad(*an, self.grad); };
  }
  return Tensor::wrap(res);
}

// Flattens all axes from `axis` (inclusive) to the end; Γ in the output head.
inline Tensor flatten_from(const Tensor& a, int axis) {
  axis = detail::normalize_axis(axis, a.ndim());
  Shape ns(a.shape().begin(), a.shape().begin() + axis);
  int64_t rest = 1;
  for (int i = axis; i < a.ndim(); ++i) rest *= a.dim(i);
  ns.push_back(static_cast<int>(rest));
  return reshape(a, ns);
}

inline Tensor transpose(const Tensor& a, int d0, int d1) {
  d0 = detail::normalize_axis(d0, a.ndim());
  d1 = detail::normalize_axis(d1, a.ndim());
  auto an = a.node();
  if (d0 == d1) {
    auto res = detail::make_result(an->shape, an->data, {an});
    if (res->requires_grad)
      res->backward_fn = [an](detail::Node& self) { detail::accumulate_grad(*an, self.grad); };
    return Tensor::wrap(res);
  }
  Shape out_shape = an->shape;
  std::swap(out_shape[static_cast<size_t>(d0)], out_shape[static_cast<size_t>(d1)]);
  auto sin = detail::row_major_strides(an->shape);
  std::swap(sin[static_cast<size_t>(d0)], sin[static_cast<size_t>(d1)]);
  int64_t total = a.numel();
  std::vector<double> out(static_cast<size_t>(total));
  size_t nd = out_shape.size();
  std::vector<int64_t> idx(nd, 0);
  const double* p = an->data.data();
  int64_t src = 0;
  for (int64_t lin = 0; lin < total; ++lin) {
    out[static_cast<size_t>(lin)] = p[src];
    for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      src += sin[ud];
      if (++idx[ud] < out_shape[ud]) break;
      src -= sin[ud] * out_shape[ud];
      idx[ud] = 0;
    }
  }
  auto res = detail::make_result(out_shape, std::move(out), {an});
  if (res->requires_grad) {
    res->backward_fn = [an, out_shape, sin](detail::Node& self) {
      std::vector<double> ga(an->data.size());
      size_t nd2 = out_shape.size();
      std::vector<int64_t> idx2(nd2, 0);
      int64_t src2 = 0;
      int64_t total2 = static_cast<int64_t>(self.grad.size());
      for (int64_t lin = 0; lin < total2; ++lin) {
        ga[static_cast<size_t>(src2)] = self.grad[static_cast<size_t>(lin)];
        for (int d = static_cast<int>(nd2) - 1; d >= 0; --d) {
          size_t ud = static_cast<size_t>(d);
          src2 += sin[ud];
          if (++idx2[ud] < out_shape[ud]) break;
          src2 -= sin[ud] * out_shape[ud];
          idx2[ud] = 0;
        }
      }
      detail::accumulate_grad(*an, ga);
    };
  }
  return Tensor::wrap(res);
}

// Contiguous slice along one axis: indices [start, start+len).
inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  auto an = a.node();
  int ax = detail::normalize_axis(axis, a.ndim());
  const Shape& s = an->shape;
  int n = s[static_cast<size_t>(ax)];
  if (start < 0 || len <= 0 || start + len > n)
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis length " + std::to_string(n));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[static_cast<size_t>(ax)] = len;
  std::vector<double> out(static_cast<size_t>(outer * len * inner));
  const double* p = an->data.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(p + (o * n + start) * inner, len * inner, out.data() + o * len * inner);
  auto res = detail::make_result(out_shape, std::move(out), {an});
  if (res->requires_grad) {
    res->backward_fn = [an, outer, inner, n, start, len](detail::Node& self) {
      std::vector<double> ga(an->data.size(), 0.0);
      const double* g = self.grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        double* dst = ga.data() + (o * n + start) * inner;
        const double* src = g + o * len * inner;
        for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i) dst[i] += src[i];
      }
      detail::accumulate_grad(*an, ga);
    };
  }
  return Tensor::wrap(res);
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of empty tensor list");
  int nd = parts[0].ndim();
  int ax = detail::normalize_axis(axis, nd);
  Shape out_shape = parts[0].shape();
  int total_axis = 0;
  for (const auto& t : parts) {
    if (t.ndim() != nd) throw DimensionError("concat rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != ax && t.dim(i) != out_shape[static_cast<size_t>(i)])
        throw DimensionError("concat shape mismatch on axis " + std::to_string(i));
    total_axis += t.dim(ax);
  }
  out_shape[static_cast<size_t>(ax)] = total_axis;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::vector<int> lens;
  parents.reserve(parts.size());
  for (const auto& t : parts) {
    parents.push_back(t.node());
    lens.push_back(t.dim(ax));
  }
  int64_t off = 0;
  for (size_t pi = 0; pi < parents.size(); ++pi) {
    const double* p = parents[pi]->data.data();
    int len = lens[pi];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p + o * len * inner, len * inner,
                  out.data() + (o * total_axis + off) * inner);
    off += len;
  }
  auto res = detail::make_result(out_shape, std::move(out), parents);
  if (res->requires_grad) {
    res->backward_fn = [parents, lens, outer, inner, total_axis](detail::Node& self) {
      int64_t off2 = 0;
      for (size_t pi = 0; pi < parents.size(); ++pi) {
        int len = lens[pi];
        if (parents[pi]->requires_grad) {
          std::vector<double> ga(parents[pi]->data.size());
          for (int64_t o = 0; o < outer; ++o)
            std::copy_n(self.grad.data() + (o * total_axis + off2) * inner, len * inner,
                        ga.data() + o * len * inner);
          detail::accumulate_grad(*parents[pi], ga);
        }
        off2 += len;
      }
    };
  }
  return Tensor::wrap(res);
}

// Gathers rows along `axis` by index: out[..., i, ...] = x[..., order[i], ...].
// With a bijective `order` this is a pure permutation.
inline Tensor take_rows(const Tensor& a, const std::vector<int>& order, int axis) {
  auto an = a.node();
  int ax = detail::normalize_axis(axis, a.ndim());
  const Shape& s = an->shape;
  int n = s[static_cast<size_t>(ax)];
  for (int i : order)
    if (i < 0 || i >= n) throw DimensionError("row index out of range in take_rows");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];
  int m = static_cast<int>(order.size());
  Shape out_shape = s;
  out_shape[static_cast<size_t>(ax)] = m;
  std::vector<double> out(static_cast<size_t>(outer * m * inner));
  const double* p = an->data.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int i = 0; i < m; ++i)
      std::copy_n(p + (o * n + order[static_cast<size_t>(i)]) * inner, inner,
                  out.data() + (o * m + i) * inner);
  auto res = detail::make_result(out_shape, std::move(out), {an});
  if (res->requires_grad) {
    res->backward_fn = [an, order, outer, inner, n, m](detail::Node& self) {
      std::vector<double> ga(an->data.size(), 0.0);
      const double* g = self.grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int i = 0; i < m; ++i) {
          double* dst = ga.data() + (o * n + order[static_cast<size_t>(i)]) * inner;
          const double* src = g + (o * m + i) * inner;
          for (int64_t k = 0; k < inner; ++k) dst[k] += src[k];
        }
      detail::accumulate_grad(*an, ga);
    };
  }
  return Tensor::wrap(res);
}

// ---------------------------------------------------------------------------
// matmul: 2-D x 2-D, and batched 3-D where either operand may be 2-D
// (broadcast over the batch).

namespace detail {

inline void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,
                     int64_t n) {
  // C (m x n) += A (m x k) * B (k x n); ikj order keeps the inner loop
  // contiguous in both B and C so it vectorizes.
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A^T stored as (k x m) times B (k x n)
inline void gemm_at_b(const double* a, const double* b, double* c, int64_t m, int64_t k,
                      int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = arow[i];
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x k) += A (m x n) * B^T stored as (k x n)
inline void gemm_a_bt(const double* a, const double* b, double* c, int64_t m, int64_t n,
                      int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  auto an = a.node();
  auto bn = b.node();
  int ar = a.ndim(), br = b.ndim();
  if ((ar != 2 && ar != 3) || (br != 2 && br != 3))
    throw DimensionError("matmul supports 2-D and 3-D operands, got " + shape_str(an->shape) +
                         " x " + shape_str(bn->shape));
  int64_t batch_a = ar == 3 ? a.dim(0) : 1;
  int64_t batch_b = br == 3 ? b.dim(0) : 1;
  int64_t m = ar == 3 ? a.dim(1) : a.dim(0);
  int64_t ka = ar == 3 ? a.dim(2) : a.dim(1);
  int64_t kb = br == 3 ? b.dim(1) : b.dim(0);
  int64_t n = br == 3 ? b.dim(2) : b.dim(1);
  if (ka != kb)
    throw DimensionError("matmul inner dimension mismatch: " + shape_str(an->shape) + " x " +
                         shape_str(bn->shape));
  if (batch_a != batch_b && batch_a != 1 && batch_b != 1)
    throw DimensionError("matmul batch mismatch");
  int64_t batch = std::max(batch_a, batch_b);
  bool batched_out = (ar == 3 || br == 3);
  Shape out_shape = batched_out ? Shape{static_cast<int>(batch), static_cast<int>(m),
                                        static_cast<int>(n)}
                                : Shape{static_cast<int>(m), static_cast<int>(n)};
  std::vector<double> out(static_cast<size_t>(batch * m * n), 0.0);
  const double* pa = an->data.data();
  const double* pb = bn->data.data();
  int64_t k = ka;
  for (int64_t bi = 0; bi < batch; ++bi) {
    const double* abuf = pa + (batch_a == 1 ? 0 : bi * m * k);
    const double* bbuf = pb + (batch_b == 1 ? 0 : bi * k * n);
    detail::gemm_acc(abuf, bbuf, out.data() + bi * m * n, m, k, n);
  }
  auto res = detail::make_result(out_shape, std::move(out), {an, bn});
  if (res->requires_grad) {
    res->backward_fn = [an, bn, batch, batch_a, batch_b, m, k, n](detail::Node& self) {
      const double* g = self.grad.data();
      if (an->requires_grad) {
        std::vector<double> ga(an->data.size(), 0.0);
        for (int64_t bi = 0; bi < batch; ++bi) {
          const double* bbuf = bn->data.data() + (batch_b == 1 ? 0 : bi * k * n);
          double* dst = ga.data() + (batch_a == 1 ? 0 : bi * m * k);
          detail::gemm_a_bt(g + bi * m * n, bbuf, dst, m, n, k);  // dA += dC * B^T
        }
        detail::accumulate_grad(*an, ga);
      }
      if (bn->requires_grad) {
        std::vector<double> gb(bn->data.size(), 0.0);
        for (int64_t bi = 0; bi < batch; ++bi) {
          const double* abuf = an->data.data() + (batch_a == 1 ? 0 : bi * m * k);
          double* dst = gb.data() + (batch_b == 1 ? 0 : bi * k * n);
          detail::gemm_at_b(abuf, g + bi * m * n, dst, k, m, n);  // dB += A^T * dC
        }
        detail::accumulate_grad(*bn, gb);
      }
    };
  }
  return Tensor::wrap(res);
}

}  // namespace atdgnn
