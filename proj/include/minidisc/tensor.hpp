#pragma once

// Reverse-mode autodiff over dense row-major arrays. A TensorT<T> is a
// handle to a graph node; ops build new nodes linked to their inputs and
// register a local gradient rule. backward() replays the rules in exact
// reverse topological order (creation order is topological by
// construction, but the order is re-derived from the loss each time so
// partial graphs work too).
//
// Storage is float in normal use; the whole op set is templated so the
// gradient checker can instantiate the identical rules in double.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace minidisc {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace detail {
[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}
inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}
}  // namespace detail

template <class T>
struct NodeT {
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::shared_ptr<std::vector<T>> grad;  // null until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  std::function<void(NodeT<T>&)> backprop;  // reads *grad, accumulates into parents
  const char* op = "leaf";

  size_t numel() const { return shape_numel(shape); }
  std::vector<T>& ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
    return *grad;
  }
};

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    detail::require(shape_numel(shape) == data.size(),
                    "tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->value = std::make_shared<std::vector<T>>(std::move(data));
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), T(0));
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static TensorT full(Shape shape, T v) {
    std::vector<T> d(shape_numel(shape), v);
    return from_data(std::move(shape), std::move(d), false);
  }

  static TensorT scalar(T v) { return from_data(Shape{}, {v}, false); }

  // A leaf bound to external storage (model parameters). Gradients
  // accumulate into `grad` across backward calls until the owner clears it.
  static TensorT leaf(Shape shape, std::shared_ptr<std::vector<T>> value,
                      std::shared_ptr<std::vector<T>> grad, bool requires_grad) {
    detail::require(value && shape_numel(shape) == value->size(),
                    "leaf buffer does not match shape " + shape_str(shape));
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->grad = std::move(grad);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  size_t rank() const { return n_->shape.size(); }
  size_t numel() const { return n_->numel(); }
  bool requires_grad() const { return n_->requires_grad; }

  std::vector<T>& data() { return *n_->value; }
  const std::vector<T>& data() const { return *n_->value; }

  bool has_grad() const { return static_cast<bool>(n_->grad); }
  const std::vector<T>& grad() const {
    detail::require(has_grad(), "tensor has no gradient buffer");
    return *n_->grad;
  }

  T item() const {
    detail::require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return (*n_->value)[0];
  }

  // Same value buffer, no graph history.
  TensorT detach() const {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    n->op = "detach";
    return TensorT(std::move(n));
  }

  std::shared_ptr<NodeT<T>> node() const { return n_; }

  explicit TensorT(std::shared_ptr<NodeT<T>> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<NodeT<T>> n_;
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// graph
// ---------------------------------------------------------------------------

// Topologically ordered op records reachable from a root. `seed` is carried
// for stochastic ops; none of the registered ops draw randomness.
template <class T>
struct GraphT {
  std::vector<std::shared_ptr<NodeT<T>>> order;  // parents before children
  uint64_t seed = 0;

  static GraphT trace(const TensorT<T>& root) {
    GraphT g;
    std::unordered_set<const NodeT<T>*> seen;
    // iterative post-order DFS
    struct Frame {
      std::shared_ptr<NodeT<T>> node;
      size_t next_parent = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        auto p = f.node->parents[f.next_parent++];
        if (seen.insert(p.get()).second) stack.push_back({std::move(p), 0});
      } else {
        g.order.push_back(f.node);
        stack.pop_back();
      }
    }
    return g;
  }
};

// Populate grads of every requires_grad leaf reachable from a scalar loss.
template <class T>
inline void backward(const TensorT<T>& loss) {
  detail::require(loss.numel() == 1,
                  "backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  auto g = GraphT<T>::trace(loss);
  // fresh gradient buffers for interior nodes; leaves keep accumulating
  for (auto& n : g.order) {
    if (!n->parents.empty()) n->grad = nullptr;
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    NodeT<T>& n = **it;
    if (n.backprop && n.grad) n.backprop(n);
  }
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
bool track(std::initializer_list<const TensorT<T>*> inputs) {
  for (auto* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

template <class T>
TensorT<T> make_op(const char* name, Shape shape, std::vector<T> value,
                   std::vector<TensorT<T>> inputs,
                   std::function<void(NodeT<T>&)> backprop) {
  auto n = std::make_shared<NodeT<T>>();
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<T>>(std::move(value));
  n->op = name;
  bool rg = false;
  for (auto& t : inputs) rg = rg || t.requires_grad();
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return TensorT<T>(std::move(n));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>("add", a.shape(), std::move(out), {a, b}, [an, bn](NodeT<T>& n) {
    const auto& g = *n.grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

// x + b where b's shape is a trailing suffix of x's shape (bias add).
template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b) {
  detail::require(b.rank() <= x.rank(), "add_bias: bias rank exceeds input rank");
  size_t off = x.rank() - b.rank();
  for (size_t i = 0; i < b.rank(); ++i)
    detail::require(x.shape()[off + i] == b.shape()[i],
                    "add_bias: suffix mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(b.shape()));
  size_t inner = b.numel();
  size_t outer = x.numel() / std::max<size_t>(inner, 1);
  detail::require(inner > 0, "add_bias: empty bias");
  const auto& xv = x.data();
  const auto& bv = b.data();
  std::vector<T> out(xv.size());
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] + bv[i];
  auto xn = x.node(), bn = b.node();
  return detail::make_op<T>("add_bias", x.shape(), std::move(out), {x, b},
                            [xn, bn, outer, inner](NodeT<T>& n) {
                              const auto& g = *n.grad;
                              if (xn->requires_grad) {
                                auto& gx = xn->ensure_grad();
                                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                              }
                              if (bn->requires_grad) {
                                auto& gb = bn->ensure_grad();
                                for (size_t o = 0; o < outer; ++o)
                                  for (size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
                              }
                            });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  auto aval = a.node()->value, bval = b.node()->value;
  return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b},
                            [an, bn, aval, bval](NodeT<T>& n) {
                              const auto& g = *n.grad;
                              if (an->requires_grad) {
                                auto& ga = an->ensure_grad();
                                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bval)[i];
                              }
                              if (bn->requires_grad) {
                                auto& gb = bn->ensure_grad();
                                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*aval)[i];
                              }
                            });
}

// Multiply x by vector v along `axis` (gating op; one scale per slice).
template <class T>
TensorT<T> mul_axis(const TensorT<T>& x, const TensorT<T>& v, size_t axis) {
  detail::require(axis < x.rank(), "mul_axis: axis out of range");
  detail::require(v.rank() == 1 && v.shape()[0] == x.shape()[axis],
                  "mul_axis: vector " + shape_str(v.shape()) + " does not match axis " +
                      std::to_string(axis) + " of " + shape_str(x.shape()));
  size_t k = x.shape()[axis];
  size_t inner = 1;
  for (size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  size_t outer = x.numel() / (k * inner);
  const auto& xv = x.data();
  const auto& vv = v.data();
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  std::vector<T> out(xv.size());
  if (inner == 1) {
    Eigen::Map<const Arr> V(vv.data(), static_cast<Eigen::Index>(k));
    for (size_t o = 0; o < outer; ++o) {
      Eigen::Map<const Arr> X(xv.data() + o * k, static_cast<Eigen::Index>(k));
      Eigen::Map<Arr> O(out.data() + o * k, static_cast<Eigen::Index>(k));
      O = X * V;
    }
  } else {
    for (size_t o = 0; o < outer; ++o)
      for (size_t i = 0; i < k; ++i) {
        size_t base = (o * k + i) * inner;
        T s = vv[i];
        for (size_t j = 0; j < inner; ++j) out[base + j] = xv[base + j] * s;
      }
  }
  auto xn = x.node(), vn = v.node();
  auto xval = x.node()->value, vval = v.node()->value;
  return detail::make_op<T>(
      "mul_axis", x.shape(), std::move(out), {x, v},
      [xn, vn, xval, vval, outer, k, inner](NodeT<T>& n) {
        const auto& g = *n.grad;
        if (xn->requires_grad) {
          auto& gx = xn->ensure_grad();
          if (inner == 1) {
            Eigen::Map<const Arr> V(vval->data(), static_cast<Eigen::Index>(k));
            for (size_t o = 0; o < outer; ++o) {
              Eigen::Map<const Arr> G(g.data() + o * k, static_cast<Eigen::Index>(k));
              Eigen::Map<Arr> GX(gx.data() + o * k, static_cast<Eigen::Index>(k));
              GX += G * V;
            }
          } else {
            for (size_t o = 0; o < outer; ++o)
              for (size_t i = 0; i < k; ++i) {
                size_t base = (o * k + i) * inner;
                T s = (*vval)[i];
                for (size_t j = 0; j < inner; ++j) gx[base + j] += g[base + j] * s;
              }
          }
        }
        if (vn->requires_grad) {
          auto& gv = vn->ensure_grad();
          if (inner == 1) {
            Eigen::Map<Arr> GV(gv.data(), static_cast<Eigen::Index>(k));
            for (size_t o = 0; o < outer; ++o) {
              Eigen::Map<const Arr> G(g.data() + o * k, static_cast<Eigen::Index>(k));
              Eigen::Map<const Arr> X(xval->data() + o * k, static_cast<Eigen::Index>(k));
              GV += G * X;
            }
          } else {
            for (size_t o = 0; o < outer; ++o)
              for (size_t i = 0; i < k; ++i) {
                size_t base = (o * k + i) * inner;
                T acc = 0;
                for (size_t j = 0; j < inner; ++j) acc += g[base + j] * (*xval)[base + j];
                gv[i] += acc;
              }
          }
        }
      });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
  auto xn = x.node();
  return detail::make_op<T>("scale", x.shape(), std::move(out), {x}, [xn, c](NodeT<T>& n) {
    if (!xn->requires_grad) return;
    const auto& g = *n.grad;
    auto& gx = xn->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
  });
}

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto n = std::make_shared<NodeT<T>>();
  n->shape = std::move(shape);
  n->value = x.node()->value;  // shared buffer, no copy
  n->op = "reshape";
  if (x.requires_grad()) {
    auto xn = x.node();
    n->requires_grad = true;
    n->parents = {xn};
    n->backprop = [xn](NodeT<T>& self) {
      const auto& g = *self.grad;
      auto& gx = xn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  }
  return TensorT<T>(std::move(n));
}

namespace detail {
inline std::vector<size_t> strides_of(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}
}  // namespace detail

namespace detail {

// Extents of the output and, per output axis, the matching input stride;
// padded with leading singleton axes to exactly four dims so the copy loops
// below stay flat and vectorizable.
struct PermPlan {
  size_t ext[4] = {1, 1, 1, 1};
  size_t str[4] = {0, 0, 0, 0};
};

inline PermPlan permute_plan(const Shape& in_shape, const Shape& out_shape,
                             const std::vector<size_t>& perm) {
  PermPlan p;
  auto in_strides = strides_of(in_shape);
  size_t pad = 4 - out_shape.size();
  for (size_t d = 0; d < out_shape.size(); ++d) {
    p.ext[pad + d] = out_shape[d];
    p.str[pad + d] = in_strides[perm[d]];
  }
  return p;
}

}  // namespace detail

// General axis permutation (rank <= 4); gradient applies the inverse
// permutation by walking the same plan.
template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<size_t>& perm) {
  detail::require(perm.size() == x.rank(), "permute: perm rank mismatch");
  detail::require(x.rank() <= 4, "permute: rank > 4 not supported");
  std::vector<bool> used(perm.size(), false);
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    detail::require(perm[i] < perm.size() && !used[perm[i]], "permute: invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
  }
  auto plan = detail::permute_plan(x.shape(), out_shape, perm);
  const auto& xv = x.data();
  std::vector<T> out(x.numel());
  {
    T* o = out.data();
    const T* src = xv.data();
    for (size_t i0 = 0; i0 < plan.ext[0]; ++i0)
      for (size_t i1 = 0; i1 < plan.ext[1]; ++i1)
        for (size_t i2 = 0; i2 < plan.ext[2]; ++i2) {
          const T* base = src + i0 * plan.str[0] + i1 * plan.str[1] + i2 * plan.str[2];
          size_t s3 = plan.str[3];
          for (size_t i3 = 0; i3 < plan.ext[3]; ++i3) *o++ = base[i3 * s3];
        }
  }
  auto xn = x.node();
  return detail::make_op<T>("permute", out_shape, std::move(out), {x},
                            [xn, plan](NodeT<T>& self) {
                              if (!xn->requires_grad) return;
                              const T* g = self.grad->data();
                              auto& gx = xn->ensure_grad();
                              T* dst = gx.data();
                              for (size_t i0 = 0; i0 < plan.ext[0]; ++i0)
                                for (size_t i1 = 0; i1 < plan.ext[1]; ++i1)
                                  for (size_t i2 = 0; i2 < plan.ext[2]; ++i2) {
                                    T* base = dst + i0 * plan.str[0] + i1 * plan.str[1] +
                                              i2 * plan.str[2];
                                    size_t s3 = plan.str[3];
                                    for (size_t i3 = 0; i3 < plan.ext[3]; ++i3)
                                      base[i3 * s3] += *g++;
                                  }
                            });
}

template <class T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
  detail::require(x.rank() >= 2, "transpose_last2: rank < 2");
  std::vector<size_t> perm(x.rank());
  for (size_t i = 0; i < x.rank(); ++i) perm[i] = i;
  std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
  return permute(x, perm);
}

// (B, L, D) -> (B, H, L, D/H): split the channel axis into heads.
template <class T>
TensorT<T> split_heads(const TensorT<T>& x, size_t heads) {
  detail::require(x.rank() == 3, "split_heads: expected rank-3 input");
  size_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
  detail::require(heads > 0 && d % heads == 0,
                  "split_heads: channel dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  return permute(reshape(x, {b, l, heads, d / heads}), {0, 2, 1, 3});
}

// (B, H, L, Dh) -> (B, L, H*Dh): concat heads back onto the channel axis.
template <class T>
TensorT<T> merge_heads(const TensorT<T>& x) {
  detail::require(x.rank() == 4, "merge_heads: expected rank-4 input");
  size_t b = x.shape()[0], h = x.shape()[1], l = x.shape()[2], dh = x.shape()[3];
  return reshape(permute(x, {0, 2, 1, 3}), {b, l, h * dh});
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// C = A . B over the last two axes. Either B is rank-2 (applied to every
// leading slice of A), or A and B have identical leading dims (batched).
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must have rank >= 2");
  size_t am = a.shape()[a.rank() - 2], ak = a.shape()[a.rank() - 1];
  size_t bk = b.shape()[b.rank() - 2], bn = b.shape()[b.rank() - 1];
  detail::require(ak == bk, "matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  bool b_is_weight = (b.rank() == 2);
  if (!b_is_weight) {
    detail::require(a.rank() == b.rank(), "matmul: rank mismatch for batched operands");
    for (size_t i = 0; i + 2 < a.rank(); ++i)
      detail::require(a.shape()[i] == b.shape()[i],
                      "matmul: batch dims differ, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  }
  size_t batch = 1;
  for (size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.shape()[i];
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(bn);

  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(batch * am * bn);
  using CM = detail::ConstMatMap<T>;
  using MM = detail::MatMap<T>;
  if (b_is_weight) {
    CM A(av.data(), static_cast<Eigen::Index>(batch * am), static_cast<Eigen::Index>(ak));
    CM B(bv.data(), static_cast<Eigen::Index>(ak), static_cast<Eigen::Index>(bn));
    MM C(out.data(), static_cast<Eigen::Index>(batch * am), static_cast<Eigen::Index>(bn));
    C.noalias() = A * B;
  } else {
    for (size_t s = 0; s < batch; ++s) {
      CM A(av.data() + s * am * ak, static_cast<Eigen::Index>(am), static_cast<Eigen::Index>(ak));
      CM B(bv.data() + s * ak * bn, static_cast<Eigen::Index>(ak), static_cast<Eigen::Index>(bn));
      MM C(out.data() + s * am * bn, static_cast<Eigen::Index>(am), static_cast<Eigen::Index>(bn));
      C.noalias() = A * B;
    }
  }

  auto an = a.node(), bnn = b.node();
  auto aval = a.node()->value, bval = b.node()->value;
  return detail::make_op<T>(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [an, bnn, aval, bval, batch, am, ak, bn, b_is_weight](NodeT<T>& self) {
        const auto& g = *self.grad;
        if (an->requires_grad) {
          auto& ga = an->ensure_grad();
          if (b_is_weight) {
            CM G(g.data(), static_cast<Eigen::Index>(batch * am), static_cast<Eigen::Index>(bn));
            CM B(bval->data(), static_cast<Eigen::Index>(ak), static_cast<Eigen::Index>(bn));
            MM GA(ga.data(), static_cast<Eigen::Index>(batch * am), static_cast<Eigen::Index>(ak));
            GA.noalias() += G * B.transpose();
          } else {
            for (size_t s = 0; s < batch; ++s) {
              CM G(g.data() + s * am * bn, static_cast<Eigen::Index>(am),
                   static_cast<Eigen::Index>(bn));
              CM B(bval->data() + s * ak * bn, static_cast<Eigen::Index>(ak),
                   static_cast<Eigen::Index>(bn));
              MM GA(ga.data() + s * am * ak, static_cast<Eigen::Index>(am),
                    static_cast<Eigen::Index>(ak));
              GA.noalias() += G * B.transpose();
            }
          }
        }
        if (bnn->requires_grad) {
          auto& gb = bnn->ensure_grad();
          if (b_is_weight) {
            CM A(aval->data(), static_cast<Eigen::Index>(batch * am),
                 static_cast<Eigen::Index>(ak));
            CM G(g.data(), static_cast<Eigen::Index>(batch * am), static_cast<Eigen::Index>(bn));
            MM GB(gb.data(), static_cast<Eigen::Index>(ak), static_cast<Eigen::Index>(bn));
            GB.noalias() += A.transpose() * G;
          } else {
            for (size_t s = 0; s < batch; ++s) {
              CM A(aval->data() + s * am * ak, static_cast<Eigen::Index>(am),
                   static_cast<Eigen::Index>(ak));
              CM G(g.data() + s * am * bn, static_cast<Eigen::Index>(am),
                   static_cast<Eigen::Index>(bn));
              MM GB(gb.data() + s * ak * bn, static_cast<Eigen::Index>(ak),
                    static_cast<Eigen::Index>(bn));
              GB.noalias() += A.transpose() * G;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
  detail::require(x.rank() >= 1, "softmax: rank-0 input");
  size_t d = x.shape().back();
  detail::require(d > 0, "softmax over empty axis");
  size_t rows = x.numel() / d;
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T* o = out.data() + r * d;
    T mx = row[0];
    for (size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    for (size_t i = 0; i < d; ++i) o[i] = row[i] - mx;
  }
  {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<Arr> O(out.data(), static_cast<Eigen::Index>(out.size()));
    O = O.exp();
  }
  for (size_t r = 0; r < rows; ++r) {
    T* o = out.data() + r * d;
    T sum = 0;
    for (size_t i = 0; i < d; ++i) sum += o[i];
    T inv = T(1) / sum;
    for (size_t i = 0; i < d; ++i) o[i] *= inv;
  }
  auto xn = x.node();
  return detail::make_op<T>("softmax", x.shape(), std::move(out), {x},
                            [xn, rows, d](NodeT<T>& self) {
                              if (!xn->requires_grad) return;
                              const auto& g = *self.grad;
                              const auto& yv = *self.value;
                              auto& gx = xn->ensure_grad();
                              for (size_t r = 0; r < rows; ++r) {
                                const T* y = yv.data() + r * d;
                                const T* go = g.data() + r * d;
                                T dot = 0;
                                for (size_t i = 0; i < d; ++i) dot += go[i] * y[i];
                                for (size_t i = 0; i < d; ++i)
                                  gx[r * d + i] += y[i] * (go[i] - dot);
                              }
                            });
}

// Layer norm over the last axis with learned gain/shift.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
  size_t d = x.shape().back();
  detail::require(gamma.rank() == 1 && gamma.shape()[0] == d && beta.rank() == 1 &&
                      beta.shape()[0] == d,
                  "layer_norm: gain/shift must be rank-1 of size " + std::to_string(d));
  size_t rows = x.numel() / d;
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = 0;
    for (size_t i = 0; i < d; ++i) mean += row[i];
    mean /= T(d);
    T var = 0;
    for (size_t i = 0; i < d; ++i) {
      T c = row[i] - mean;
      var += c * c;
    }
    var /= T(d);
    T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (size_t i = 0; i < d; ++i) {
      T h = (row[i] - mean) * inv;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = gv[i] * h + bv[i];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto gval = gamma.node()->value;
  return detail::make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, gval, xhat, inv_std, rows, d](NodeT<T>& self) {
        const auto& g = *self.grad;
        if (bn->requires_grad) {
          auto& gb = bn->ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
        if (gn->requires_grad) {
          auto& gg = gn->ensure_grad();
          for (size_t r = 0; r < rows; ++r)
            for (size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * (*xhat)[r * d + i];
        }
        if (xn->requires_grad) {
          auto& gx = xn->ensure_grad();
          for (size_t r = 0; r < rows; ++r) {
            const T* go = g.data() + r * d;
            const T* h = xhat->data() + r * d;
            T m1 = 0, m2 = 0;
            for (size_t i = 0; i < d; ++i) {
              T dh = go[i] * (*gval)[i];
              m1 += dh;
              m2 += dh * h[i];
            }
            m1 /= T(d);
            m2 /= T(d);
            T inv = (*inv_std)[r];
            for (size_t i = 0; i < d; ++i) {
              T dh = go[i] * (*gval)[i];
              gx[r * d + i] += (dh - m1 - h[i] * m2) * inv;
            }
          }
        }
      });
}

// Tanh formulation: 0.5 x (1 + tanh(c (x + a x^3))). The tape stores the
// tanh values so backward reuses them.
template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr T kC = T(0.7978845608028653559);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto& xv = x.data();
  auto n = static_cast<Eigen::Index>(xv.size());
  auto tanh_vals = std::make_shared<std::vector<T>>(xv.size());
  std::vector<T> out(xv.size());
  {
    Eigen::Map<const Arr> X(xv.data(), n);
    Eigen::Map<Arr> Th(tanh_vals->data(), n);
    Eigen::Map<Arr> O(out.data(), n);
    // tanh via exp (vectorized); the clamp only bites where tanh saturates
    Th = (T(-2) * (kC * (X + kA * X.cube())).cwiseMax(T(-15)).cwiseMin(T(15))).exp();
    Th = (T(1) - Th) / (T(1) + Th);
    O = T(0.5) * X * (T(1) + Th);
  }
  auto xn = x.node();
  auto xval = x.node()->value;
  return detail::make_op<T>(
      "gelu", x.shape(), std::move(out), {x}, [xn, xval, tanh_vals, n](NodeT<T>& self) {
        if (!xn->requires_grad) return;
        constexpr T kC = T(0.7978845608028653559);
        constexpr T kA = T(0.044715);
        using Arr2 = Eigen::Array<T, Eigen::Dynamic, 1>;
        Eigen::Map<const Arr2> G(self.grad->data(), n);
        Eigen::Map<const Arr2> X(xval->data(), n);
        Eigen::Map<const Arr2> Th(tanh_vals->data(), n);
        Eigen::Map<Arr2> GX(xn->ensure_grad().data(), n);
        // d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        GX += G * (T(0.5) * (T(1) + Th) +
                   T(0.5) * X * (T(1) - Th.square()) * kC * (T(1) + 3 * kA * X.square()));
      });
}

// ---------------------------------------------------------------------------
// lookup / pooling / padding
// ---------------------------------------------------------------------------

// table: (V, D), ids: batch*len indices -> (batch, len, D). Gradient
// scatter-adds rows back into the table.
template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int32_t>& ids, size_t batch,
                     size_t len) {
  detail::require(table.rank() == 2, "embedding: table must be rank-2");
  detail::require(ids.size() == batch * len, "embedding: ids length mismatch");
  size_t v = table.shape()[0], d = table.shape()[1];
  for (int32_t id : ids)
    detail::require(id >= 0 && static_cast<size_t>(id) < v,
                    "embedding: token id " + std::to_string(id) + " out of range [0," +
                        std::to_string(v) + ")");
  const auto& tv = table.data();
  std::vector<T> out(batch * len * d);
  for (size_t i = 0; i < ids.size(); ++i) {
    const T* src = tv.data() + static_cast<size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  auto tn = table.node();
  return detail::make_op<T>("embedding", {batch, len, d}, std::move(out), {table},
                            [tn, ids, d](NodeT<T>& self) {
                              if (!tn->requires_grad) return;
                              const auto& g = *self.grad;
                              auto& gt = tn->ensure_grad();
                              for (size_t i = 0; i < ids.size(); ++i) {
                                T* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
                                const T* src = g.data() + i * d;
                                for (size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                            });
}

// Mean over valid (non-padded) positions: (B, L, D) -> (B, D).
template <class T>
TensorT<T> mean_pool(const TensorT<T>& x, const std::vector<int32_t>& lengths) {
  detail::require(x.rank() == 3, "mean_pool: expected rank-3 input");
  size_t b = x.shape()[0], l = x.shape()[1], d = x.shape()[2];
  detail::require(lengths.size() == b, "mean_pool: lengths size mismatch");
  for (int32_t len : lengths)
    detail::require(len >= 1 && static_cast<size_t>(len) <= l,
                    "mean_pool: length " + std::to_string(len) + " outside [1," +
                        std::to_string(l) + "]");
  const auto& xv = x.data();
  std::vector<T> out(b * d, T(0));
  for (size_t i = 0; i < b; ++i) {
    size_t len = static_cast<size_t>(lengths[i]);
    for (size_t t = 0; t < len; ++t)
      for (size_t j = 0; j < d; ++j) out[i * d + j] += xv[(i * l + t) * d + j];
    T inv = T(1) / T(len);
    for (size_t j = 0; j < d; ++j) out[i * d + j] *= inv;
  }
  auto xn = x.node();
  return detail::make_op<T>("mean_pool", {b, d}, std::move(out), {x},
                            [xn, lengths, b, l, d](NodeT<T>& self) {
                              if (!xn->requires_grad) return;
                              const auto& g = *self.grad;
                              auto& gx = xn->ensure_grad();
                              for (size_t i = 0; i < b; ++i) {
                                size_t len = static_cast<size_t>(lengths[i]);
                                T inv = T(1) / T(len);
                                for (size_t t = 0; t < len; ++t)
                                  for (size_t j = 0; j < d; ++j)
                                    gx[(i * l + t) * d + j] += g[i * d + j] * inv;
                              }
                            });
}

// Additive -1e9 bias on padded key columns of attention scores
// (B, H, Lq, Lk); gradient passes through untouched.
template <class T>
TensorT<T> apply_key_padding(const TensorT<T>& scores, const std::vector<int32_t>& lengths) {
  detail::require(scores.rank() == 4, "apply_key_padding: expected rank-4 scores");
  size_t b = scores.shape()[0], h = scores.shape()[1], lq = scores.shape()[2],
         lk = scores.shape()[3];
  detail::require(lengths.size() == b, "apply_key_padding: lengths size mismatch");
  const auto& sv = scores.data();
  std::vector<T> out(sv);
  constexpr T kNegInf = T(-1e9);
  for (size_t i = 0; i < b; ++i) {
    size_t len = static_cast<size_t>(lengths[i]);
    if (len >= lk) continue;
    for (size_t hh = 0; hh < h; ++hh)
      for (size_t q = 0; q < lq; ++q) {
        T* row = out.data() + ((i * h + hh) * lq + q) * lk;
        for (size_t k = len; k < lk; ++k) row[k] += kNegInf;
      }
  }
  auto sn = scores.node();
  return detail::make_op<T>("key_padding", scores.shape(), std::move(out), {scores},
                            [sn](NodeT<T>& self) {
                              if (!sn->requires_grad) return;
                              const auto& g = *self.grad;
                              auto& gs = sn->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                            });
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  const auto& xv = x.data();
  T s = 0;
  for (T v : xv) s += v;
  auto xn = x.node();
  return detail::make_op<T>("sum", Shape{}, {s}, {x}, [xn](NodeT<T>& self) {
    if (!xn->requires_grad) return;
    T g = (*self.grad)[0];
    auto& gx = xn->ensure_grad();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum_all(x), T(1) / T(x.numel()));
}

// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
template <class T>
TensorT<T> loss_ce(const TensorT<T>& logits, const std::vector<int32_t>& labels) {
  detail::require(logits.rank() == 2, "loss_ce: logits must be (batch, classes)");
  size_t b = logits.shape()[0], c = logits.shape()[1];
  detail::require(labels.size() == b, "loss_ce: labels size mismatch");
  for (int32_t y : labels)
    detail::require(y >= 0 && static_cast<size_t>(y) < c,
                    "loss_ce: label " + std::to_string(y) + " out of range [0," +
                        std::to_string(c) + ")");
  const auto& lv = logits.data();
  auto probs = std::make_shared<std::vector<T>>(b * c);
  T loss = 0;
  for (size_t i = 0; i < b; ++i) {
    const T* row = lv.data() + i * c;
    T mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] = std::exp(row[j] - mx);
      sum += (*probs)[i * c + j];
    }
    T inv = T(1) / sum;
    for (size_t j = 0; j < c; ++j) (*probs)[i * c + j] *= inv;
    T lse = mx + std::log(sum);
    loss += lse - row[static_cast<size_t>(labels[i])];
  }
  loss /= T(b);
  auto ln = logits.node();
  return detail::make_op<T>("loss_ce", Shape{}, {loss}, {logits},
                            [ln, probs, labels, b, c](NodeT<T>& self) {
                              if (!ln->requires_grad) return;
                              T g = (*self.grad)[0] / T(b);
                              auto& gl = ln->ensure_grad();
                              for (size_t i = 0; i < b; ++i)
                                for (size_t j = 0; j < c; ++j) {
                                  T p = (*probs)[i * c + j];
                                  T y = (static_cast<size_t>(labels[i]) == j) ? T(1) : T(0);
                                  gl[i * c + j] += g * (p - y);
                                }
                            });
}

// Cross entropy against a fixed target distribution (soft labels). The
// target side never receives gradient.
template <class T>
TensorT<T> loss_soft_ce(const TensorT<T>& target_probs, const TensorT<T>& logits) {
  detail::require(logits.rank() == 2 && target_probs.shape() == logits.shape(),
                  "loss_soft_ce: shape mismatch " + shape_str(target_probs.shape()) + " vs " +
                      shape_str(logits.shape()));
  size_t b = logits.shape()[0], c = logits.shape()[1];
  const auto& pv = target_probs.data();
  for (size_t i = 0; i < b; ++i) {
    T s = 0;
    for (size_t j = 0; j < c; ++j) s += pv[i * c + j];
    detail::require(std::abs(double(s) - 1.0) <= 1e-4,
                    "loss_soft_ce: target row " + std::to_string(i) + " sums to " +
                        std::to_string(double(s)));
  }
  const auto& lv = logits.data();
  auto probs = std::make_shared<std::vector<T>>(b * c);
  T loss = 0;
  for (size_t i = 0; i < b; ++i) {
    const T* row = lv.data() + i * c;
    T mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] = std::exp(row[j] - mx);
      sum += (*probs)[i * c + j];
    }
    T inv = T(1) / sum;
    T lse = mx + std::log(sum);
    for (size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] *= inv;
      loss -= pv[i * c + j] * (row[j] - lse);
    }
  }
  loss /= T(b);
  auto ln = logits.node();
  auto pval = target_probs.node()->value;
  return detail::make_op<T>("loss_soft_ce", Shape{}, {loss}, {logits},
                            [ln, probs, pval, b, c](NodeT<T>& self) {
                              if (!ln->requires_grad) return;
                              T g = (*self.grad)[0] / T(b);
                              auto& gl = ln->ensure_grad();
                              for (size_t i = 0; i < b * c; ++i)
                                gl[i] += g * ((*probs)[i] - (*pval)[i]);
                            });
}

template <class T>
TensorT<T> loss_mse(const TensorT<T>& a, const TensorT<T>& b) {
  detail::require(a.shape() == b.shape(), "loss_mse: shape mismatch " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  size_t n = av.size();
  T loss = 0;
  for (size_t i = 0; i < n; ++i) {
    T d = av[i] - bv[i];
    loss += d * d;
  }
  loss /= T(n);
  auto an = a.node(), bn = b.node();
  auto aval = a.node()->value, bval = b.node()->value;
  return detail::make_op<T>("loss_mse", Shape{}, {loss}, {a, b},
                            [an, bn, aval, bval, n](NodeT<T>& self) {
                              T g = (*self.grad)[0] * T(2) / T(n);
                              if (an->requires_grad) {
                                auto& ga = an->ensure_grad();
                                for (size_t i = 0; i < n; ++i)
                                  ga[i] += g * ((*aval)[i] - (*bval)[i]);
                              }
                              if (bn->requires_grad) {
                                auto& gb = bn->ensure_grad();
                                for (size_t i = 0; i < n; ++i)
                                  gb[i] -= g * ((*aval)[i] - (*bval)[i]);
                              }
                            });
}

// Mean over rows of sum_j p_j (log p_j - log q_j). Both inputs are
// row-stochastic over the last axis; p is the target side and receives no
// gradient. q is clamped at eps before the log.
template <class T>
TensorT<T> loss_kl(const TensorT<T>& p_dist, const TensorT<T>& q_dist) {
  detail::require(p_dist.shape() == q_dist.shape(),
                  "loss_kl: shape mismatch " + shape_str(p_dist.shape()) + " vs " +
                      shape_str(q_dist.shape()));
  detail::require(p_dist.rank() >= 1, "loss_kl: rank-0 input");
  size_t d = p_dist.shape().back();
  size_t rows = p_dist.numel() / d;
  const auto& pv = p_dist.data();
  const auto& qv = q_dist.data();
  constexpr double kRowTol = 1e-5;
  for (size_t r = 0; r < rows; ++r) {
    double ps = 0, qs = 0;
    for (size_t j = 0; j < d; ++j) {
      ps += double(pv[r * d + j]);
      qs += double(qv[r * d + j]);
    }
    detail::require(std::abs(ps - 1.0) <= kRowTol && std::abs(qs - 1.0) <= kRowTol,
                    "loss_kl: row " + std::to_string(r) + " not normalized (p=" +
                        std::to_string(ps) + ", q=" + std::to_string(qs) + ")");
  }
  constexpr T kEps = T(1e-9);
  T loss = 0;
  for (size_t i = 0; i < pv.size(); ++i) {
    T p = pv[i];
    if (p > T(0)) {
      T q = std::max(qv[i], kEps);
      loss += p * (std::log(p) - std::log(q));
    }
  }
  loss /= T(rows);
  auto qn = q_dist.node();
  auto pval = p_dist.node()->value, qval = q_dist.node()->value;
  return detail::make_op<T>("loss_kl", Shape{}, {loss}, {q_dist},
                            [qn, pval, qval, rows](NodeT<T>& self) {
                              if (!qn->requires_grad) return;
                              T g = (*self.grad)[0] / T(rows);
                              auto& gq = qn->ensure_grad();
                              for (size_t i = 0; i < gq.size(); ++i) {
                                T p = (*pval)[i];
                                T q = (*qval)[i];
                                if (p > T(0) && q > kEps) gq[i] -= g * p / q;
                              }
                            });
}

}  // namespace minidisc
