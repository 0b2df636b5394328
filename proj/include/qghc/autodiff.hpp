#pragma once

// Reverse-mode differentiation over an eagerly recorded graph. A Var is a
// shared handle to a Node; ops build new Nodes whose backward closures push
// gradients into their parents. Parameters are just long-lived leaf Nodes, so
// the same machinery differentiates through kernels that are themselves the
// output of upstream ops.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qghc/tensor.hpp"

namespace qghc {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  const char* op = "leaf";

  void accumulate(const Tensor<T>& g) {
    if (g.shape() != value.shape())
      throw ShapeError(std::string("gradient shape mismatch in ") + op + ": " + shape_str(g.shape()) +
                       " vs " + shape_str(value.shape()));
    if (grad.empty()) {
      grad = g;
      return;
    }
    auto dst = grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Zero-initialised gradient buffer, for backward rules that scatter.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }

  bool parent_needs_grad(std::size_t i) const { return i < parents.size() && parents[i]->requires_grad; }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }
  static Var leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient after backward; zeros when the node did not reach the loss.
  Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates the result node of an op. Parents and the backward rule are only
// retained when recording is enabled and some parent needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& parents,
                   std::function<void(Node<T>&)> backward_fn, const char* op) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(n));
}

// Runs reverse accumulation from a scalar loss. Gradients of leaves add up
// across calls until zero_grad().
template <class T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Tensor<T>::ones(loss.shape()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed.
  for (Node<T>* n : order)
    if (!n->parents.empty()) n->grad = Tensor<T>();
}

// ---------------------------------------------------------------------------
// Parameters

// `untagged` exists so foreign code can register a tensor without deciding;
// the parameter audit rejects it.
enum class Role { qd_predictor, qi_free, untagged };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::qd_predictor: return "QD";
    case Role::qi_free: return "QI";
    case Role::untagged: return "untagged";
  }
  return "?";
}

template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
  Role role;
};

// Non-trainable state that still belongs in a checkpoint (BN running stats).
template <class T>
struct Buffer {
  std::string name;
  Var<T> var;
};

// Owns every named tensor of a model. Handles stay valid for the registry's
// lifetime because the Nodes are heap allocated.
template <class T>
class Registry {
 public:
  Var<T> add_parameter(const std::string& name, Tensor<T> value, Role role) {
    claim(name);
    auto v = Var<T>::leaf(std::move(value));
    params_.push_back({name, v, role});
    return v;
  }

  Var<T> add_buffer(const std::string& name, Tensor<T> value) {
    claim(name);
    auto v = Var<T>::constant(std::move(value));
    buffers_.push_back({name, v});
    return v;
  }

  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  const std::vector<Buffer<T>>& buffers() const noexcept { return buffers_; }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.numel();
    return n;
  }

 private:
  void claim(const std::string& name) {
    if (!names_.insert(name).second) throw ConfigError("duplicate parameter name: " + name);
  }

  std::vector<Parameter<T>> params_;
  std::vector<Buffer<T>> buffers_;
  std::unordered_set<std::string> names_;
};

// ---------------------------------------------------------------------------
// Differentiable elementwise / linear algebra ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return make_result<T>(
      add(a.value(), b.value()), {a, b},
      [](Node<T>& self) {
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(self.grad);
        if (self.parent_needs_grad(1)) self.parents[1]->accumulate(self.grad);
      },
      "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return make_result<T>(
      add(a.value(), scale(b.value(), T{-1})), {a, b},
      [](Node<T>& self) {
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(self.grad);
        if (self.parent_needs_grad(1)) self.parents[1]->accumulate(scale(self.grad, T{-1}));
      },
      "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return make_result<T>(
      mul(a.value(), b.value()), {a, b},
      [](Node<T>& self) {
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(mul(self.grad, self.parents[1]->value));
        if (self.parent_needs_grad(1)) self.parents[1]->accumulate(mul(self.grad, self.parents[0]->value));
      },
      "mul");
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>(
      scale(a.value(), s), {a},
      [s](Node<T>& self) { self.parents[0]->accumulate(scale(self.grad, s)); }, "scale");
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return make_result<T>(
      relu(a.value()), {a},
      [](Node<T>& self) {
        const auto& x = self.parents[0]->value;
        Tensor<T> g(x.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = x[i] > T{0} ? self.grad[i] : T{0};
        self.parents[0]->accumulate(g);
      },
      "relu");
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = T{1} / (T{1} + std::exp(-a.value()[i]));
  return make_result<T>(
      y, {a},
      [](Node<T>& self) {
        Tensor<T> g(self.value.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * self.value[i] * (T{1} - self.value[i]);
        self.parents[0]->accumulate(g);
      },
      "sigmoid");
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(a.value()[i]);
  return make_result<T>(
      y, {a},
      [](Node<T>& self) {
        Tensor<T> g(self.value.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * (T{1} - self.value[i] * self.value[i]);
        self.parents[0]->accumulate(g);
      },
      "tanh");
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return make_result<T>(
      matmul(a.value(), b.value()), {a, b},
      [](Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        if (self.parent_needs_grad(0)) self.parents[0]->accumulate(matmul(self.grad, transpose2d(B)));
        if (self.parent_needs_grad(1)) self.parents[1]->accumulate(matmul(transpose2d(A), self.grad));
      },
      "matmul");
}

template <class T>
Var<T> reduce(const Var<T>& a, const std::vector<std::size_t>& axes, Reduce kind) {
  Shape out_shape;
  std::size_t group = 0;
  auto map = std::make_shared<std::vector<std::size_t>>(detail::reduce_index_map(a.shape(), axes, out_shape, group));
  Tensor<T> out = reduce(a.value(), axes, kind);
  return make_result<T>(
      out, {a},
      [map, group, kind](Node<T>& self) {
        const auto& x = self.parents[0]->value;
        Tensor<T> g(x.shape());
        if (kind == Reduce::max) {
          // Ties route the gradient to the first maximiser.
          std::vector<bool> taken(self.value.numel(), false);
          for (std::size_t i = 0; i < x.numel(); ++i) {
            const auto o = (*map)[i];
            if (!taken[o] && x[i] == self.value[o]) {
              g[i] = self.grad[o];
              taken[o] = true;
            }
          }
        } else {
          const T f = kind == Reduce::mean ? T{1} / static_cast<T>(group) : T{1};
          for (std::size_t i = 0; i < x.numel(); ++i) g[i] = self.grad[(*map)[i]] * f;
        }
        self.parents[0]->accumulate(g);
      },
      kind == Reduce::max ? "reduce_max" : (kind == Reduce::mean ? "reduce_mean" : "reduce_sum"));
}

template <class T>
Var<T> sum(const Var<T>& a) {
  return reduce(a, all_axes(a.value()), Reduce::sum);
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return reduce(a, all_axes(a.value()), Reduce::mean);
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  return make_result<T>(
      a.value().reshape(std::move(s)), {a},
      [](Node<T>& self) { self.parents[0]->accumulate(self.grad.reshape(self.parents[0]->value.shape())); },
      "reshape");
}

// Concatenates along `axis`; all other extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw ShapeError("concat: extent mismatch");
    widths.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    const std::size_t w = widths[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data().data() + o * w, w, out.data().data() + o * total * inner + off);
    off += w;
  }
  return make_result<T>(
      out, parts,
      [widths, outer, inner, total](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t w = widths[k] * inner;
          if (self.parent_needs_grad(k)) {
            Tensor<T> g(self.parents[k]->value.shape());
            for (std::size_t o = 0; o < outer; ++o)
              std::copy_n(self.grad.data().data() + o * total * inner + off, w, g.data().data() + o * w);
            self.parents[k]->accumulate(g);
          }
          off += w;
        }
      },
      "concat");
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}

}  // namespace qghc
