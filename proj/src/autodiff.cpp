#include "tipnet/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "tipnet/error.hpp"

namespace tipnet::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMajor<T>>;
template <typename T>
using MapM = Eigen::Map<RowMajor<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericalError(std::string(op) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> backward) {
  check_finite(op, value);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->is_leaf = false;
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs_grad = needs_grad || (p && p->requires_grad);
  }
  if (needs_grad) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
bool wants(const NodePtr<T>& p) {
  return p && p->requires_grad;
}

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                     to_string(b));
  }
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(s));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream s;
  s << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) s << (i ? ", " : "") << shape[i];
  s << ')';
  return s.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ------------------------------------------------------------------ Tensor

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->op = "constant";
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, T fill) {
  const auto count = numel(shape);
  return constant(std::move(shape), std::vector<T>(count, fill));
}

template <typename T>
Tensor<T> Tensor<T>::variable(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->op = "variable";
  return t;
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("dim: axis out of range");
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not scalar");
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return constant(node_->shape, node_->value);
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) {
    throw ShapeError("backward: output of shape " + to_string(shape()) + " is not a scalar");
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    n->backward(*n);
    if (!n->is_leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op<T>("add", a.shape(), std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!wants(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
    if (wants(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (wants(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (wants(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("div", a.shape(), b.shape());
  std::vector<T> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_op<T>("div", a.shape(), std::move(out), {a.shared(), b.shared()}, [](Node<T>& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (wants(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->value[i];
    }
    if (wants(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] -= self.grad[i] * self.value[i] / pb->value[i];
      }
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += c;
  return make_op<T>("add_scalar", a.shape(), std::move(out), {a.shared()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= c;
  return make_op<T>("mul_scalar", a.shape(), std::move(out), {a.shared()}, [c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 1 || a.rank() < 1 || a.shape().back() != b.dim(0)) {
    throw ShapeError("add_rowvec: cannot broadcast " + to_string(b.shape()) + " over " +
                     to_string(a.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(b.dim(0));
  std::vector<T> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return make_op<T>("add_rowvec", a.shape(), std::move(out), {a.shared(), b.shared()},
                    [n](Node<T>& self) {
                      if (wants(self.parents[0])) {
                        auto& g = self.parents[0]->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                      }
                      if (wants(self.parents[1])) {
                        auto& g = self.parents[1]->grad_buffer();
                        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
                      }
                    });
}

// ----------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = ta ? ac : ar;
  const int k = ta ? ar : ac;
  const int kb = tb ? bc : br;
  const int n = tb ? br : bc;
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) +
                     (ta ? "^T" : "") + " x " + to_string(b.shape()) + (tb ? "^T" : ""));
  }
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  {
    MapC<T> A(a.values().data(), ar, ac);
    MapC<T> B(b.values().data(), br, bc);
    MapM<T> C(out.data(), m, n);
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  return make_op<T>("matmul", {m, n}, std::move(out), {a.shared(), b.shared()},
                    [ar, ac, br, bc, m, n, ta, tb](Node<T>& self) {
                      const auto& pa = self.parents[0];
                      const auto& pb = self.parents[1];
                      MapC<T> G(self.grad.data(), m, n);
                      MapC<T> A(pa->value.data(), ar, ac);
                      MapC<T> B(pb->value.data(), br, bc);
                      if (wants(pa)) {
                        MapM<T> dA(pa->grad_buffer().data(), ar, ac);
                        // d op(A) = G op(B)^T
                        if (!ta && !tb) dA.noalias() += G * B.transpose();
                        else if (!ta && tb) dA.noalias() += G * B;
                        else if (ta && !tb) dA.noalias() += B * G.transpose();
                        else dA.noalias() += B.transpose() * G.transpose();
                      }
                      if (wants(pb)) {
                        MapM<T> dB(pb->grad_buffer().data(), br, bc);
                        // d op(B) = op(A)^T G
                        if (!ta && !tb) dB.noalias() += A.transpose() * G;
                        else if (ta && !tb) dB.noalias() += A * G;
                        else if (!ta && tb) dB.noalias() += G.transpose() * A;
                        else dB.noalias() += G.transpose() * A.transpose();
                      }
                    });
}

// ------------------------------------------------------------ pointwise

template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F forward, D derivative) {
  std::vector<T> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(av[i]);
  return make_op<T>(op, a.shape(), std::move(out), {a.shared()},
                    [derivative](Node<T>& self) {
                      const auto& p = self.parents[0];
                      auto& g = p->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        g[i] += self.grad[i] * derivative(p->value[i], self.value[i]);
                      }
                    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary<T>(
      "leaky_relu", a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T v : a.values()) {
    if (v < T(0)) throw NumericalError("sqrt: negative input");
  }
  return unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary<T>(
      "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ------------------------------------------------------ softmax, layernorm

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("softmax: rank must be >= 1");
  const std::size_t n = static_cast<std::size_t>(a.shape().back());
  const std::size_t rows = a.size() / n;
  std::vector<T> out(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * n;
    T* y = out.data() + r * n;
    T peak = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = std::exp(x[i] - peak);
      total += y[i];
    }
    const T inv = static_cast<T>(1.0 / total);
    for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
  }
  return make_op<T>("softmax", a.shape(), std::move(out), {a.shared()}, [n, rows](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* gy = self.grad.data() + r * n;
      double dotp = 0.0;
      for (std::size_t i = 0; i < n; ++i) dotp += static_cast<double>(gy[i]) * y[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (gy[i] - static_cast<T>(dotp));
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (a.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
  const std::size_t n = static_cast<std::size_t>(a.shape().back());
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm: gain/bias length must equal the last axis " + std::to_string(n));
  }
  const std::size_t rows = a.size() / n;
  std::vector<T> out(a.size());
  auto xhat = std::make_shared<std::vector<T>>(a.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const auto av = a.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = static_cast<T>(is);
    for (std::size_t i = 0; i < n; ++i) {
      const T xh = static_cast<T>((x[i] - mu) * is);
      (*xhat)[r * n + i] = xh;
      out[r * n + i] = xh * gv[i] + bv[i];
    }
  }
  return make_op<T>(
      "layer_norm", a.shape(), std::move(out), {a.shared(), gain.shared(), bias.shared()},
      [n, rows, xhat, inv_std](Node<T>& self) {
        const auto& pa = self.parents[0];
        const auto& pg = self.parents[1];
        const auto& pb = self.parents[2];
        if (wants(pg)) {
          auto& g = pg->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[r * n + i] * (*xhat)[r * n + i];
        }
        if (wants(pb)) {
          auto& g = pb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[r * n + i];
        }
        if (wants(pa)) {
          auto& g = pa->grad_buffer();
          const auto& gain_v = pg->value;
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const double d = static_cast<double>(self.grad[r * n + i]) * gain_v[i];
              mean_d += d;
              mean_dx += d * (*xhat)[r * n + i];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
              const double d = static_cast<double>(self.grad[r * n + i]) * gain_v[i];
              g[r * n + i] += static_cast<T>((*inv_std)[r] *
                                             (d - mean_d - (*xhat)[r * n + i] * mean_dx));
            }
          }
        }
      });
}

// ------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double total = 0.0;
  for (T v : a.values()) total += v;
  return make_op<T>("sum", {1}, {static_cast<T>(total)}, {a.shared()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T s = self.grad[0];
    for (auto& v : g) v += s;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  double total = 0.0;
  for (T v : a.values()) total += v;
  const double inv_n = 1.0 / static_cast<double>(a.size());
  return make_op<T>("mean", {1}, {static_cast<T>(total * inv_n)}, {a.shared()},
                    [inv_n](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      const T s = static_cast<T>(self.grad[0] * inv_n);
                      for (auto& v : g) v += s;
                    });
}

// ------------------------------------------------------------ structural

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[i]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) {
    r.inner *= static_cast<std::size_t>(s[i]);
  }
  return r;
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

}  // namespace

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  axis = normalize_axis(axis, static_cast<int>(ref.size()), "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != ref[i]) {
        throw ShapeError("concat: shape mismatch " + to_string(s) + " vs " + to_string(ref));
      }
    }
    widths.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_at(ref, axis);
  const std::size_t total = static_cast<std::size_t>(out_shape[axis]);
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  std::vector<NodePtr<T>> parents;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    const std::size_t block = static_cast<std::size_t>(widths[k]) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(v.data() + o * block, block, out.data() + (o * total + offset) * sp.inner);
    }
    offset += static_cast<std::size_t>(widths[k]);
    parents.push_back(parts[k].shared());
  }
  return make_op<T>("concat", out_shape, std::move(out), std::move(parents),
                    [widths, sp, total](Node<T>& self) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < self.parents.size(); ++k) {
                        const std::size_t block = static_cast<std::size_t>(widths[k]) * sp.inner;
                        if (wants(self.parents[k])) {
                          auto& g = self.parents[k]->grad_buffer();
                          for (std::size_t o = 0; o < sp.outer; ++o) {
                            const T* src = self.grad.data() + (o * total + off) * sp.inner;
                            T* dst = g.data() + o * block;
                            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                          }
                        }
                        off += static_cast<std::size_t>(widths[k]);
                      }
                    });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, int axis, int start, int length) {
  axis = normalize_axis(axis, a.rank(), "narrow");
  const int extent = a.shape()[axis];
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis of length " +
                     std::to_string(extent));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const AxisSplit sp = split_at(a.shape(), axis);
  const std::size_t src_stride = static_cast<std::size_t>(extent) * sp.inner;
  const std::size_t block = static_cast<std::size_t>(length) * sp.inner;
  const std::size_t first = static_cast<std::size_t>(start) * sp.inner;
  std::vector<T> out(numel(out_shape));
  const auto v = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(v.data() + o * src_stride + first, block, out.data() + o * block);
  }
  return make_op<T>("narrow", out_shape, std::move(out), {a.shared()},
                    [sp, src_stride, block, first](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      for (std::size_t o = 0; o < sp.outer; ++o) {
                        T* dst = g.data() + o * src_stride + first;
                        const T* src = self.grad.data() + o * block;
                        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                      }
                    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {a.shared()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::shared_ptr<const std::vector<std::int32_t>> index,
                 Shape out_shape) {
  if (!index || index->size() != numel(out_shape)) {
    throw ShapeError("gather: index length does not match output shape " + to_string(out_shape));
  }
  const auto v = a.values();
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto j = (*index)[i];
    if (j < 0 || static_cast<std::size_t>(j) >= v.size()) throw ShapeError("gather: index out of range");
    out[i] = v[static_cast<std::size_t>(j)];
  }
  return make_op<T>("gather", std::move(out_shape), std::move(out), {a.shared()},
                    [index](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[i];
                    });
}

// ------------------------------------------------------------ convolution

namespace {

struct ConvGeom {
  int C = 0, D = 0, H = 0, W = 0;
  int O = 0;
  int kd = 1, kh = 1, kw = 1;
  int stride = 1;
  int pd = 0, ph = 0, pw = 0;
  int Do = 0, Ho = 0, Wo = 0;

  std::size_t K() const { return static_cast<std::size_t>(C) * kd * kh * kw; }
  std::size_t N() const { return static_cast<std::size_t>(Do) * Ho * Wo; }
  std::size_t in_size() const { return static_cast<std::size_t>(C) * D * H * W; }
  std::size_t rows() const { return static_cast<std::size_t>(Do) * Ho; }
};

int conv_out(int n, int k, int stride, int pad) { return (n + 2 * pad - k) / stride + 1; }

ConvGeom make_geom(int C, int D, int H, int W, int O, int kd, int kh, int kw, int stride,
                   int pd, int ph, int pw) {
  ConvGeom g{C, D, H, W, O, kd, kh, kw, stride, pd, ph, pw, 0, 0, 0};
  g.Do = conv_out(D, kd, stride, pd);
  g.Ho = conv_out(H, kh, stride, ph);
  g.Wo = conv_out(W, kw, stride, pw);
  if (g.Do < 1 || g.Ho < 1 || g.Wo < 1) throw ShapeError("conv: output would be empty");
  return g;
}

/// Output rows (oz, oy pairs) per im2col chunk, bounding the buffer size.
std::size_t chunk_rows(const ConvGeom& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 22;  // elements
  const std::size_t per_row = g.K() * static_cast<std::size_t>(g.Wo);
  return std::max<std::size_t>(1, std::min(g.rows(), kBudget / std::max<std::size_t>(1, per_row)));
}

/// Output columns [lo, hi) whose input column ox * stride - pw + kx is in range.
std::pair<int, int> valid_ox(const ConvGeom& g, int kx) {
  const int off = kx - g.pw;
  int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  int hi = g.W - off <= 0 ? 0 : (g.W - off + g.stride - 1) / g.stride;
  hi = std::min(hi, g.Wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

/// col (K x len) for output rows [r0, r1), len = (r1 - r0) * Wo.
template <typename T>
void im2col(const T* x, const ConvGeom& g, std::size_t r0, std::size_t r1, T* col) {
  const std::size_t len = (r1 - r0) * static_cast<std::size_t>(g.Wo);
  std::size_t r = 0;
  for (int c = 0; c < g.C; ++c) {
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++r) {
          T* dst = col + r * len;
          for (std::size_t rr = r0; rr < r1; ++rr) {
            const int oz = static_cast<int>(rr / static_cast<std::size_t>(g.Ho));
            const int oy = static_cast<int>(rr % static_cast<std::size_t>(g.Ho));
            const int iz = oz * g.stride - g.pd + kz;
            const int iy = oy * g.stride - g.ph + ky;
            T* d = dst + (rr - r0) * static_cast<std::size_t>(g.Wo);
            if (iz < 0 || iz >= g.D || iy < 0 || iy >= g.H) {
              std::fill_n(d, g.Wo, T(0));
              continue;
            }
            const T* src = x + ((static_cast<std::size_t>(c) * g.D + iz) * g.H + iy) * g.W;
            const auto [lo, hi] = valid_ox(g, kx);
            std::fill(d, d + lo, T(0));
            const int off = kx - g.pw;
            if (g.stride == 1) {
              std::copy(src + lo + off, src + hi + off, d + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) d[ox] = src[ox * g.stride + off];
            }
            std::fill(d + hi, d + g.Wo, T(0));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, std::size_t r0, std::size_t r1, T* x) {
  const std::size_t len = (r1 - r0) * static_cast<std::size_t>(g.Wo);
  std::size_t r = 0;
  for (int c = 0; c < g.C; ++c) {
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++r) {
          const T* srcrow = col + r * len;
          for (std::size_t rr = r0; rr < r1; ++rr) {
            const int oz = static_cast<int>(rr / static_cast<std::size_t>(g.Ho));
            const int oy = static_cast<int>(rr % static_cast<std::size_t>(g.Ho));
            const int iz = oz * g.stride - g.pd + kz;
            const int iy = oy * g.stride - g.ph + ky;
            if (iz < 0 || iz >= g.D || iy < 0 || iy >= g.H) continue;
            const T* s = srcrow + (rr - r0) * static_cast<std::size_t>(g.Wo);
            T* dst = x + ((static_cast<std::size_t>(c) * g.D + iz) * g.H + iy) * g.W;
            const auto [lo, hi] = valid_ox(g, kx);
            const int off = kx - g.pw;
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride + off] += s[ox];
          }
        }
      }
    }
  }
}

/// out (O x N) = W (O x K) * im2col(x)
template <typename T>
void conv_forward(const T* x, const T* w, const ConvGeom& g, T* out) {
  const std::size_t step = chunk_rows(g);
  std::vector<T> col;
  MapC<T> Wm(w, g.O, static_cast<Eigen::Index>(g.K()));
  MapM<T> Out(out, g.O, static_cast<Eigen::Index>(g.N()));
  for (std::size_t r0 = 0; r0 < g.rows(); r0 += step) {
    const std::size_t r1 = std::min(g.rows(), r0 + step);
    const auto len = static_cast<Eigen::Index>((r1 - r0) * g.Wo);
    col.resize(g.K() * static_cast<std::size_t>(len));
    im2col(x, g, r0, r1, col.data());
    MapC<T> Col(col.data(), static_cast<Eigen::Index>(g.K()), len);
    Out.middleCols(static_cast<Eigen::Index>(r0 * g.Wo), len).noalias() = Wm * Col;
  }
}

/// dx += col2im(W^T dy)
template <typename T>
void conv_backward_input(const T* dy, const T* w, const ConvGeom& g, T* dx) {
  const std::size_t step = chunk_rows(g);
  std::vector<T> col;
  MapC<T> Wm(w, g.O, static_cast<Eigen::Index>(g.K()));
  MapC<T> Dy(dy, g.O, static_cast<Eigen::Index>(g.N()));
  for (std::size_t r0 = 0; r0 < g.rows(); r0 += step) {
    const std::size_t r1 = std::min(g.rows(), r0 + step);
    const auto len = static_cast<Eigen::Index>((r1 - r0) * g.Wo);
    col.resize(g.K() * static_cast<std::size_t>(len));
    MapM<T> Col(col.data(), static_cast<Eigen::Index>(g.K()), len);
    Col.noalias() = Wm.transpose() * Dy.middleCols(static_cast<Eigen::Index>(r0 * g.Wo), len);
    col2im(col.data(), g, r0, r1, dx);
  }
}

/// dw += dy * im2col(x)^T
template <typename T>
void conv_backward_weight(const T* x, const T* dy, const ConvGeom& g, T* dw) {
  const std::size_t step = chunk_rows(g);
  std::vector<T> col;
  MapM<T> dW(dw, g.O, static_cast<Eigen::Index>(g.K()));
  MapC<T> Dy(dy, g.O, static_cast<Eigen::Index>(g.N()));
  for (std::size_t r0 = 0; r0 < g.rows(); r0 += step) {
    const std::size_t r1 = std::min(g.rows(), r0 + step);
    const auto len = static_cast<Eigen::Index>((r1 - r0) * g.Wo);
    col.resize(g.K() * static_cast<std::size_t>(len));
    im2col(x, g, r0, r1, col.data());
    MapC<T> Col(col.data(), static_cast<Eigen::Index>(g.K()), len);
    dW.noalias() += Dy.middleCols(static_cast<Eigen::Index>(r0 * g.Wo), len) * Col.transpose();
  }
}

template <typename T>
Tensor<T> conv_general(const char* op, const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& bias, const ConvGeom& g, const Shape& out_shape) {
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.O)) {
    throw ShapeError(std::string(op) + ": bias must have length " + std::to_string(g.O));
  }
  std::vector<T> out(static_cast<std::size_t>(g.O) * g.N());
  conv_forward(x.values().data(), w.values().data(), g, out.data());
  if (has_bias) {
    const auto b = bias.values();
    for (int o = 0; o < g.O; ++o) {
      T* row = out.data() + static_cast<std::size_t>(o) * g.N();
      for (std::size_t i = 0; i < g.N(); ++i) row[i] += b[o];
    }
  }
  std::vector<NodePtr<T>> parents{x.shared(), w.shared()};
  if (has_bias) parents.push_back(bias.shared());
  return make_op<T>(op, out_shape, std::move(out), std::move(parents), [g](Node<T>& self) {
    const auto& px = self.parents[0];
    const auto& pw = self.parents[1];
    if (wants(pw)) conv_backward_weight(px->value.data(), self.grad.data(), g, pw->grad_buffer().data());
    if (wants(px)) conv_backward_input(self.grad.data(), pw->value.data(), g, px->grad_buffer().data());
    if (self.parents.size() > 2 && wants(self.parents[2])) {
      auto& gb = self.parents[2]->grad_buffer();
      for (int o = 0; o < g.O; ++o) {
        const T* row = self.grad.data() + static_cast<std::size_t>(o) * g.N();
        double acc = 0.0;
        for (std::size_t i = 0; i < g.N(); ++i) acc += row[i];
        gb[o] += static_cast<T>(acc);
      }
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int pad) {
  require_rank("conv2d", x.shape(), 3);
  require_rank("conv2d", w.shape(), 4);
  if (w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  const int k = w.dim(2);
  const ConvGeom g = make_geom(x.dim(0), 1, x.dim(1), x.dim(2), w.dim(0), 1, k, k, 1, 0, pad, pad);
  return conv_general("conv2d", x, w, bias, g, {g.O, g.Ho, g.Wo});
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad) {
  require_rank("conv3d", x.shape(), 4);
  require_rank("conv3d", w.shape(), 5);
  if (w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4)) {
    throw ShapeError("conv3d: kernel " + to_string(w.shape()) + " incompatible with input " +
                     to_string(x.shape()));
  }
  if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
  const int k = w.dim(2);
  const ConvGeom g = make_geom(x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), k, k, k, stride,
                               pad, pad, pad);
  return conv_general("conv3d", x, w, bias, g, {g.O, g.Do, g.Ho, g.Wo});
}

template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& dy, const Tensor<T>& w, int stride, int pad,
                            const Shape& input_shape) {
  require_rank("conv3d_input_grad", dy.shape(), 4);
  require_rank("conv3d_input_grad", w.shape(), 5);
  require_rank("conv3d_input_grad", input_shape, 4);
  const int k = w.dim(2);
  const ConvGeom g = make_geom(input_shape[0], input_shape[1], input_shape[2], input_shape[3],
                               w.dim(0), k, k, k, stride, pad, pad, pad);
  if (w.dim(1) != g.C || dy.shape() != Shape{g.O, g.Do, g.Ho, g.Wo}) {
    throw ShapeError("conv3d_input_grad: dy " + to_string(dy.shape()) + " and kernel " +
                     to_string(w.shape()) + " do not match input " + to_string(input_shape));
  }
  std::vector<T> out(g.in_size(), T(0));
  conv_backward_input(dy.values().data(), w.values().data(), g, out.data());
  return make_op<T>("conv3d_input_grad", input_shape, std::move(out), {dy.shared(), w.shared()},
                    [g](Node<T>& self) {
                      const auto& pdy = self.parents[0];
                      const auto& pw = self.parents[1];
                      // out = A(w)^T dy, linear in both arguments.
                      if (wants(pdy)) {
                        std::vector<T> tmp(static_cast<std::size_t>(g.O) * g.N());
                        conv_forward(self.grad.data(), pw->value.data(), g, tmp.data());
                        auto& gd = pdy->grad_buffer();
                        for (std::size_t i = 0; i < tmp.size(); ++i) gd[i] += tmp[i];
                      }
                      if (wants(pw)) {
                        conv_backward_weight(self.grad.data(), pdy->value.data(), g,
                                             pw->grad_buffer().data());
                      }
                    });
}

// ---------------------------------------------------------------- resizing

namespace {

struct LerpTap {
  int i0 = 0;
  int i1 = 0;
  double frac = 0.0;
};

std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.5 * (in - 1);
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::clamp(i0, 0, in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> interpolate2d(const Tensor<T>& x, int out_h, int out_w) {
  require_rank("interpolate2d", x.shape(), 3);
  if (out_h < 1 || out_w < 1) throw ShapeError("interpolate2d: output must be non-empty");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto ty = lerp_taps(H, out_h);
  const auto tx = lerp_taps(W, out_w);
  std::vector<T> out(static_cast<std::size_t>(C) * out_h * out_w);
  const auto v = x.values();
  for (int c = 0; c < C; ++c) {
    const T* src = v.data() + static_cast<std::size_t>(c) * H * W;
    T* dst = out.data() + static_cast<std::size_t>(c) * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      for (int j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        const double top = src[a.i0 * W + b.i0] * (1 - b.frac) + src[a.i0 * W + b.i1] * b.frac;
        const double bot = src[a.i1 * W + b.i0] * (1 - b.frac) + src[a.i1 * W + b.i1] * b.frac;
        dst[i * out_w + j] = static_cast<T>(top * (1 - a.frac) + bot * a.frac);
      }
    }
  }
  return make_op<T>("interpolate2d", {C, out_h, out_w}, std::move(out), {x.shared()},
                    [C, H, W, out_h, out_w, ty, tx](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      for (int c = 0; c < C; ++c) {
                        T* dst = g.data() + static_cast<std::size_t>(c) * H * W;
                        const T* src = self.grad.data() + static_cast<std::size_t>(c) * out_h * out_w;
                        for (int i = 0; i < out_h; ++i) {
                          const auto& a = ty[i];
                          for (int j = 0; j < out_w; ++j) {
                            const auto& b = tx[j];
                            const double gv = src[i * out_w + j];
                            dst[a.i0 * W + b.i0] += static_cast<T>(gv * (1 - a.frac) * (1 - b.frac));
                            dst[a.i0 * W + b.i1] += static_cast<T>(gv * (1 - a.frac) * b.frac);
                            dst[a.i1 * W + b.i0] += static_cast<T>(gv * a.frac * (1 - b.frac));
                            dst[a.i1 * W + b.i1] += static_cast<T>(gv * a.frac * b.frac);
                          }
                        }
                      }
                    });
}

template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& x, int out_d, int out_h, int out_w) {
  require_rank("upsample_nearest3d", x.shape(), 4);
  const int C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto map = [](int in, int out) {
    std::vector<int> m(static_cast<std::size_t>(out));
    for (int i = 0; i < out; ++i) {
      m[i] = std::min(in - 1, static_cast<int>(static_cast<long long>(i) * in / out));
    }
    return m;
  };
  const auto mz = map(D, out_d), my = map(H, out_h), mx = map(W, out_w);
  auto index = std::make_shared<std::vector<std::int32_t>>();
  index->reserve(static_cast<std::size_t>(C) * out_d * out_h * out_w);
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < out_d; ++z)
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx) {
          index->push_back(static_cast<std::int32_t>(((c * D + mz[z]) * H + my[y]) * W + mx[xx]));
        }
  return gather<T>(x, std::move(index), {C, out_d, out_h, out_w});
}

template <typename T>
Tensor<T> axis_filter(const Tensor<T>& a, int axis, std::shared_ptr<const std::vector<T>> m) {
  axis = normalize_axis(axis, a.rank(), "axis_filter");
  const std::size_t n = static_cast<std::size_t>(a.shape()[axis]);
  if (!m || m->size() != n * n) throw ShapeError("axis_filter: matrix must be n x n for n = " + std::to_string(n));
  const AxisSplit sp = split_at(a.shape(), axis);
  std::vector<T> out(a.size(), T(0));
  const auto v = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const T* src = v.data() + o * n * sp.inner;
    T* dst = out.data() + o * n * sp.inner;
    for (std::size_t i = 0; i < n; ++i) {
      T* drow = dst + i * sp.inner;
      for (std::size_t j = 0; j < n; ++j) {
        const T c = (*m)[i * n + j];
        if (c == T(0)) continue;
        const T* srow = src + j * sp.inner;
        for (std::size_t r = 0; r < sp.inner; ++r) drow[r] += c * srow[r];
      }
    }
  }
  return make_op<T>("axis_filter", a.shape(), std::move(out), {a.shared()},
                    [m, n, sp](Node<T>& self) {
                      auto& g = self.parents[0]->grad_buffer();
                      for (std::size_t o = 0; o < sp.outer; ++o) {
                        const T* src = self.grad.data() + o * n * sp.inner;
                        T* dst = g.data() + o * n * sp.inner;
                        for (std::size_t i = 0; i < n; ++i) {
                          const T* srow = src + i * sp.inner;
                          for (std::size_t j = 0; j < n; ++j) {
                            const T c = (*m)[i * n + j];
                            if (c == T(0)) continue;
                            T* drow = dst + j * sp.inner;
                            for (std::size_t r = 0; r < sp.inner; ++r) drow[r] += c * srow[r];
                          }
                        }
                      }
                    });
}

// -------------------------------------------------------------- grad check

namespace {

// Analytic gradients come from f on inputs; finite differences from ref on
// ref_inputs, which may alias inputs.
template <typename T, typename R>
GradCheckResult grad_check_impl(const ScalarFn<T>& f, std::vector<Tensor<T>>& inputs, const ScalarFn<R>& ref,
                                std::vector<Tensor<R>>& ref_inputs, const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("grad_check: step must be positive");
  if (ref_inputs.size() != inputs.size()) throw ShapeError("grad_check: reference input count differs");
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (ref_inputs[k].size() != inputs[k].size()) throw ShapeError("grad_check: reference input size differs");
  }
  for (auto& in : inputs) {
    if (!in.requires_grad()) throw ShapeError("grad_check: inputs must be variables");
    in.zero_grad();
  }
  double f0 = 0.0;
  {
    Tensor<T> out = f(inputs);
    f0 = out.item();
    out.backward();
  }
  std::vector<std::vector<T>> analytic;
  for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());
  for (auto& in : inputs) in.zero_grad();

  std::mt19937_64 rng(options.seed);
  double max_abs = 0.0;
  double max_analytic = 0.0;
  double max_numeric = 0.0;
  std::size_t checked = 0;
  NoGradGuard no_grad;
  double dir_step = options.step;
  if (options.directions > 0 && options.relative_change > 0.0) {
    double l1 = 0.0;
    for (const auto& g : analytic) {
      for (T v : g) l1 += std::abs(static_cast<double>(v));
    }
    if (l1 > 0.0) dir_step = options.relative_change * std::max(std::abs(f0), 1e-30) / l1;
  }
  for (std::size_t d = 0; d < options.directions; ++d) {
    // f(x + h s) - f(x - h s) against the analytic gradient dotted with the
    // perturbation actually applied after rounding.
    std::bernoulli_distribution coin(options.aligned_directions ? 0.75 : 0.5);
    std::vector<std::vector<R>> originals, ups, downs;
    double a = 0.0;
    for (std::size_t k = 0; k < ref_inputs.size(); ++k) {
      auto values = ref_inputs[k].mutable_values();
      originals.emplace_back(values.begin(), values.end());
      ups.emplace_back(values.size());
      downs.emplace_back(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        double h = coin(rng) ? dir_step : -dir_step;
        if (options.aligned_directions && analytic[k][i] < 0) h = -h;
        ups[k][i] = static_cast<R>(originals[k][i] + h);
        downs[k][i] = static_cast<R>(originals[k][i] - h);
        a += analytic[k][i] * (static_cast<double>(ups[k][i]) - static_cast<double>(downs[k][i]));
      }
    }
    auto load = [&](const std::vector<std::vector<R>>& src) {
      for (std::size_t k = 0; k < ref_inputs.size(); ++k) {
        std::copy(src[k].begin(), src[k].end(), ref_inputs[k].mutable_values().begin());
      }
    };
    load(ups);
    const double f_up = ref(ref_inputs).item();
    load(downs);
    const double f_down = ref(ref_inputs).item();
    load(originals);
    const double numeric = f_up - f_down;
    max_abs = std::max(max_abs, std::abs(a - numeric));
    max_analytic = std::max(max_analytic, std::abs(a));
    max_numeric = std::max(max_numeric, std::abs(numeric));
    ++checked;
  }
  for (std::size_t k = 0; options.directions == 0 && k < ref_inputs.size(); ++k) {
    auto values = ref_inputs[k].mutable_values();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input > 0 && options.max_coords_per_input < coords.size()) {
      if (options.largest_coords) {
        const auto& g = analytic[k];
        std::stable_sort(coords.begin(), coords.end(),
                         [&g](std::size_t a, std::size_t b) { return std::abs(g[a]) > std::abs(g[b]); });
      } else {
        std::shuffle(coords.begin(), coords.end(), rng);
      }
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const R original = values[i];
      const R up = static_cast<R>(original + options.step);
      const R down = static_cast<R>(original - options.step);
      values[i] = up;
      const double f_up = ref(ref_inputs).item();
      values[i] = down;
      const double f_down = ref(ref_inputs).item();
      values[i] = original;
      const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
      const double a = analytic[k][i];
      max_abs = std::max(max_abs, std::abs(a - numeric));
      max_analytic = std::max(max_analytic, std::abs(a));
      max_numeric = std::max(max_numeric, std::abs(numeric));
      ++checked;
    }
  }
  GradCheckResult result;
  result.max_abs_error = max_abs;
  result.grad_scale = std::max({max_analytic, max_numeric, 1e-8});
  result.max_rel_error = max_abs / result.grad_scale;
  result.coords_checked = checked;
  return result;
}

}  // namespace

template <typename T>
GradCheckResult grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs,
                           const GradCheckOptions& options) {
  return grad_check_impl<T, T>(f, inputs, f, inputs, options);
}

GradCheckResult grad_check(const ScalarFn<float>& f, std::vector<Tensor<float>> inputs,
                           const ScalarFn<double>& reference, std::vector<Tensor<double>> reference_inputs,
                           const GradCheckOptions& options) {
  return grad_check_impl<float, double>(f, inputs, reference, reference_inputs, options);
}

// ------------------------------------------------------ instantiations

#define TIPNET_AD_INSTANTIATE(T)                                                            \
  template class Tensor<T>;                                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                       \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                       \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                \
  template Tensor<T> relu(const Tensor<T>&);                                                \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                       \
  template Tensor<T> abs(const Tensor<T>&);                                                 \
  template Tensor<T> sqrt(const Tensor<T>&);                                                \
  template Tensor<T> square(const Tensor<T>&);                                              \
  template Tensor<T> softmax(const Tensor<T>&);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                            \
  template Tensor<T> narrow(const Tensor<T>&, int, int, int);                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> gather(const Tensor<T>&, std::shared_ptr<const std::vector<std::int32_t>>, \
                            Shape);                                                         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);     \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int); \
  template Tensor<T> conv3d_input_grad(const Tensor<T>&, const Tensor<T>&, int, int,        \
                                       const Shape&);                                       \
  template Tensor<T> interpolate2d(const Tensor<T>&, int, int);                             \
  template Tensor<T> upsample_nearest3d(const Tensor<T>&, int, int, int);                   \
  template Tensor<T> axis_filter(const Tensor<T>&, int, std::shared_ptr<const std::vector<T>>); \
  template GradCheckResult grad_check(const ScalarFn<T>&, std::vector<Tensor<T>>,           \
                                      const GradCheckOptions&);

TIPNET_AD_INSTANTIATE(float)
TIPNET_AD_INSTANTIATE(double)

#undef TIPNET_AD_INSTANTIATE

}  // namespace tipnet::ad
