#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tipnet::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialized on first use.
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Handle to a node of the dynamic tape. Copies share the node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor constant(Shape shape, T fill = T(0));
  /// Leaf that records gradients (a trainable parameter or a checked input).
  static Tensor variable(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return constant({1}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Mutable access for leaves (optimizer updates, finite differences).
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  T item() const;
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Constant copy of the current values, cut from the tape.
  Tensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// While alive, new operations do not record backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ----------------------------------------------------------- primitives
// All binary elementwise ops require identical shapes.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T c);
/// a of shape (..., n) plus b of shape (n), broadcast over leading axes.
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& b);

/// 2-D matrix product with optional transposition of either operand.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
                 bool transpose_b = false);

template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);

/// Softmax over the last axis.
template <typename T> Tensor<T> softmax(const Tensor<T>& a);
/// Layer normalization over the last axis with affine gain/bias of length n.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// Full reductions to shape {1}; accumulation is done in double.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> narrow(const Tensor<T>& a, int axis, int start, int length);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// out.flat[i] = a.flat[index[i]]; the backward pass scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::shared_ptr<const std::vector<std::int32_t>> index,
                 Shape out_shape);

/// x: (C, H, W), w: (O, C, k, k), bias: (O) or undefined. Stride 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int pad);
/// x: (C, D, H, W), w: (O, C, k, k, k), bias: (O) or undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad);
/// Gradient of conv3d with respect to its input, as a differentiable op of
/// both `dy` (O, Do, Ho, Wo) and `w`. Output has `input_shape` (C, D, H, W).
template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& dy, const Tensor<T>& w, int stride, int pad,
                            const Shape& input_shape);

/// Bilinear resize of (C, H, W) to (C, out_h, out_w), corners aligned.
template <typename T> Tensor<T> interpolate2d(const Tensor<T>& x, int out_h, int out_w);
/// Nearest-neighbour resize of (C, D, H, W).
template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& x, int out_d, int out_h, int out_w);

/// Applies the dense n x n matrix (row-major) along `axis`:
/// out[.., i, ..] = sum_j m[i, j] * a[.., j, ..].
template <typename T>
Tensor<T> axis_filter(const Tensor<T>& a, int axis, std::shared_ptr<const std::vector<T>> m);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ----------------------------------------------------------- grad check

struct GradCheckOptions {
  double step = 1e-6;
  /// Coordinates per input to probe; 0 checks every coordinate.
  std::size_t max_coords_per_input = 0;
  /// When > 0, probe this many random +-1 directions over all inputs jointly
  /// instead of single coordinates.
  std::size_t directions = 0;
  /// Directions follow the sign of the analytic gradient on a random 3/4 of
  /// the coordinates and oppose it on the rest, raising the signal above the
  /// rounding floor of low-precision evaluations.
  bool aligned_directions = false;
  /// When > 0 in directional mode, the step is chosen so the first-order
  /// change of f is this fraction of |f| (step is then ignored).
  double relative_change = 0.0;
  /// Probe the coordinates with the largest analytic gradient rather than a
  /// random subset (only with max_coords_per_input).
  bool largest_coords = false;
  std::uint64_t seed = 1234;
};

struct GradCheckResult {
  /// max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf, 1e-8),
  /// over coordinates or directional derivatives.
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double grad_scale = 0.0;
  std::size_t coords_checked = 0;  ///< coordinates or directions probed
};

template <typename T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Central-difference check of d f / d inputs. Inputs must be variables;
/// their values are restored afterwards and their gradients are reset.
template <typename T>
GradCheckResult grad_check(const ScalarFn<T>& f, std::vector<Tensor<T>> inputs,
                           const GradCheckOptions& options = {});

/// 32-bit analytic gradient of f against central differences of reference, a
/// 64-bit evaluation of the same function on reference_inputs holding the same
/// values. Keeps 32-bit evaluation noise out of the numeric side.
GradCheckResult grad_check(const ScalarFn<float>& f, std::vector<Tensor<float>> inputs,
                           const ScalarFn<double>& reference, std::vector<Tensor<double>> reference_inputs,
                           const GradCheckOptions& options = {});

}  // namespace tipnet::ad
