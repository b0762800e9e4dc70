#pragma once

#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "tipnet/autodiff.hpp"
#include "tipnet/metrics.hpp"
#include "tipnet/volume.hpp"

namespace tipnet {

struct LossWeights {
  double lambda_a = 0.1;    ///< P-net supervision
  double lambda_b = 0.005;  ///< adversarial term
  double lambda_c = 0.8;    ///< 1 - SSIM
  double lambda_d = 0.1;    ///< Sobel-edge MAE
  double lambda_gp = 10.0;  ///< gradient penalty

  void validate() const;
};

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j, LossWeights base = {});

/// Gradient magnitude of separable 3-D Sobel filters (derivative [-1, 0, 1]
/// on the axis, smoothing [1, 2, 1] on the other two), zero padded.
/// Throws ShapeError when any axis has fewer than 3 voxels.
VolumeGrid sobel_edges(const VolumeGrid& x);

// Tensor versions operate on volumes of shape (nz, ny, nx).

/// Differentiable Sobel magnitude sqrt(Gx^2 + Gy^2 + Gz^2 + eps).
template <typename T>
ad::Tensor<T> sobel_magnitude(const ad::Tensor<T>& x, T eps = T(1e-12));

template <typename T>
ad::Tensor<T> mae(const ad::Tensor<T>& x, const ad::Tensor<T>& y);

/// Differentiable mean SSIM, same definition as the metric.
template <typename T>
ad::Tensor<T> ssim_tensor(const ad::Tensor<T>& x, const ad::Tensor<T>& y, double peak,
                          const SSIMOptions& options = {});

template <typename T>
struct CompositeTerms {
  ad::Tensor<T> total;
  ad::Tensor<T> mae;
  ad::Tensor<T> ssim;
  ad::Tensor<T> edge;
};

/// MAE(X, Y) + lambda_c (1 - SSIM(X, Y)) + lambda_d MAE(Sobel X, Sobel Y).
/// The SSIM peak is max(Y), or 1 if Y has no positive value.
template <typename T>
CompositeTerms<T> composite_terms(const ad::Tensor<T>& x, const ad::Tensor<T>& y,
                                  const LossWeights& w);
template <typename T>
ad::Tensor<T> composite_loss(const ad::Tensor<T>& x, const ad::Tensor<T>& y,
                             const LossWeights& w) {
  return composite_terms(x, y, w).total;
}

/// Scalar critic used by the adversarial objectives.
template <typename T>
class CriticFn {
 public:
  virtual ~CriticFn() = default;
  /// Score of one volume, shape {1}.
  virtual ad::Tensor<T> score(const ad::Tensor<T>& x) const = 0;
  /// d score / d x, itself differentiable in the critic's parameters.
  virtual ad::Tensor<T> input_gradient(const ad::Tensor<T>& x) const = 0;
};

/// D(x) = <v, x>.
template <typename T>
class LinearCritic final : public CriticFn<T> {
 public:
  explicit LinearCritic(ad::Tensor<T> v) : v_(std::move(v)) {}
  ad::Tensor<T> score(const ad::Tensor<T>& x) const override { return sum(mul(v_, x)); }
  ad::Tensor<T> input_gradient(const ad::Tensor<T>&) const override { return v_; }

 private:
  ad::Tensor<T> v_;
};

/// D(x) = c.
template <typename T>
class ConstantCritic final : public CriticFn<T> {
 public:
  explicit ConstantCritic(T c) : c_(c) {}
  ad::Tensor<T> score(const ad::Tensor<T>&) const override { return ad::Tensor<T>::scalar(c_); }
  ad::Tensor<T> input_gradient(const ad::Tensor<T>& x) const override {
    return ad::Tensor<T>::constant(x.shape(), T(0));
  }

 private:
  T c_;
};

template <typename T>
struct GeneratorTerms {
  ad::Tensor<T> total;
  ad::Tensor<T> main;         ///< batch mean of l(G(I_one), I_four)
  ad::Tensor<T> pnet;         ///< batch mean of l(P_net(I_one), I_four)
  ad::Tensor<T> adversarial;  ///< batch mean of D(G(I_one))
};

/// l(G, I_four) + lambda_a l(P, I_four) - lambda_b mean D(G), with each l
/// averaged over the batch. Throws DataError on an empty batch or a missing
/// intermediate output.
template <typename T>
GeneratorTerms<T> generator_objective(std::span<const ad::Tensor<T>> final_out,
                                      std::span<const ad::Tensor<T>> pnet_out,
                                      std::span<const ad::Tensor<T>> target,
                                      const CriticFn<T>& critic, const LossWeights& w);

template <typename T>
struct CriticTerms {
  ad::Tensor<T> total;
  ad::Tensor<T> wasserstein;  ///< mean D(fake) - mean D(real)
  ad::Tensor<T> penalty;      ///< mean (||grad D(x_hat)|| - 1)^2
};

/// mean D(fake) - mean D(real) + lambda_gp mean (||grad D(x_hat)||_2 - 1)^2,
/// x_hat = u real + (1 - u) fake with one u per sample.
template <typename T>
CriticTerms<T> critic_objective(std::span<const ad::Tensor<T>> real,
                                std::span<const ad::Tensor<T>> fake, const CriticFn<T>& critic,
                                const LossWeights& w, std::span<const double> u);
/// Draws u ~ Uniform(0, 1) per sample from `rng`.
template <typename T>
CriticTerms<T> critic_objective(std::span<const ad::Tensor<T>> real,
                                std::span<const ad::Tensor<T>> fake, const CriticFn<T>& critic,
                                const LossWeights& w, std::mt19937_64& rng);

/// Volume <-> (nz, ny, nx) tensor conversions.
template <typename T>
ad::Tensor<T> to_tensor(const VolumeGrid& v, bool requires_grad = false);
VolumeGrid to_volume(const ad::Tensor<float>& t, const GridSpec& grid);
VolumeGrid to_volume(const ad::Tensor<double>& t, const GridSpec& grid);

}  // namespace tipnet
