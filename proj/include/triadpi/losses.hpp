#pragma once

#include <span>

#include "triadpi/tensor.hpp"

namespace triadpi::losses {

/// Asymmetric overlap weights: alpha scales false positives, beta false negatives.
struct TverskyParams {
  double alpha = 0.5;
  double beta = 0.5;
  double epsilon = 1e-5;

  void validate() const;
};

/// gamma in the open interval (0, 0.5).
struct TriadLossConfig {
  double gamma = 0.2;

  void validate() const;
  TverskyParams lower() const { return {1.0 - gamma, gamma}; }
  TverskyParams mean() const { return {0.5, 0.5}; }
  TverskyParams upper() const { return {gamma, 1.0 - gamma}; }
};

/// Soft Tversky loss averaged over foreground classes (channel 0 is background
/// and is ignored). `p` and `g` are [N, D, H, W]; g one-hot.
///
///   TI_c = (TP_c + eps) / (TP_c + alpha FP_c + beta FN_c + eps),  loss = mean_c (1 - TI_c)
///
/// If `grad` is non-null it receives dLoss/dp (zero in the background channel).
/// A class with an empty denominator (only possible with eps = 0) has TI = 1.
template <typename T>
double tversky_loss(const Tensor<T>& p, const Tensor<T>& g, const TverskyParams& params, Tensor<T>* grad = nullptr);

/// Soft Dice loss, 1 - mean_c (2 sum(p g) + 2 eps) / (sum(p) + sum(g) + 2 eps).
/// Coincides with tversky_loss at alpha = beta = 0.5.
template <typename T>
double dice_loss(const Tensor<T>& p, const Tensor<T>& g, double epsilon = 1e-5, Tensor<T>* grad = nullptr);

/// T_{1-gamma,gamma}(lower) + T_{0.5,0.5}(mean) + T_{gamma,1-gamma}(upper).
template <typename T>
double triad_loss(const Tensor<T>& p_lower, const Tensor<T>& p_mean, const Tensor<T>& p_upper, const Tensor<T>& g,
                  const TriadLossConfig& cfg, Tensor<T>* grad_lower = nullptr, Tensor<T>* grad_mean = nullptr,
                  Tensor<T>* grad_upper = nullptr);

/// max(t (y - pred), (t - 1)(y - pred)); t in (0, 1).
double pinball_loss(double pred, double target, double t);

/// Subgradient of pinball_loss in `pred` (0 at the kink).
double pinball_grad(double pred, double target, double t);

/// Sum over classes of P_{alpha/2}(lo) + P_{0.5}(mid) + P_{1-alpha/2}(hi), where
/// preds is laid out per class as (lo, mid, hi). `grad`, if non-empty, receives
/// d/dpreds.
double pinball_compound_loss(std::span<const double> preds, std::span<const double> targets, double alpha,
                             std::span<double> grad = {});

}  // namespace triadpi::losses
