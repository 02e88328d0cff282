#include "triadpi/losses.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "triadpi/errors.hpp"

namespace triadpi::losses {

void TverskyParams::validate() const {
  if (!(alpha >= 0 && beta >= 0)) throw ConfigError("Tversky weights must be nonnegative");
  if (!(epsilon >= 0)) throw ConfigError("Tversky epsilon must be nonnegative");
}

void TriadLossConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 0.5))
    throw ConfigError("TriadLoss gamma must lie in (0, 0.5), got " + std::to_string(gamma));
}

namespace {

template <typename T>
void check_shapes(const Tensor<T>& p, const Tensor<T>& g) {
  if (!p.same_shape(g))
    throw ShapeError("loss inputs differ: " + shape_str(p.channels(), p.grid()) + " vs " +
                     shape_str(g.channels(), g.grid()));
  if (p.channels() < 2) throw ShapeError("loss needs at least one foreground channel");
}

}  // namespace

template <typename T>
double tversky_loss(const Tensor<T>& p, const Tensor<T>& g, const TverskyParams& params, Tensor<T>* grad) {
  check_shapes(p, g);
  params.validate();
  const int nc = p.channels();
  const double nfg = nc - 1;
  if (grad) *grad = Tensor<T>(nc, p.grid());
  double loss = 0;
  for (int c = 1; c < nc; ++c) {
    const auto pc = p.channel(c);
    const auto gc = g.channel(c);
    double tp = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      tp += double(pc[i]) * gc[i];
      sp += pc[i];
      sg += gc[i];
    }
    const double fp = sp - tp, fn = sg - tp;
    const double num = tp + params.epsilon;
    const double den = tp + params.alpha * fp + params.beta * fn + params.epsilon;
    if (den == 0.0) continue;  // nothing predicted, nothing present: TI = 1
    loss += (1.0 - num / den) / nfg;
    if (grad) {
      // dTI/dp_i = (g_i den - num (g_i + alpha (1 - g_i) - beta g_i)) / den^2
      auto dc = grad->channel(c);
      const double inv = 1.0 / (den * den);
      for (std::size_t i = 0; i < pc.size(); ++i) {
        const double gi = gc[i];
        const double dden = gi + params.alpha * (1.0 - gi) - params.beta * gi;
        dc[i] = T(-(gi * den - num * dden) * inv / nfg);
      }
    }
  }
  return loss;
}

template <typename T>
double dice_loss(const Tensor<T>& p, const Tensor<T>& g, double epsilon, Tensor<T>* grad) {
  check_shapes(p, g);
  const int nc = p.channels();
  const double nfg = nc - 1;
  if (grad) *grad = Tensor<T>(nc, p.grid());
  double loss = 0;
  for (int c = 1; c < nc; ++c) {
    const auto pc = p.channel(c);
    const auto gc = g.channel(c);
    double inter = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      inter += double(pc[i]) * gc[i];
      sp += pc[i];
      sg += gc[i];
    }
    const double num = 2.0 * inter + 2.0 * epsilon;
    const double den = sp + sg + 2.0 * epsilon;
    if (den == 0.0) continue;
    loss += (1.0 - num / den) / nfg;
    if (grad) {
      auto dc = grad->channel(c);
      for (std::size_t i = 0; i < pc.size(); ++i)
        dc[i] = T(-(2.0 * gc[i] * den - num) / (den * den) / nfg);
    }
  }
  return loss;
}

template <typename T>
double triad_loss(const Tensor<T>& p_lower, const Tensor<T>& p_mean, const Tensor<T>& p_upper, const Tensor<T>& g,
                  const TriadLossConfig& cfg, Tensor<T>* grad_lower, Tensor<T>* grad_mean, Tensor<T>* grad_upper) {
  cfg.validate();
  return tversky_loss(p_lower, g, cfg.lower(), grad_lower) + tversky_loss(p_mean, g, cfg.mean(), grad_mean) +
         tversky_loss(p_upper, g, cfg.upper(), grad_upper);
}

namespace {
void check_quantile(double t) {
  if (!(t > 0.0 && t < 1.0)) throw ConfigError("pinball quantile must lie in (0, 1), got " + std::to_string(t));
}
}  // namespace

double pinball_loss(double pred, double target, double t) {
  check_quantile(t);
  const double r = target - pred;
  return std::max(t * r, (t - 1.0) * r);
}

double pinball_grad(double pred, double target, double t) {
  check_quantile(t);
  if (target > pred) return -t;
  if (target < pred) return 1.0 - t;
  return 0.0;
}

double pinball_compound_loss(std::span<const double> preds, std::span<const double> targets, double alpha,
                             std::span<double> grad) {
  if (preds.size() != 3 * targets.size())
    throw ShapeError("compound pinball expects 3 predictions per target, got " + std::to_string(preds.size()) +
                     " for " + std::to_string(targets.size()));
  if (!grad.empty() && grad.size() != preds.size()) throw ShapeError("gradient buffer size mismatch");
  const double qs[3] = {alpha / 2.0, 0.5, 1.0 - alpha / 2.0};
  double loss = 0;
  for (std::size_t c = 0; c < targets.size(); ++c)
    for (int k = 0; k < 3; ++k) {
      loss += pinball_loss(preds[3 * c + k], targets[c], qs[k]);
      if (!grad.empty()) grad[3 * c + k] = pinball_grad(preds[3 * c + k], targets[c], qs[k]);
    }
  return loss;
}

#define TRIADPI_INSTANTIATE_LOSSES(T)                                                                        \
  template double tversky_loss<T>(const Tensor<T>&, const Tensor<T>&, const TverskyParams&, Tensor<T>*);     \
  template double dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double, Tensor<T>*);                      \
  template double triad_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                const TriadLossConfig&, Tensor<T>*, Tensor<T>*, Tensor<T>*);

TRIADPI_INSTANTIATE_LOSSES(float)
TRIADPI_INSTANTIATE_LOSSES(double)

}  // namespace triadpi::losses
