#pragma once

#include "histoseg/ops.hpp"
#include "histoseg/tensor.hpp"

namespace histoseg {

struct LossConfig {
  double alpha = 0.25;         // focal class weight for positives
  double gamma = 2.0;          // focal modulating exponent
  double clip_epsilon = 1e-7;  // probability clip before logs
  double dice_smoothing = 1.0;
  bool alpha_weighting = true;  // false forces alpha_t == 1

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) fail("loss config: alpha must be in (0, 1)");
    if (gamma < 0.0) fail("loss config: gamma must be >= 0");
    if (!(clip_epsilon > 0.0 && clip_epsilon <= 0.01)) {
      fail("loss config: clip_epsilon must be in (0, 0.01]");
    }
  }
};

namespace detail {

template <typename T>
void check_loss_inputs(const TensorT<T>& y, const TensorT<T>& p, const LossConfig& cfg,
                       const char* op) {
  cfg.validate();
  require_same_shape(y, p, op);
}

}  // namespace detail

// Mean over every pixel of -(y*log(p) + (1-y)*log(1-p)), with p clipped away
// from {0,1} first.
template <typename T>
TensorT<T> bce_loss(const TensorT<T>& y, const TensorT<T>& p, const LossConfig& cfg = {}) {
  detail::check_loss_inputs(y, p, cfg, "bce_loss");
  TensorT<T> one = TensorT<T>::full(p.shape(), T(1));
  TensorT<T> pc = clamp(p, cfg.clip_epsilon, 1.0 - cfg.clip_epsilon);
  TensorT<T> term = add(mul(y, log(pc)), mul(sub(one, y), log(sub(one, pc))));
  return mean(scale(term, -1.0));
}

// Mean of -alpha_t * (1 - p_t)^gamma * log(p_t), where p_t folds the target
// in (p for positives, 1-p for negatives) and alpha_t = alpha or 1-alpha.
template <typename T>
TensorT<T> focal_loss(const TensorT<T>& y, const TensorT<T>& p, const LossConfig& cfg = {}) {
  detail::check_loss_inputs(y, p, cfg, "focal_loss");
  TensorT<T> one = TensorT<T>::full(p.shape(), T(1));
  TensorT<T> pc = clamp(p, cfg.clip_epsilon, 1.0 - cfg.clip_epsilon);
  TensorT<T> pt = add(mul(y, pc), mul(sub(one, y), sub(one, pc)));
  TensorT<T> weighted = mul(pow_scalar(sub(one, pt), cfg.gamma), log(pt));
  if (cfg.alpha_weighting) {
    TensorT<T> at = add(scale(y, cfg.alpha), scale(sub(one, y), 1.0 - cfg.alpha));
    weighted = mul(at, weighted);
  }
  return mean(scale(weighted, -1.0));
}

// Per-sample 1 - (2*sum(y*p) + s) / (sum(y) + sum(p) + s), averaged over the
// batch. p enters unclipped; the smoothing term keeps the ratio defined when
// both masks are empty.
template <typename T>
TensorT<T> dice_loss(const TensorT<T>& y, const TensorT<T>& p, const LossConfig& cfg = {}) {
  detail::check_loss_inputs(y, p, cfg, "dice_loss");
  const int n = y.dim(0);
  TensorT<T> inter = sum_per_sample(mul(y, p));
  TensorT<T> num = add_scalar(scale(inter, 2.0), cfg.dice_smoothing);
  TensorT<T> den = add_scalar(add(sum_per_sample(y), sum_per_sample(p)), cfg.dice_smoothing);
  return mean(sub(TensorT<T>::full({n}, T(1)), div(num, den)));
}

template <typename T>
struct MultiLoss {
  TensorT<T> total, bce, focal, dice;
};

// Eq-style unweighted sum of the three components.
template <typename T>
MultiLoss<T> multi_loss(const TensorT<T>& y, const TensorT<T>& p, const LossConfig& cfg = {}) {
  MultiLoss<T> out;
  out.bce = bce_loss(y, p, cfg);
  out.focal = focal_loss(y, p, cfg);
  out.dice = dice_loss(y, p, cfg);
  out.total = add(add(out.bce, out.focal), out.dice);
  return out;
}

}  // namespace histoseg
