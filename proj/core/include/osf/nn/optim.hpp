#pragma once

#include <cmath>
#include <vector>

#include "osf/nn/tensor.hpp"

namespace osf::nn {

// Linear warmup over ceil(warmup_frac * total) steps, then cosine decay to 0.
inline double lr_at(long step, long total_steps, double base_lr, double warmup_frac = 0.1) {
  if (total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be > 0");
  if (!(warmup_frac > 0 && warmup_frac < 1))
    throw std::invalid_argument("lr_at: warmup_frac must be in (0,1)");
  long warmup = static_cast<long>(std::ceil(warmup_frac * total_steps));
  if (step < warmup) return base_lr * static_cast<double>(step) / warmup;
  long denom = std::max<long>(1, total_steps - warmup);
  double progress = static_cast<double>(step - warmup) / denom;
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// AdamW with decoupled weight decay and optional global-norm gradient clipping.
template <class S>
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.95, double weight_decay = 0.2,
        double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

  // clip <= 0 disables clipping
  void step(std::vector<Param<S>*>& params, double lr, double clip = 0.0) {
    ++t_;
    if (clip > 0) {
      double sq = 0;
      for (auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
      double norm = std::sqrt(sq);
      if (norm > clip) {
        S s = static_cast<S>(clip / norm);
        for (auto* p : params) p->grad *= s;
      }
    }
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto* p : params) {
      p->ensure_state();
      p->adam_m = static_cast<S>(beta1_) * p->adam_m + static_cast<S>(1 - beta1_) * p->grad;
      p->adam_v = (static_cast<S>(beta2_) * p->adam_v.array() +
                   static_cast<S>(1 - beta2_) * p->grad.array().square())
                      .matrix();
      auto mhat = p->adam_m.array() / static_cast<S>(bc1);
      auto vhat = p->adam_v.array() / static_cast<S>(bc2);
      p->value.array() -= static_cast<S>(lr) * (mhat / (vhat.sqrt() + static_cast<S>(eps_)) +
                                                static_cast<S>(weight_decay_) * p->value.array());
    }
  }

  long steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, weight_decay_, eps_;
  long t_ = 0;
};

template <class S>
inline void zero_grads(std::vector<Param<S>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace osf::nn
