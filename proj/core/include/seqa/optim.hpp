#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "seqa/error.hpp"
#include "seqa/tensor.hpp"

namespace seqa::opt {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; applied with the scheduled lr
  int warmup_steps = 0;       // linear ramp from zero over this many steps
  int halve_every = 0;        // step decay: lr is halved every halve_every steps
};

// Adam with optional linear warmup and step-halving decay. Moment buffers
// are keyed by position in the parameter list, so the caller must pass the
// same parameters in the same order on every update.
class Adam {
 public:
  Adam(const std::vector<Tensor*>& params, const AdamConfig& cfg) : cfg_(cfg) {
    require(cfg.lr > 0.0, "adam: lr must be positive");
    require(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0,
            "adam: betas must lie in [0, 1)");
    for (const Tensor* p : params) {
      m1_.emplace_back(p->numel(), 0.0);
      m2_.emplace_back(p->numel(), 0.0);
    }
  }

  long step() const { return step_; }

  // Learning rate the next update() call will apply.
  double next_lr() const { return scheduled_lr(step_ + 1); }

  // A null grad pointer means "no gradient reached this parameter"; the
  // entry is skipped and its moments stay untouched.
  void update(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    require(params.size() == m1_.size() && grads.size() == m1_.size(),
            "adam: parameter list changed size");
    ++step_;
    const double lr_t = scheduled_lr(step_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!grads[i]) continue;
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      require(g.numel() == m1_[i].size(), "adam: gradient size mismatch");
      for (std::size_t j = 0; j < p.numel(); ++j) {
        m1_[i][j] = cfg_.beta1 * m1_[i][j] + (1.0 - cfg_.beta1) * g[j];
        m2_[i][j] = cfg_.beta2 * m2_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mh = m1_[i][j] / c1;
        const double vh = m2_[i][j] / c2;
        p[j] -= lr_t * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p[j]);
      }
    }
  }

 private:
  double scheduled_lr(long step) const {
    double lr = cfg_.lr;
    if (cfg_.warmup_steps > 0)
      lr *= std::min(1.0, static_cast<double>(step) / cfg_.warmup_steps);
    if (cfg_.halve_every > 0) lr *= std::pow(0.5, static_cast<double>((step - 1) / cfg_.halve_every));
    return lr;
  }

  AdamConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<double>> m1_, m2_;
};

}  // namespace seqa::opt
