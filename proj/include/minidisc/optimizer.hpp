#pragma once

// AdamW with linear warmup then linear decay. An element is only touched
// once it has seen a nonzero gradient or carries momentum, so parameters a
// candidate mask hides are left exactly as initialized.

#include "minidisc/model.hpp"

#include <cmath>
#include <vector>

namespace minidisc {

class AdamW {
 public:
  AdamW(ParamStore& store, double lr, double weight_decay, size_t total_steps,
        double warmup_fraction)
      : store_(&store),
        lr_(lr),
        weight_decay_(weight_decay),
        total_steps_(total_steps),
        warmup_steps_(size_t(std::ceil(warmup_fraction * double(total_steps)))) {
    m_.resize(store.params().size());
    v_.resize(store.params().size());
    for (size_t i = 0; i < m_.size(); ++i) {
      m_[i].assign(store.params()[i].numel(), 0.f);
      v_[i].assign(store.params()[i].numel(), 0.f);
    }
  }

  double current_lr() const {
    if (total_steps_ == 0) return lr_;
    double t = double(t_);
    if (warmup_steps_ > 0 && t < double(warmup_steps_)) return lr_ * t / double(warmup_steps_);
    if (total_steps_ <= warmup_steps_) return lr_;
    double progress = (t - double(warmup_steps_)) / double(total_steps_ - warmup_steps_);
    return lr_ * std::max(0.0, 1.0 - progress);
  }

  void step() {
    ++t_;
    const double lr_t = current_lr();
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bias1 = 1.0 - std::pow(b1, double(t_));
    const double bias2 = 1.0 - std::pow(b2, double(t_));
    auto& params = store_->params();
    for (size_t i = 0; i < params.size(); ++i) {
      auto& value = *params[i].value;
      auto& grad = *params[i].grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < value.size(); ++j) {
        float g = grad[j];
        if (g == 0.f && m[j] == 0.f && v[j] == 0.f) continue;  // untouched slice
        m[j] = float(b1 * m[j] + (1.0 - b1) * g);
        v[j] = float(b2 * v[j] + (1.0 - b2) * double(g) * double(g));
        double mhat = m[j] / bias1;
        double vhat = v[j] / bias2;
        value[j] = float(value[j] - lr_t * (mhat / (std::sqrt(vhat) + eps) +
                                            weight_decay_ * value[j]));
      }
    }
    store_->zero_grads();
  }

  size_t steps_taken() const { return t_; }

 private:
  ParamStore* store_;
  double lr_;
  double weight_decay_;
  size_t total_steps_;
  size_t warmup_steps_;
  size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace minidisc
