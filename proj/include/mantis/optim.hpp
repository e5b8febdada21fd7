#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mantis/tensor.hpp"

namespace mantis {

// Cosine-annealed learning rate with a linear warm-up.
struct LrSchedule {
  float base_lr = 2e-4f;
  int total_epochs = 100;
  int warmup_epochs = 10;
};

inline float lr_at(const LrSchedule& s, int epoch) {
  if (s.base_lr <= 0 || s.warmup_epochs < 0 || s.warmup_epochs >= s.total_epochs)
    throw std::invalid_argument("lr_at: invalid schedule");
  if (epoch < 0 || epoch > s.total_epochs)
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(s.total_epochs) +
                                "]");
  if (epoch < s.warmup_epochs)
    return s.base_lr * static_cast<float>(epoch + 1) /
           static_cast<float>(s.warmup_epochs);
  const double progress = double(epoch - s.warmup_epochs) /
                          double(s.total_epochs - s.warmup_epochs);
  return static_cast<float>(0.5 * double(s.base_lr) *
                            (1.0 + std::cos(M_PI * progress)));
}

struct AdamWConfig {
  float lr = 2e-4f;
  float weight_decay = 0.05f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// AdamW with decoupled weight decay: the decay term is applied to the
// parameter directly (scaled by lr), never mixed into the moment estimates.
template <class S>
class AdamW {
 public:
  AdamW(std::vector<BasicTensor<S>> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr <= 0) throw std::invalid_argument("adamw: lr must be > 0");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].numel(), S(0));
      v_[i].assign(params_[i].numel(), S(0));
    }
  }

  void set_lr(float lr) {
    if (lr < 0) throw std::invalid_argument("adamw: lr must be >= 0");
    cfg_.lr = lr;
  }
  float lr() const { return cfg_.lr; }
  long step_count() const { return step_; }
  const std::vector<BasicTensor<S>>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update from the gradients currently stored on the parameters.
  // Parameters whose grad buffer is empty are treated as zero-gradient.
  void step() {
    ++step_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(step_));
    const double bc2 = 1.0 - std::pow(b2, double(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const std::size_t n = p.numel();
      const S* g = p.grad().empty() ? nullptr : p.grad().data();
      S* w = p.data();
      S* m = m_[i].data();
      S* v = v_[i].data();
      for (std::size_t j = 0; j < n; ++j) {
        const double gj = g ? double(g[j]) : 0.0;
        const double mj = b1 * double(m[j]) + (1.0 - b1) * gj;
        const double vj = b2 * double(v[j]) + (1.0 - b2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        const double update = mhat / (std::sqrt(vhat) + double(cfg_.eps)) +
                              double(cfg_.weight_decay) * double(w[j]);
        w[j] = static_cast<S>(double(w[j]) - double(cfg_.lr) * update);
      }
    }
  }

 private:
  std::vector<BasicTensor<S>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<S>> m_;
  std::vector<std::vector<S>> v_;
  long step_ = 0;
};

}  // namespace mantis
