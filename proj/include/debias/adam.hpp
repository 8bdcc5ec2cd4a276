#pragma once

// Adam with bias correction. Constant learning rate; no weight decay.

#include <cmath>
#include <cstdint>
#include <vector>

#include "debias/tensor.hpp"

namespace debias {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// One parameter's update; t is the 1-based step count after incrementing.
template <typename Real>
void adam_step(Real* param, const Real* grad, Real* m, Real* v, int64_t n, int64_t t,
               const AdamConfig& cfg) {
    if (!(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1))
        throw ConfigError("adam_step: betas must lie in [0,1)");
    const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
    const Real bc1 = Real(1) - static_cast<Real>(std::pow(cfg.beta1, static_cast<double>(t)));
    const Real bc2 = Real(1) - static_cast<Real>(std::pow(cfg.beta2, static_cast<double>(t)));
    const Real lr = static_cast<Real>(cfg.lr), eps = static_cast<Real>(cfg.epsilon);
    for (int64_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (Real(1) - b1) * grad[i];
        v[i] = b2 * v[i] + (Real(1) - b2) * grad[i] * grad[i];
        const Real mhat = m[i] / bc1;
        const Real vhat = v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

// Optimizer over a fixed set of parameter tensors. Moment buffers are laid
// out in registration order; exposed flat for checkpointing.
template <typename Real>
class AdamT {
  public:
    AdamT() = default;
    AdamT(std::vector<TensorT<Real>> params, AdamConfig cfg) : cfg_(cfg), params_(std::move(params)) {
        for (auto& p : params_) {
            m_.emplace_back(static_cast<size_t>(p.numel()), Real(0));
            v_.emplace_back(static_cast<size_t>(p.numel()), Real(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            p.ensure_grad();
            if (m_[i].size() != p.data().size())
                throw ShapeError("adam: moment buffer size " + std::to_string(m_[i].size()) +
                                 " != param size " + std::to_string(p.data().size()));
            adam_step(p.ptr(), p.grad().data(), m_[i].data(), v_[i].data(), p.numel(), t_, cfg_);
        }
    }

    int64_t step_count() const { return t_; }
    void set_step_count(int64_t t) { t_ = t; }
    const AdamConfig& config() const { return cfg_; }
    size_t n_params() const { return params_.size(); }
    std::vector<Real>& moment1(size_t i) { return m_[i]; }
    std::vector<Real>& moment2(size_t i) { return v_[i]; }

  private:
    AdamConfig cfg_;
    std::vector<TensorT<Real>> params_;
    std::vector<std::vector<Real>> m_, v_;
    int64_t t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace debias
