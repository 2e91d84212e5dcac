#pragma once

#include "m2iv/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace m2iv {

/// AdamW with decoupled weight decay over a flat parameter space. Callers
/// update disjoint slices with their own learning rate and decay, which is
/// how parameter groups are expressed.
template <typename Real>
class AdamW {
   public:
    explicit AdamW(std::size_t size, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : m_(size, 0.0), v_(size, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void begin_step() { ++t_; }
    long steps() const { return t_; }

    void update(std::size_t offset, Real* param, const Real* grad, std::size_t n, double lr, double weight_decay) {
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < n; ++i) {
            double g = static_cast<double>(grad[i]);
            double& m = m_[offset + i];
            double& v = v_[offset + i];
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = beta2_ * v + (1.0 - beta2_) * g * g;
            double p = static_cast<double>(param[i]);
            p *= 1.0 - lr * weight_decay;
            p -= lr * (m / c1) / (std::sqrt(v / c2) + eps_);
            param[i] = static_cast<Real>(p);
        }
    }

   private:
    std::vector<double> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

/// Learning-rate multiplier rising linearly from `factor` to 1 over the first
/// `fraction` of `total_steps`, then flat.
inline double warmup_multiplier(long step, long total_steps, double factor, double fraction = 0.1) {
    long warm = std::max<long>(1, static_cast<long>(std::ceil(fraction * static_cast<double>(total_steps))));
    if (step >= warm) return 1.0;
    return factor + (1.0 - factor) * static_cast<double>(step) / static_cast<double>(warm);
}

}  // namespace m2iv
