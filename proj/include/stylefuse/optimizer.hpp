#pragma once

#include <cmath>
#include <vector>

#include "stylefuse/autograd.hpp"

namespace stylefuse {

// AdamW: adaptive moments with decoupled weight decay. Parameters whose grad
// was never allocated in the current accumulation window are skipped.
class AdamW {
public:
    struct Group {
        std::vector<ag::Var> params;
        double lr;
    };

    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void add_group(std::vector<ag::Var> params, double lr) {
        for (auto& p : params) {
            states_.push_back({p, lr, Tensor(p->value.shape()), Tensor(p->value.shape())});
        }
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, t_);
        double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& s : states_) {
            if (!s.param->grad.same_shape(s.param->value)) continue;  // no grad this window
            Tensor& g = s.param->grad;
            Tensor& w = s.param->value;
            for (int64_t i = 0; i < w.numel(); ++i) {
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
                double mhat = s.m[i] / bc1;
                double vhat = s.v[i] / bc2;
                w[i] -= s.lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
            }
        }
    }

    void zero_grad() {
        for (auto& s : states_) s.param->grad = Tensor();
    }

    int64_t step_count() const { return t_; }

private:
    struct State {
        ag::Var param;
        double lr;
        Tensor m, v;
    };
    double beta1_, beta2_, eps_, wd_;
    int64_t t_ = 0;
    std::vector<State> states_;
};

}  // namespace stylefuse
