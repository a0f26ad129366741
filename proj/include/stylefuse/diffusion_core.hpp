#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "stylefuse/autograd.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/tensor.hpp"

namespace stylefuse {

// Cumulative signal coefficients alpha_t in (0,1], non-increasing, t = 1..T.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    static NoiseSchedule from_alphas(std::vector<double> alphas) {
        if (alphas.empty()) throw ConfigError("noise schedule: empty alpha sequence");
        double prev = 1.0;
        for (double a : alphas) {
            if (!(a > 0.0) || a > 1.0)
                throw ConfigError("noise schedule: alpha values must lie in (0,1]");
            if (a > prev + 1e-12)
                throw ConfigError("noise schedule: alpha must be non-increasing");
            prev = a;
        }
        NoiseSchedule s;
        s.alphas_ = std::move(alphas);
        return s;
    }

    // geometric alpha_bar decay between two endpoints; keeps the
    // signal-to-noise ratio in a usable band at every timestep
    static NoiseSchedule geometric(int timesteps, double alpha_first = 0.8,
                                   double alpha_last = 0.02) {
        if (timesteps < 1) throw ConfigError("noise schedule: timesteps must be positive");
        if (!(alpha_first > 0.0) || alpha_first > 1.0 || !(alpha_last > 0.0) ||
            alpha_last > alpha_first)
            throw ConfigError("noise schedule: need 0 < alpha_last <= alpha_first <= 1");
        std::vector<double> alphas(static_cast<size_t>(timesteps));
        for (int t = 0; t < timesteps; ++t) {
            double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
            alphas[static_cast<size_t>(t)] =
                alpha_first * std::pow(alpha_last / alpha_first, frac);
        }
        return from_alphas(std::move(alphas));
    }

    // standard scaled-linear beta schedule, accumulated to alpha_bar
    static NoiseSchedule scaled_linear(int timesteps, double beta_start = 0.00085,
                                       double beta_end = 0.012) {
        if (timesteps < 1) throw ConfigError("noise schedule: timesteps must be positive");
        std::vector<double> alphas(static_cast<size_t>(timesteps));
        double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
        double acc = 1.0;
        for (int t = 0; t < timesteps; ++t) {
            double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / (timesteps - 1);
            double beta = (s0 + (s1 - s0) * frac) * (s0 + (s1 - s0) * frac);
            acc *= 1.0 - beta;
            alphas[static_cast<size_t>(t)] = acc;
        }
        return from_alphas(std::move(alphas));
    }

    int timesteps() const { return static_cast<int>(alphas_.size()); }

    double alpha(int t) const {
        if (t < 1 || t > timesteps())
            throw std::domain_error("timestep " + std::to_string(t) + " outside [1, " +
                                    std::to_string(timesteps()) + "]");
        return alphas_[static_cast<size_t>(t - 1)];
    }

    const std::vector<double>& alphas() const { return alphas_; }

    uint64_t hash() const {
        return fnv1a64(alphas_.data(), alphas_.size() * sizeof(double));
    }

private:
    std::vector<double> alphas_;
};

// Latent + timestep; carries the noise realization that produced it so loss
// targets never have to be re-derived. t = 0 marks a clean latent.
struct LatentState {
    Tensor z;
    int t = 0;
    std::optional<Tensor> eps;
};

// z = sqrt(a_t) x0 + sqrt(1 - a_t) eps
inline LatentState forward_noise(const Tensor& x0, int t, const Tensor& eps,
                                 const NoiseSchedule& sched) {
    if (!x0.same_shape(eps))
        throw std::domain_error("forward_noise: eps shape " + shape_str(eps.shape()) +
                                " does not match latent " + shape_str(x0.shape()));
    double a  = sched.alpha(t);
    double sa = std::sqrt(a), se = std::sqrt(1.0 - a);
    Tensor z(x0.shape());
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = sa * x0[i] + se * eps[i];
    return LatentState{std::move(z), t, eps};
}

// x0_hat = (z - sqrt(1 - a_t) eps_pred) / sqrt(a_t)
inline Tensor tweedie_estimate(const LatentState& state, const Tensor& eps_pred,
                               const NoiseSchedule& sched) {
    if (!state.z.same_shape(eps_pred))
        throw std::domain_error("tweedie_estimate: shape mismatch");
    double a = sched.alpha(state.t);
    if (a <= 0.0) throw std::domain_error("tweedie_estimate: alpha_t must be positive");
    double sa = std::sqrt(a), se = std::sqrt(1.0 - a);
    Tensor x0(state.z.shape());
    for (int64_t i = 0; i < x0.numel(); ++i) x0[i] = (state.z[i] - se * eps_pred[i]) / sa;
    return x0;
}

// differentiable Tweedie path; z enters as a constant, gradients flow through eps_pred
inline ag::Var tweedie_estimate_var(const Tensor& z, int t, const ag::Var& eps_pred,
                                    const NoiseSchedule& sched) {
    double a = sched.alpha(t);
    if (a <= 0.0) throw std::domain_error("tweedie_estimate: alpha_t must be positive");
    double sa = std::sqrt(a), se = std::sqrt(1.0 - a);
    return ag::scale(ag::sub(ag::constant(z), ag::scale(eps_pred, se)), 1.0 / sa);
}

}  // namespace stylefuse
