#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stylefuse/backend.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/random.hpp"

namespace stylefuse {

struct GenerationRequest {
    std::string prompt_text;
    int num_images                        = 1;
    double guidance_scale                 = 7.5;
    int num_denoise_steps                 = 50;
    uint64_t seed                         = 0;
    std::vector<std::string> postprocess;  // applied in order after decoding

    void validate() const {
        if (num_images < 1) throw ConfigError("num_images must be >= 1");
        if (num_denoise_steps < 1) throw ConfigError("num_denoise_steps must be >= 1");
    }
};

// strided DDIM-style timestep ladder, descending, ending at 1
inline std::vector<int> sampling_timesteps(int total, int steps) {
    steps = std::min(steps, total);
    std::vector<int> ts;
    for (int k = 0; k < steps; ++k) {
        int t = total - (k * total) / steps;
        if (ts.empty() || t < ts.back()) ts.push_back(std::max(1, t));
    }
    if (ts.back() != 1) ts.push_back(1);
    return ts;
}

// Deterministic (eta = 0) sampling with classifier-free guidance as a scalar
// pass-through. Each image index derives its own noise stream from the seed.
inline Tensor sample_latent(DiffusionBackend& backend, const PromptSpec& prompt,
                            const GenerationRequest& req, const Shape& latent_shape,
                            int image_index) {
    ag::NoGradGuard off;
    const NoiseSchedule& sched = backend.schedule();
    Rng rng  = Rng(req.seed).child(static_cast<uint64_t>(image_index));
    Tensor z = rng.normal_tensor(latent_shape);

    PromptSpec uncond;
    bool cfg = std::fabs(req.guidance_scale - 1.0) > 1e-12;
    if (cfg) uncond = backend.encode_prompt("");

    auto ts = sampling_timesteps(sched.timesteps(), req.num_denoise_steps);
    for (size_t k = 0; k < ts.size(); ++k) {
        int t        = ts[k];
        Tensor eps   = backend.denoise(z, t, prompt).eps->value;
        if (cfg) {
            Tensor eps_u = backend.denoise(z, t, uncond).eps->value;
            for (int64_t i = 0; i < eps.numel(); ++i)
                eps[i] = eps_u[i] + req.guidance_scale * (eps[i] - eps_u[i]);
        }
        double a  = sched.alpha(t);
        double sa = std::sqrt(a), se = std::sqrt(1.0 - a);
        Tensor x0(z.shape());
        for (int64_t i = 0; i < z.numel(); ++i) x0[i] = (z[i] - se * eps[i]) / sa;

        double a_prev = k + 1 < ts.size() ? sched.alpha(ts[k + 1]) : 1.0;
        double sap = std::sqrt(a_prev), sep = std::sqrt(1.0 - a_prev);
        for (int64_t i = 0; i < z.numel(); ++i) z[i] = sap * x0[i] + sep * eps[i];
    }
    return z;  // ends at alpha = 1, i.e. the clean estimate
}

inline std::vector<Tensor> generate_images(DiffusionBackend& backend, const PromptSpec& prompt,
                                           const GenerationRequest& req, const Shape& latent_shape) {
    req.validate();
    std::vector<Tensor> out;
    for (int i = 0; i < req.num_images; ++i)
        out.push_back(backend.decode_latent(sample_latent(backend, prompt, req, latent_shape, i)));
    return out;
}

}  // namespace stylefuse
