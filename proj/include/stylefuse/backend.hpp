#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "stylefuse/autograd.hpp"
#include "stylefuse/diffusion_core.hpp"
#include "stylefuse/lora.hpp"
#include "stylefuse/prompt.hpp"

namespace stylefuse {

// Cross-attention maps captured during one denoiser pass: one (h,w) map per
// recorded token per layer, post-softmax, head-averaged, pre-V. `full_rows`
// keeps the unsliced softmax rows so the simplex property stays checkable.
struct AttentionRecord {
    std::vector<std::pair<int, int>> layer_resolutions;  // (h, w) per layer
    int key_dim = 0;                                     // d used in the 1/sqrt(d) scaling
    std::map<int, std::vector<ag::Var>> token_maps;      // token index -> per-layer map
    std::vector<Tensor> full_rows;                       // per-layer (h*w x L), detached

    bool empty() const { return token_maps.empty(); }
    int layer_count() const { return static_cast<int>(layer_resolutions.size()); }
};

struct DenoiseResult {
    ag::Var eps;             // predicted noise, same shape as the input latent
    AttentionRecord record;  // empty unless tokens were requested
};

// Contract every diffusion engine (toy or real adapter) satisfies: codec,
// text encoding with special-token injection, denoising with attention
// recording, schedule + downscale factor, and LoRA-able projections.
class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    virtual const NoiseSchedule& schedule() const = 0;
    virtual int downscale_factor() const          = 0;

    virtual Tensor encode_image(const Tensor& image)  = 0;
    virtual Tensor decode_latent(const Tensor& z)     = 0;
    virtual ag::Var decode_latent_var(const ag::Var& z) = 0;

    // resolves words against the vocabulary and registered special tokens
    virtual PromptSpec encode_prompt(const std::string& text) = 0;

    virtual DenoiseResult denoise(const Tensor& z, int t, const PromptSpec& prompt,
                                  const std::set<int>& record_tokens = {}) = 0;

    // special-token concepts (learnable embedding rows)
    virtual void register_concept(const std::string& concept_id, const std::string& token) = 0;
    virtual ag::Var concept_embedding(const std::string& concept_id)                       = 0;
    virtual std::vector<std::string> concept_ids() const                                   = 0;

    // cross-attention projection weights, the LoRA attachment surface
    virtual ProjectionRegistry& projections() = 0;

    // frozen-parameter identity, for freeze contracts and checkpoint manifests
    virtual uint64_t base_param_hash() const = 0;
};

}  // namespace stylefuse
