#pragma once

#include <optional>
#include <vector>

#include "stylefuse/autograd.hpp"
#include "stylefuse/backend.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/mask.hpp"
#include "stylefuse/plugins.hpp"

namespace stylefuse {

struct LossWeights {
    double lambda_id     = 1.0;
    double lambda_attn   = 2.5;
    double lambda_ssim   = 0.1;
    double lambda_contra = 0.2;
    double lambda_style  = 2.0;

    void validate() const {
        if (lambda_id < 0 || lambda_attn < 0 || lambda_ssim < 0 || lambda_contra < 0 ||
            lambda_style < 0)
            throw ConfigError("loss weights must be non-negative");
    }
};

// || (eps_true - eps_pred) . M ||^2 / numel, the mask broadcast across
// channels. Count normalization (not mask area) keeps magnitudes comparable
// across mask sizes.
inline ag::Var masked_reconstruction_loss(const Tensor& eps_true, const ag::Var& eps_pred,
                                          const Tensor& mask) {
    if (!eps_true.same_shape(eps_pred->value))
        throw std::domain_error("masked loss: eps shape mismatch " + shape_str(eps_true.shape()) +
                                " vs " + shape_str(eps_pred->value.shape()));
    if (mask.ndim() != 2 || mask.dim(0) != eps_true.dim(1) || mask.dim(1) != eps_true.dim(2))
        throw std::domain_error("masked loss: mask " + shape_str(mask.shape()) +
                                " does not match latent grid");
    int C = eps_true.dim(0);
    Tensor bcast(eps_true.shape());
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < mask.dim(0); ++y)
            for (int x = 0; x < mask.dim(1); ++x) {
                double m = mask.at(y, x);
                if (m != 0.0 && m != 1.0) throw std::domain_error("masked loss: mask not binary");
                bcast.at(c, y, x) = m;
            }
    ag::Var diff = ag::sub(ag::constant(eps_true), eps_pred);
    ag::Var sq   = ag::square(ag::mul(diff, ag::constant(bcast)));
    return ag::mean(sq);
}

// Composed-prompt variant: the reference latent's noise is the pseudo-label
// and conditioning comes from the composed prompt. Same functional form.
inline ag::Var composed_masked_loss(const Tensor& eps_true_reference, const ag::Var& eps_pred_composed,
                                    const Tensor& reference_nonface_mask) {
    return masked_reconstruction_loss(eps_true_reference, eps_pred_composed, reference_nonface_mask);
}

// 1 - cos(R(B(x0_hat)), R(B(source))); absent when no face is detected in
// x0_hat. Gradients flow through the crop and recognizer into x0_hat.
inline std::optional<ag::Var> identity_loss(const ag::Var& x0_hat_image, const Tensor& source_image,
                                            const IdentityEmbedder& embedder) {
    auto gen = embedder.embed(x0_hat_image);
    if (!gen) return std::nullopt;
    auto src = embedder.embed_plain(source_image);
    if (!src) return std::nullopt;
    ag::Var cos = ag::dot(*gen, ag::constant(*src));  // embeddings are unit norm
    return ag::add_scalar(ag::neg(cos), 1.0);
}

// min-max scaling to [0,1] with the statistics detached; constant maps
// (range < 1e-8) scale to all-zeros so they cannot be penalized
inline ag::Var scale_map_unit(const ag::Var& map) {
    double lo = map->value.min(), hi = map->value.max();
    if (hi - lo < 1e-8) return ag::constant(Tensor(map->value.shape(), 0.0));
    return ag::scale(ag::add_scalar(map, -lo), 1.0 / (hi - lo));
}

struct ArTarget {
    int token_position = -1;     // index k of the special token in the prompt
    const RegionMask* mask = nullptr;  // region the token should attend to
};

// || (S(A_k) - M_v) . not(M_v) ||^2 averaged over penalized positions,
// layers, and tokens. Only positions with M_v = 0 carry loss or gradient.
inline ag::Var attention_refocusing_loss(const AttentionRecord& record,
                                         const std::vector<ArTarget>& targets) {
    if (targets.empty()) throw ConfigError("attention refocusing: no targets");
    if (record.empty()) throw ConfigError("attention refocusing: record has no maps");
    std::vector<ag::Var> terms;
    for (const auto& tgt : targets) {
        if (!tgt.mask) throw ConfigError("attention refocusing: target without mask");
        auto it = record.token_maps.find(tgt.token_position);
        if (it == record.token_maps.end())
            throw ConfigError("attention refocusing: token " + std::to_string(tgt.token_position) +
                              " was not recorded");
        for (size_t l = 0; l < it->second.size(); ++l) {
            auto [h, w] = record.layer_resolutions[l];
            if (tgt.mask->height() < h || tgt.mask->width() < w)
                throw ConfigError("attention refocusing: no mask available at layer resolution " +
                                  std::to_string(h) + "x" + std::to_string(w));
            const Tensor& m = tgt.mask->resample(h, w);
            Tensor penal(m.shape());
            int64_t count = 0;
            for (int64_t i = 0; i < m.numel(); ++i) {
                penal[i] = m[i] == 0.0 ? 1.0 : 0.0;
                count += m[i] == 0.0 ? 1 : 0;
            }
            if (count == 0) {
                terms.push_back(ag::constant(Tensor::scalar(0.0)));
                continue;
            }
            ag::Var s      = scale_map_unit(it->second[l]);
            ag::Var masked = ag::mul(ag::reshape(s, {h, w}), ag::constant(penal));
            terms.push_back(ag::scale(ag::sum(ag::square(masked)), 1.0 / static_cast<double>(count)));
        }
    }
    return ag::scale(ag::add_all(terms), 1.0 / static_cast<double>(terms.size()));
}

struct StructureStyleLosses {
    ag::Var ssim;
    ag::Var contra;
    ag::Var style;
};

// Supplement's general-object composed losses. `ssim` compares
// self-similarity matrices against the source, `contra` is a patchwise
// InfoNCE between source and estimate keys, `style` matches the global
// embedding of the reference.
inline StructureStyleLosses structure_style_losses(const ag::Var& x0_hat_image,
                                                   const Tensor& source_image,
                                                   const Tensor& reference_image,
                                                   FeatureExtractor& extractor,
                                                   double temperature = 0.07) {
    StructureStyleLosses out;

    ag::Var ss_gen = extractor.self_similarity(x0_hat_image);
    Tensor ss_src;
    {
        ag::NoGradGuard off;
        ss_src = extractor.self_similarity(ag::constant(source_image))->value;
    }
    out.ssim = ag::mean(ag::square(ag::sub(ss_gen, ag::constant(ss_src))));

    ag::Var keys_gen = extractor.patch_keys(x0_hat_image);  // unit rows
    Tensor keys_src;
    {
        ag::NoGradGuard off;
        keys_src = extractor.patch_keys(ag::constant(source_image))->value;
    }
    ag::Var logits = ag::scale(ag::matmul_nt(keys_gen, ag::constant(keys_src)), 1.0 / temperature);
    ag::Var probs  = ag::softmax_rows(logits);
    ag::Var diag   = ag::diagonal(probs);
    out.contra     = ag::neg(ag::mean(ag::log(ag::add_scalar(diag, 1e-12))));

    ag::Var g_gen = extractor.global_embedding(x0_hat_image);
    Tensor g_ref;
    {
        ag::NoGradGuard off;
        g_ref = extractor.global_embedding(ag::constant(reference_image))->value;
    }
    out.style = ag::mean(ag::square(ag::sub(g_gen, ag::constant(g_ref))));
    return out;
}

}  // namespace stylefuse
