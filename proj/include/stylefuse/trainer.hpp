#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stylefuse/backend.hpp"
#include "stylefuse/checkpoint.hpp"
#include "stylefuse/diffusion_core.hpp"
#include "stylefuse/losses.hpp"
#include "stylefuse/mask.hpp"
#include "stylefuse/optimizer.hpp"
#include "stylefuse/plugins.hpp"

namespace stylefuse {

inline std::vector<std::string> default_composed_templates() {
    return {
        "a photo of {src} person in the {ref} style",
        "a photo of {src} person in the {ref} style, best quality",
        "a portrait of {src} person in the {ref} style",
        "a close-up photo of {src} person in the {ref} style",
        "a detailed photo of {src} person in the {ref} style",
        "a photo of {src} person in the {ref} style, studio lighting",
        "a picture of {src} person in the {ref} style",
        "a high quality photo of {src} person in the {ref} style",
    };
}

struct TrainConfig {
    int phase1_steps              = 1200;
    double phase1_lr_embeddings   = 5e-4;
    int phase2_steps              = 1500;
    double phase2_lr_lora         = 1e-4;
    double phase2_lr_embeddings   = 1e-5;
    int batch_size                = 1;
    int grad_accum                = 4;
    LossWeights weights;
    double t_id_max_frac          = 0.6;  // T' as a fraction of T
    std::array<double, 3> task_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // source, reference, composed
    uint64_t seed                 = 0;
    std::vector<std::string> prompt_templates = default_composed_templates();
    std::string source_template    = "a photo of {src} person";
    std::string reference_template = "a photo of a person in the {ref} style";
    int lora_rank                  = 4;
    double lora_scale_qk           = 8.0;   // adapter scale on the q/k projections
    double lora_scale_vo           = 1.0;   // adapter scale on the v/out projections
    double lora_v_init_std         = 0.01;
    double weight_decay            = 0.0;
    double identity_skip_max_rate  = 0.8;
    int identity_skip_warmup       = 20;  // eligible steps before the rate is enforced
    bool general_object            = false;  // adds ssim/contra/style terms on composed tasks

    void validate() const {
        if (phase1_steps < 0 || phase2_steps < 0) throw ConfigError("step counts must be >= 0");
        if (phase1_lr_embeddings <= 0 || phase2_lr_lora <= 0 || phase2_lr_embeddings <= 0)
            throw ConfigError("learning rates must be positive");
        if (batch_size < 1 || grad_accum < 1) throw ConfigError("batch/accum must be >= 1");
        double mix = task_mix[0] + task_mix[1] + task_mix[2];
        if (std::abs(mix - 1.0) > 1e-9) throw ConfigError("task_mix must sum to 1");
        for (double m : task_mix)
            if (m < 0) throw ConfigError("task_mix entries must be >= 0");
        if (!(t_id_max_frac > 0.0 && t_id_max_frac < 1.0))
            throw ConfigError("t_id_max_frac must lie in (0,1)");
        if (identity_skip_max_rate < 0 || identity_skip_max_rate > 1)
            throw ConfigError("identity_skip_max_rate must lie in [0,1]");
        weights.validate();
    }
};

// One concept: its token, its images (with cached latents) and both mask
// polarities per image. Face masks steer the subject token, their
// complements steer the style token.
struct ConceptSpec {
    std::string id;     // "source" | "reference"
    std::string token;  // special token string, e.g. "<v1>"
    std::vector<Tensor> images;
    std::vector<RegionMask> face_masks;     // facial region per image
    std::vector<RegionMask> nonface_masks;  // complements
    std::vector<Tensor> latents;            // filled by the trainer

    void validate() const {
        if (images.empty()) throw ValidationError("concept '" + id + "' has no images");
        if (face_masks.size() != images.size() || nonface_masks.size() != images.size())
            throw ValidationError("concept '" + id + "': images and masks are not aligned");
    }

    // the concept's own reconstruction mask: M_s for source, M_r for reference
    const RegionMask& region_mask(size_t i) const {
        return id == "source" ? face_masks[i] : nonface_masks[i];
    }
};

enum class TaskKind { Source, Reference, Composed };

inline const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::Source: return "source";
        case TaskKind::Reference: return "reference";
        default: return "composed";
    }
}

struct TaskSample {
    TaskKind kind      = TaskKind::Source;
    int image_index    = 0;
    int template_index = -1;  // composed only
};

// Phase 1 admits only source/reference; the mix renormalizes over the
// admissible set. Template choice is uniform.
inline TaskSample sample_task(int phase, const TrainConfig& cfg, size_t n_source, size_t n_reference,
                              Rng& rng) {
    bool composed_ok = phase >= 2 && cfg.task_mix[2] > 0.0;
    if (composed_ok && cfg.prompt_templates.empty())
        throw ConfigError("composed task enabled but prompt_templates is empty");
    double w0 = cfg.task_mix[0], w1 = cfg.task_mix[1], w2 = composed_ok ? cfg.task_mix[2] : 0.0;
    double total = w0 + w1 + w2;
    if (total <= 0.0) throw ConfigError("task_mix admits no task in this phase");
    double u = rng.uniform() * total;

    TaskSample s;
    if (u < w0) {
        s.kind        = TaskKind::Source;
        s.image_index = rng.uniform_int(0, static_cast<int>(n_source) - 1);
    } else if (u < w0 + w1) {
        s.kind        = TaskKind::Reference;
        s.image_index = rng.uniform_int(0, static_cast<int>(n_reference) - 1);
    } else {
        s.kind           = TaskKind::Composed;
        s.image_index    = rng.uniform_int(0, static_cast<int>(n_reference) - 1);
        s.template_index = rng.uniform_int(0, static_cast<int>(cfg.prompt_templates.size()) - 1);
    }
    return s;
}

struct MicroStepLog {
    int phase = 0;
    int step  = 0;
    int micro = 0;
    std::string task;
    int t    = 0;
    int t_id = -1;
    double total = 0.0;
    std::map<std::string, double> terms;
    bool id_skipped = false;
};

inline json microstep_to_json(const MicroStepLog& m, const LossWeights& w) {
    json j;
    j["phase"] = m.phase;
    j["step"]  = m.step;
    j["micro"] = m.micro;
    j["task"]  = m.task;
    j["t"]     = m.t;
    if (m.t_id >= 0) j["t_id"] = m.t_id;
    j["loss"]  = m.total;
    j["terms"] = m.terms;
    if (m.id_skipped) j["id_skipped"] = true;
    j["weights"] = {{"id", w.lambda_id},
                    {"attn", w.lambda_attn},
                    {"ssim", w.lambda_ssim},
                    {"contra", w.lambda_contra},
                    {"style", w.lambda_style}};
    return j;
}

// Two-phase optimization driver. Phase 1 trains only the special-token
// embeddings on the masked source/reference objectives; phase 2 adds
// zero-init LoRA on the cross-attention projections, the composed task with
// reference pseudo-labels, the identity term on the Tweedie estimate, and
// attention refocusing on every task.
class Trainer {
public:
    using TraceSink = std::function<void(const MicroStepLog&)>;

    Trainer(DiffusionBackend& backend, TrainConfig cfg, ConceptSpec source, ConceptSpec reference,
            IdentityEmbedder identity, FeatureExtractor* extractor = nullptr)
        : backend_(backend),
          cfg_(std::move(cfg)),
          source_(std::move(source)),
          reference_(std::move(reference)),
          identity_(std::move(identity)),
          extractor_(extractor),
          master_(cfg_.seed) {
        cfg_.validate();
        source_.validate();
        reference_.validate();
        if (source_.id != "source" || reference_.id != "reference")
            throw ConfigError("concept ids must be 'source' and 'reference'");
        for (const auto& id : {source_.id, reference_.id})
            (void)backend_.concept_embedding(id);  // must be registered

        encode_all(source_);
        encode_all(reference_);

        source_prompt_    = backend_.encode_prompt(substitute_template(
            cfg_.source_template, {{"src", source_.token}}));
        reference_prompt_ = backend_.encode_prompt(substitute_template(
            cfg_.reference_template, {{"ref", reference_.token}}));
        for (const auto& tmpl : cfg_.prompt_templates)
            composed_prompts_.push_back(backend_.encode_prompt(substitute_template(
                tmpl, {{"src", source_.token}, {"ref", reference_.token}})));
        if (cfg_.general_object && !extractor_)
            throw ConfigError("general_object mode requires a feature extractor");
    }

    void set_trace_sink(TraceSink sink) { sink_ = std::move(sink); }
    const std::vector<MicroStepLog>& history() const { return history_; }
    const std::vector<LoraPtr>& adapters() const { return adapters_; }

    void run_phase1() {
        if (!backend_.projections().adapters().empty())
            throw StateError("phase 1 requires a fully frozen backbone (LoRA attached)");
        uint64_t before = backend_.base_param_hash();
        AdamW opt(0.9, 0.999, 1e-8, cfg_.weight_decay);
        opt.add_group(embedding_params(), cfg_.phase1_lr_embeddings);
        run_loop(1, cfg_.phase1_steps, opt);
        if (backend_.base_param_hash() != before)
            throw InvariantViolation("phase 1 modified frozen backbone parameters");
    }

    void run_phase2() {
        if (adapters_.empty() && backend_.projections().adapters().empty()) {
            Rng lora_rng = master_.child(3);
            adapters_ = attach_lora(backend_.projections(), {"to_q", "to_k"}, cfg_.lora_rank,
                                    lora_rng, cfg_.lora_scale_qk, cfg_.lora_v_init_std);
            auto vo = attach_lora(backend_.projections(), {"to_v", "to_out"}, cfg_.lora_rank,
                                  lora_rng, cfg_.lora_scale_vo, cfg_.lora_v_init_std);
            adapters_.insert(adapters_.end(), vo.begin(), vo.end());
        } else if (adapters_.empty()) {
            adapters_ = backend_.projections().adapters();  // restored from a checkpoint
        }
        uint64_t before = backend_.base_param_hash();
        AdamW opt(0.9, 0.999, 1e-8, cfg_.weight_decay);
        opt.add_group(embedding_params(), cfg_.phase2_lr_embeddings);
        std::vector<ag::Var> lora_params;
        for (auto& a : adapters_) {
            lora_params.push_back(a->U);
            lora_params.push_back(a->V);
        }
        opt.add_group(lora_params, cfg_.phase2_lr_lora);
        id_eligible_ = id_skipped_ = 0;
        run_loop(2, cfg_.phase2_steps, opt);
        if (backend_.base_param_hash() != before)
            throw InvariantViolation("phase 2 modified frozen backbone parameters");
    }

    int identity_eligible() const { return id_eligible_; }
    int identity_skipped() const { return id_skipped_; }

private:
    void encode_all(ConceptSpec& c) {
        c.latents.clear();
        for (const auto& img : c.images) c.latents.push_back(backend_.encode_image(img));
    }

    std::vector<ag::Var> embedding_params() {
        std::vector<ag::Var> out;
        for (const auto& id : backend_.concept_ids()) out.push_back(backend_.concept_embedding(id));
        return out;
    }

    void run_loop(int phase, int steps, AdamW& opt) {
        Rng rng = master_.child(static_cast<uint64_t>(phase));
        const double inv = 1.0 / (cfg_.batch_size * cfg_.grad_accum);
        for (int step = 0; step < steps; ++step) {
            for (int micro = 0; micro < cfg_.grad_accum; ++micro) {
                MicroStepLog log;
                log.phase = phase;
                log.step  = step;
                log.micro = micro;
                std::vector<ag::Var> item_losses;
                for (int b = 0; b < cfg_.batch_size; ++b)
                    item_losses.push_back(eval_item(phase, rng, log));
                ag::Var batch_loss = ag::add_all(item_losses);
                log.total          = batch_loss->value[0] / cfg_.batch_size;
                for (auto& [k, v] : log.terms) v /= cfg_.batch_size;
                ag::backward(ag::scale(batch_loss, inv));
                emit(log);
            }
            opt.step();
            opt.zero_grad();
        }
    }

    // one training item: forward, losses per task descriptor, returns the
    // unscaled item loss (the caller averages)
    ag::Var eval_item(int phase, Rng& rng, MicroStepLog& log) {
        TaskSample s = sample_task(phase, cfg_, source_.images.size(), reference_.images.size(), rng);
        log.task     = task_name(s.kind);

        const ConceptSpec& data = s.kind == TaskKind::Source ? source_ : reference_;
        const Tensor& z0        = data.latents[static_cast<size_t>(s.image_index)];
        const PromptSpec& prompt =
            s.kind == TaskKind::Source ? source_prompt_
            : s.kind == TaskKind::Reference ? reference_prompt_
                                            : composed_prompts_[static_cast<size_t>(s.template_index)];

        int T = backend_.schedule().timesteps();
        int t = rng.uniform_int(1, T);
        log.t = t;
        Tensor eps   = rng.normal_tensor(z0.shape());
        LatentState noised = forward_noise(z0, t, eps, backend_.schedule());

        bool ar_active = phase >= 2 && cfg_.weights.lambda_attn > 0.0;
        std::set<int> record;
        if (ar_active)
            for (const auto& [cid, pos] : prompt.special_positions) record.insert(pos);

        DenoiseResult res = backend_.denoise(noised.z, t, prompt, record);

        const Tensor& latent_mask = recon_mask(s).resample(z0.dim(1), z0.dim(2));
        ag::Var loss              = masked_reconstruction_loss(*noised.eps, res.eps, latent_mask);
        log.terms["mask"] += loss->value[0];

        if (ar_active) {
            std::vector<ArTarget> targets;
            for (const auto& [cid, pos] : prompt.special_positions) {
                // the subject token refocuses onto the face of the image being
                // denoised, the style token onto its complement
                const auto& masks = cid == "source" ? data.face_masks : data.nonface_masks;
                targets.push_back({pos, &masks[static_cast<size_t>(s.image_index)]});
            }
            ag::Var attn = attention_refocusing_loss(res.record, targets);
            log.terms["attn"] += attn->value[0];
            loss = ag::add(loss, ag::scale(attn, cfg_.weights.lambda_attn));
        }

        if (s.kind == TaskKind::Composed) {
            loss = add_composed_terms(loss, z0, prompt, s, rng, log);
        }
        return loss;
    }

    ag::Var add_composed_terms(ag::Var loss, const Tensor& z0, const PromptSpec& prompt,
                               const TaskSample& s, Rng& rng, MicroStepLog& log) {
        bool want_identity = cfg_.weights.lambda_id > 0.0;
        bool want_general  = cfg_.general_object && extractor_;
        if (!want_identity && !want_general) return loss;

        // independent pass at t_id ~ U(1, T'); large-t estimates are too
        // blurry for detection
        int T  = backend_.schedule().timesteps();
        int Tp = std::max(1, static_cast<int>(cfg_.t_id_max_frac * T));
        int t_id = rng.uniform_int(1, Tp);
        log.t_id = t_id;
        Tensor eps_id      = rng.normal_tensor(z0.shape());
        LatentState noised = forward_noise(z0, t_id, eps_id, backend_.schedule());
        DenoiseResult res  = backend_.denoise(noised.z, t_id, prompt, {});
        ag::Var x0_latent  = tweedie_estimate_var(noised.z, t_id, res.eps, backend_.schedule());
        ag::Var x0_image   = backend_.decode_latent_var(x0_latent);

        int src_idx = rng.uniform_int(0, static_cast<int>(source_.images.size()) - 1);
        const Tensor& src_img = source_.images[static_cast<size_t>(src_idx)];

        if (want_identity) {
            ++id_eligible_;
            auto lid = identity_loss(x0_image, src_img, identity_);
            if (lid) {
                log.terms["id"] += (*lid)->value[0];
                loss = ag::add(loss, ag::scale(*lid, cfg_.weights.lambda_id));
            } else {
                ++id_skipped_;
                log.id_skipped = true;
                if (id_eligible_ >= cfg_.identity_skip_warmup &&
                    static_cast<double>(id_skipped_) / id_eligible_ > cfg_.identity_skip_max_rate)
                    throw InvariantViolation(
                        "identity loss skipped on " + std::to_string(id_skipped_) + "/" +
                        std::to_string(id_eligible_) +
                        " eligible steps; face detection is not keeping up");
            }
        }
        if (want_general) {
            const Tensor& ref_img = reference_.images[static_cast<size_t>(s.image_index)];
            auto g = structure_style_losses(x0_image, src_img, ref_img, *extractor_);
            log.terms["ssim"] += g.ssim->value[0];
            log.terms["contra"] += g.contra->value[0];
            log.terms["style"] += g.style->value[0];
            loss = ag::add(loss, ag::scale(g.ssim, cfg_.weights.lambda_ssim));
            loss = ag::add(loss, ag::scale(g.contra, cfg_.weights.lambda_contra));
            loss = ag::add(loss, ag::scale(g.style, cfg_.weights.lambda_style));
        }
        return loss;
    }

    const RegionMask& recon_mask(const TaskSample& s) const {
        size_t i = static_cast<size_t>(s.image_index);
        switch (s.kind) {
            case TaskKind::Source: return source_.region_mask(i);
            case TaskKind::Reference:
                // general-object mode reconstructs the reference without masking
                return cfg_.general_object ? full_mask(reference_, i) : reference_.region_mask(i);
            default: return reference_.nonface_masks[i];  // pseudo-label region
        }
    }

    const RegionMask& full_mask(const ConceptSpec& c, size_t i) const {
        auto key = std::make_pair(c.images[i].dim(1), c.images[i].dim(2));
        auto it  = full_masks_.find(key);
        if (it == full_masks_.end())
            it = full_masks_.emplace(key, RegionMask(Tensor({key.first, key.second}, 1.0),
                                                     MaskRole::Custom)).first;
        return it->second;
    }

    void emit(const MicroStepLog& log) {
        history_.push_back(log);
        if (sink_) sink_(log);
    }

    DiffusionBackend& backend_;
    TrainConfig cfg_;
    ConceptSpec source_;
    ConceptSpec reference_;
    IdentityEmbedder identity_;
    FeatureExtractor* extractor_;
    Rng master_;
    PromptSpec source_prompt_;
    PromptSpec reference_prompt_;
    std::vector<PromptSpec> composed_prompts_;
    std::vector<LoraPtr> adapters_;
    TraceSink sink_;
    std::vector<MicroStepLog> history_;
    int id_eligible_ = 0;
    int id_skipped_  = 0;
    mutable std::map<std::pair<int, int>, RegionMask> full_masks_;
};

}  // namespace stylefuse
