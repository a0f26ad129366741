#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stylefuse/backend.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/random.hpp"

namespace stylefuse {

// Deterministic CPU toy engine: pixel-shuffle codec (exactly invertible),
// two conv blocks with one cross-attention layer each (8x8 and 4x4 grids for
// a 32x32 input), and a hash-bucket word vocabulary with injectable
// special-token embeddings. Internally the denoiser predicts the clean
// latent and converts to a noise prediction through the schedule, which is
// what lets embedding-only optimization move the reconstruction loss.
struct ToyBackendConfig {
    int image_channels  = 1;
    int timesteps       = 100;
    double alpha_first  = 0.8;   // geometric alpha_bar endpoints
    double alpha_last   = 0.02;
    int downscale       = 4;
    int hidden          = 24;   // conv feature channels
    int token_dim       = 48;   // embedding width
    int attn_dim        = 24;   // query/key width
    int max_tokens      = 24;   // padded sequence length
    int base_vocab      = 8;    // hash buckets for ordinary words
    double value_gain   = 8.0;  // boost on the token value path
    double special_value_gain = 64.0;  // extra value-path boost for injected tokens
    double latent_shift = 0.5;  // input centering; pixels live in [0,1]
    uint64_t seed       = 1234;  // frozen-weight init stream

    int latent_channels() const { return image_channels * downscale * downscale; }
};

class ToyDiffusionBackend : public DiffusionBackend {
public:
    explicit ToyDiffusionBackend(ToyBackendConfig cfg = {})
        : cfg_(cfg), sched_(NoiseSchedule::geometric(cfg.timesteps, cfg.alpha_first, cfg.alpha_last)) {
        Rng rng(cfg_.seed);
        const int Cl = cfg_.latent_channels(), Ch = cfg_.hidden, d = cfg_.token_dim,
                  da = cfg_.attn_dim;

        add_frozen("conv_in.w", rng.normal_tensor({Ch, Cl, 3, 3}, 0.0, 1.0 / std::sqrt(9.0 * Cl)));
        add_frozen("conv_in.b", Tensor({Ch}));
        add_frozen("time0.w", rng.normal_tensor({Ch, kTimeDim}, 0.0, 0.5));
        add_frozen("time0.b", Tensor({Ch}));
        add_frozen("conv_mid.w", rng.normal_tensor({Ch, Ch, 3, 3}, 0.0, 1.0 / std::sqrt(9.0 * Ch)));
        add_frozen("conv_mid.b", Tensor({Ch}));
        add_frozen("time1.w", rng.normal_tensor({Ch, kTimeDim}, 0.0, 0.5));
        add_frozen("time1.b", Tensor({Ch}));
        add_frozen("conv_out.w", rng.normal_tensor({Cl, Ch, 3, 3}, 0.0, 1.0 / std::sqrt(9.0 * Ch)));
        add_frozen("conv_out.b", Tensor({Cl}, cfg_.latent_shift));  // clean estimate starts at mid-gray
        add_frozen("tok_embed.base", rng.normal_tensor({1 + cfg_.base_vocab, d}, 0.0, 1.0));

        for (int blk = 0; blk < 2; ++blk) {
            std::string p = "block" + std::to_string(blk) + ".attn.";
            projections_.add(p + "to_q", rng.normal_tensor({da, Ch}, 0.0, 1.0 / std::sqrt(Ch)));
            projections_.add(p + "to_k", rng.normal_tensor({da, d}, 0.0, 1.0 / std::sqrt(d)));
            projections_.add(p + "to_v", rng.normal_tensor({da, d}, 0.0, 1.0 / std::sqrt(d)));
            projections_.add(p + "to_out", rng.normal_tensor({Ch, da}, 0.0, 1.0 / std::sqrt(da)));
        }
    }

    const ToyBackendConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const override { return sched_; }
    int downscale_factor() const override { return cfg_.downscale; }

    Tensor encode_image(const Tensor& image) override {
        if (image.ndim() != 3 || image.dim(0) != cfg_.image_channels)
            throw std::domain_error("encode_image: expected (" +
                                    std::to_string(cfg_.image_channels) + ",H,W), got " +
                                    shape_str(image.shape()));
        if (image.dim(1) % cfg_.downscale || image.dim(2) % cfg_.downscale)
            throw std::domain_error("encode_image: dimensions not divisible by downscale factor");
        ag::NoGradGuard off;
        return ag::space_to_depth(ag::constant(image), cfg_.downscale)->value;
    }

    Tensor decode_latent(const Tensor& z) override {
        ag::NoGradGuard off;
        return ag::depth_to_space(ag::constant(z), cfg_.downscale)->value;
    }

    ag::Var decode_latent_var(const ag::Var& z) override {
        return ag::depth_to_space(z, cfg_.downscale);
    }

    void register_concept(const std::string& concept_id, const std::string& token) override {
        if (concepts_.count(concept_id)) throw StateError("concept already registered: " + concept_id);
        for (auto& [id, c] : concepts_)
            if (c.token == token) throw ConfigError("special token already in use: " + token);
        Concept c;
        c.token = token;
        // near-zero start: the learned offset, not the random init, defines the direction
        Rng init(Rng(cfg_.seed).child(fnv1a64(concept_id.data(), concept_id.size())).seed());
        c.embedding = ag::leaf(init.normal_tensor({cfg_.token_dim}, 0.0, 0.02));
        c.vocab_id  = 1 + cfg_.base_vocab + static_cast<int>(concepts_.size());
        concepts_[concept_id] = c;
        concept_order_.push_back(concept_id);
    }

    ag::Var concept_embedding(const std::string& concept_id) override {
        auto it = concepts_.find(concept_id);
        if (it == concepts_.end()) throw ConfigError("unknown concept: " + concept_id);
        return it->second.embedding;
    }

    std::vector<std::string> concept_ids() const override { return concept_order_; }

    const std::string& concept_token(const std::string& concept_id) const {
        auto it = concepts_.find(concept_id);
        if (it == concepts_.end()) throw ConfigError("unknown concept: " + concept_id);
        return it->second.token;
    }

    PromptSpec encode_prompt(const std::string& text) override {
        PromptSpec spec;
        spec.text  = text;
        auto words = tokenize_words(text);
        if (static_cast<int>(words.size()) > cfg_.max_tokens)
            throw ConfigError("prompt longer than " + std::to_string(cfg_.max_tokens) +
                              " tokens: " + text);
        spec.token_ids.assign(static_cast<size_t>(cfg_.max_tokens), 0);
        for (size_t i = 0; i < words.size(); ++i) {
            const std::string& w = words[i];
            const Concept* hit   = nullptr;
            const std::string* hit_id = nullptr;
            for (const auto& [id, c] : concepts_)
                if (c.token == w) {
                    hit    = &c;
                    hit_id = &id;
                }
            if (hit) {
                if (spec.special_positions.count(*hit_id))
                    throw ConfigError("special token appears twice in prompt: " + w);
                spec.token_ids[i] = hit->vocab_id;
                spec.special_positions[*hit_id] = static_cast<int>(i);
            } else if (looks_like_special_token(w)) {
                throw ConfigError("unresolved special token in prompt: " + w);
            } else {
                uint64_t h        = fnv1a64(w.data(), w.size());
                spec.token_ids[i] = 1 + static_cast<int>(h % static_cast<uint64_t>(cfg_.base_vocab));
            }
        }
        spec.length = static_cast<int>(words.size());
        return spec;
    }

    DenoiseResult denoise(const Tensor& z, int t, const PromptSpec& prompt,
                          const std::set<int>& record_tokens = {}) override {
        const int Cl = cfg_.latent_channels();
        if (z.ndim() != 3 || z.dim(0) != Cl)
            throw std::domain_error("denoise: latent shape mismatch " + shape_str(z.shape()));
        if (static_cast<int>(prompt.token_ids.size()) != cfg_.max_tokens)
            throw ConfigError("denoise: prompt not encoded by this backend");
        double a = sched_.alpha(t);  // validates t range
        if (a >= 1.0) throw std::domain_error("denoise: alpha must be < 1 for noise prediction");

        ag::Var tok_k = token_matrix(prompt, 1.0);
        ag::Var tok_v = token_matrix(prompt, cfg_.special_value_gain);
        Tensor temb   = time_features(t);
        ag::Var zc    = ag::constant(z);
        ag::Var zin   = ag::add_scalar(zc, -cfg_.latent_shift);

        DenoiseResult out;
        out.record.key_dim = cfg_.attn_dim;

        // block 0 at full latent resolution
        ag::Var h0 = ag::conv3x3(zin, pvar("conv_in.w"), pvar("conv_in.b"));
        h0 = ag::silu(ag::add_channel_bias(h0, time_proj("time0", temb)));
        h0 = ag::add(h0, cross_attention(0, h0, tok_k, tok_v, record_tokens, out.record));

        // block 1 at half resolution
        ag::Var h1 = ag::avg_pool2(h0);
        h1 = ag::conv3x3(h1, pvar("conv_mid.w"), pvar("conv_mid.b"));
        h1 = ag::silu(ag::add_channel_bias(h1, time_proj("time1", temb)));
        h1 = ag::add(h1, cross_attention(1, h1, tok_k, tok_v, record_tokens, out.record));

        ag::Var h      = ag::add(h0, ag::upsample_nearest2(h1));
        ag::Var x0_hat = ag::conv3x3(ag::silu(h), pvar("conv_out.w"), pvar("conv_out.b"));

        // eps = (z - sqrt(a) x0_hat) / sqrt(1 - a)
        double sa = std::sqrt(a), se = std::sqrt(1.0 - a);
        out.eps   = ag::scale(ag::sub(zc, ag::scale(x0_hat, sa)), 1.0 / se);
        return out;
    }

    ProjectionRegistry& projections() override { return projections_; }

    uint64_t base_param_hash() const override {
        uint64_t h = 1469598103934665603ULL;
        for (const auto& name : frozen_order_) {
            h = fnv1a64(name.data(), name.size(), h);
            h = tensor_hash(frozen_.at(name), h);
        }
        h ^= projections_.base_hash();
        return h;
    }

    std::vector<std::pair<std::string, const Tensor*>> frozen_parameters() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (const auto& name : frozen_order_) out.push_back({name, &frozen_.at(name)});
        return out;
    }

private:
    static constexpr int kTimeDim = 8;

    struct Concept {
        std::string token;
        ag::Var embedding;
        int vocab_id = 0;
    };

    void add_frozen(const std::string& name, Tensor t) {
        frozen_[name] = std::move(t);
        frozen_order_.push_back(name);
    }

    ag::Var pvar(const std::string& name) const { return ag::constant(frozen_.at(name)); }

    Tensor time_features(int t) const {
        double tau = static_cast<double>(t) / sched_.timesteps();
        Tensor f({kTimeDim});
        for (int k = 0; k < kTimeDim / 2; ++k) {
            double w = M_PI * std::pow(2.0, k);
            f[2 * k]     = std::sin(w * tau);
            f[2 * k + 1] = std::cos(w * tau);
        }
        return f;
    }

    ag::Var time_proj(const std::string& prefix, const Tensor& temb) const {
        // (Ch x kTimeDim) @ temb + b, as a channel bias
        ag::Var w = pvar(prefix + ".w");
        ag::Var b = pvar(prefix + ".b");
        ag::Var f = ag::reshape(ag::constant(temb), {1, kTimeDim});
        return ag::add(ag::reshape(ag::matmul_nt(f, w), {cfg_.hidden}), b);
    }

    // special_gain scales only the injected concept rows; the key path uses
    // gain 1 so attention logits stay comparable across tokens
    ag::Var token_matrix(const PromptSpec& prompt, double special_gain) const {
        const Tensor& base = frozen_.at("tok_embed.base");
        std::vector<ag::Var> rows;
        rows.reserve(prompt.token_ids.size());
        for (int id : prompt.token_ids) {
            if (id <= cfg_.base_vocab) {
                Tensor r({cfg_.token_dim});
                for (int c = 0; c < cfg_.token_dim; ++c) r[c] = base.at(id, c);
                rows.push_back(ag::constant(std::move(r)));
            } else {
                int idx = id - cfg_.base_vocab - 1;
                ag::Var e = concepts_.at(concept_order_.at(static_cast<size_t>(idx))).embedding;
                rows.push_back(special_gain == 1.0 ? e : ag::scale(e, special_gain));
            }
        }
        return ag::stack_rows(rows);
    }

    ag::Var cross_attention(int block, const ag::Var& feat, const ag::Var& tok_k,
                            const ag::Var& tok_v, const std::set<int>& record_tokens,
                            AttentionRecord& record) {
        const int Ch = cfg_.hidden, H = feat->value.dim(1), W = feat->value.dim(2);
        std::string p = "block" + std::to_string(block) + ".attn.";

        // fixed positional channels on the query path let queries address
        // regions independently of image content
        ag::Var fq = ag::add(feat, ag::constant(positional(H, W)));
        ag::Var fr = ag::reshape(fq, {H * W, Ch});
        ag::Var q  = ag::matmul_nt(fr, projections_.at(p + "to_q").effective());
        ag::Var k  = ag::matmul_nt(tok_k, projections_.at(p + "to_k").effective());
        ag::Var v  = ag::matmul_nt(tok_v, projections_.at(p + "to_v").effective());
        ag::Var A  = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), 1.0 / std::sqrt(cfg_.attn_dim)));
        ag::Var ctx = ag::matmul(A, ag::scale(v, cfg_.value_gain));
        ag::Var o   = ag::matmul_nt(ctx, projections_.at(p + "to_out").effective());

        if (!record_tokens.empty()) {
            record.layer_resolutions.push_back({H, W});
            record.full_rows.push_back(A->value);
            for (int tk : record_tokens) {
                if (tk < 0 || tk >= cfg_.max_tokens)
                    throw ConfigError("record token index out of range: " + std::to_string(tk));
                record.token_maps[tk].push_back(ag::reshape(ag::column(A, tk), {H, W}));
            }
        }
        return ag::reshape(o, {Ch, H, W});
    }

    ToyBackendConfig cfg_;
    NoiseSchedule sched_;
    std::map<std::string, Tensor> frozen_;
    std::vector<std::string> frozen_order_;
    ProjectionRegistry projections_;
    std::map<std::string, Concept> concepts_;
    std::vector<std::string> concept_order_;
};

}  // namespace stylefuse
