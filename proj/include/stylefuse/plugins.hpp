#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stylefuse/autograd.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/mask.hpp"
#include "stylefuse/random.hpp"

namespace stylefuse {

// ---- face detection / recognition (identity loss, CSIM) ----

class FaceDetectorCropper {
public:
    virtual ~FaceDetectorCropper() = default;
    // crop window for the face, or nullopt when no face is found
    virtual std::optional<FaceBox> detect(const Tensor& image) = 0;
};

// Always reports the configured box. The box is clamped to the image.
class FixedBoxDetector : public FaceDetectorCropper {
public:
    explicit FixedBoxDetector(FaceBox box) : box_(box) {}
    std::optional<FaceBox> detect(const Tensor& image) override {
        FaceBox b = box_;
        b.x       = std::clamp(b.x, 0, image.dim(2) - 1);
        b.y       = std::clamp(b.y, 0, image.dim(1) - 1);
        b.width   = std::clamp(b.width, 1, image.dim(2) - b.x);
        b.height  = std::clamp(b.height, 1, image.dim(1) - b.y);
        return b;
    }

private:
    FaceBox box_;
};

// Reports the box only when the crop has enough contrast; flat crops count
// as "no face", which exercises the identity-skip policy.
class VarianceGatedDetector : public FaceDetectorCropper {
public:
    VarianceGatedDetector(FaceBox box, double min_std) : inner_(box), min_std_(min_std) {}
    std::optional<FaceBox> detect(const Tensor& image) override {
        auto box = inner_.detect(image);
        if (!box) return std::nullopt;
        double s = 0.0, s2 = 0.0;
        int64_t n = 0;
        for (int c = 0; c < image.dim(0); ++c)
            for (int y = box->y; y < box->y + box->height; ++y)
                for (int x = box->x; x < box->x + box->width; ++x) {
                    double v = image.at(c, y, x);
                    s += v;
                    s2 += v * v;
                    ++n;
                }
        double var = s2 / n - (s / n) * (s / n);
        if (std::sqrt(std::max(0.0, var)) < min_std_) return std::nullopt;
        return box;
    }

private:
    FixedBoxDetector inner_;
    double min_std_;
};

// Embeds a face crop as a unit-norm vector, differentiably.
class FaceRecognizer {
public:
    virtual ~FaceRecognizer() = default;
    virtual ag::Var embed(const ag::Var& crop) = 0;
    virtual int dim() const = 0;
};

// fixed random linear readout of the area-resized crop, L2-normalized
class ToyFaceRecognizer : public FaceRecognizer {
public:
    explicit ToyFaceRecognizer(int image_channels = 1, int out_dim = 16, uint64_t seed = 501)
        : channels_(image_channels), out_dim_(out_dim) {
        Rng rng(seed);
        w_ = rng.normal_tensor({out_dim, channels_ * kRes * kRes}, 0.0,
                               1.0 / std::sqrt(static_cast<double>(channels_) * kRes * kRes));
    }
    ag::Var embed(const ag::Var& crop) override {
        if (crop->value.dim(0) != channels_)
            throw PluginError("recognizer: channel mismatch");
        ag::Var r = ag::resize_bilinear(crop, kRes, kRes);  // crops may be smaller than 8x8
        ag::Var f = ag::reshape(r, {1, channels_ * kRes * kRes});
        ag::Var e = ag::reshape(ag::matmul_nt(f, ag::constant(w_)), {out_dim_});
        return ag::l2_normalize(e);
    }
    int dim() const override { return out_dim_; }

private:
    static constexpr int kRes = 8;
    int channels_;
    int out_dim_;
    Tensor w_;
};

// recognizer R plus detector-cropper B from the identity objective
struct IdentityEmbedder {
    std::shared_ptr<FaceDetectorCropper> detector;
    std::shared_ptr<FaceRecognizer> recognizer;

    // detection runs on plain pixel data; the crop + embedding stay differentiable
    std::optional<ag::Var> embed(const ag::Var& image) const {
        auto box = detector->detect(image->value);
        if (!box) return std::nullopt;
        ag::Var crop = ag::crop2d(image, box->y, box->x, box->height, box->width);
        return recognizer->embed(crop);
    }

    std::optional<Tensor> embed_plain(const Tensor& image) const {
        ag::NoGradGuard off;
        auto e = embed(ag::constant(image));
        if (!e) return std::nullopt;
        return (*e)->value;
    }
};

// ---- DINO-like feature extractor (general-object losses) ----

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual ag::Var patch_keys(const ag::Var& image)      = 0;  // (P x dk)
    virtual ag::Var self_similarity(const ag::Var& image) = 0;  // (P x P), cosine of keys
    virtual ag::Var global_embedding(const ag::Var& image) = 0;  // (dg)
    virtual int patch_count() const = 0;
};

// non-overlapping patch grid, fixed random linear keys
class ToyFeatureExtractor : public FeatureExtractor {
public:
    ToyFeatureExtractor(int image_channels = 1, int grid = 2, int key_dim = 12,
                        int global_dim = 16, uint64_t seed = 601)
        : channels_(image_channels), grid_(grid), key_dim_(key_dim), global_dim_(global_dim) {
        Rng rng(seed);
        wk_ = rng.normal_tensor({key_dim, channels_ * kPatchRes * kPatchRes}, 0.0, 0.25);
        wg_ = rng.normal_tensor({global_dim, channels_ * kPatchRes * kPatchRes}, 0.0, 0.25);
    }

    ag::Var patch_keys(const ag::Var& image) override {
        int H = image->value.dim(1), W = image->value.dim(2);
        if (H < grid_ || W < grid_) throw PluginError("extractor: image smaller than patch grid");
        std::vector<ag::Var> keys;
        for (int gy = 0; gy < grid_; ++gy)
            for (int gx = 0; gx < grid_; ++gx) {
                int y0 = gy * H / grid_, y1 = (gy + 1) * H / grid_;
                int x0 = gx * W / grid_, x1 = (gx + 1) * W / grid_;
                ag::Var patch = ag::crop2d(image, y0, x0, y1 - y0, x1 - x0);
                ag::Var f     = ag::reshape(ag::area_resize(patch, kPatchRes, kPatchRes),
                                            {1, channels_ * kPatchRes * kPatchRes});
                keys.push_back(ag::reshape(ag::matmul_nt(f, ag::constant(wk_)), {key_dim_}));
            }
        std::vector<ag::Var> normed;
        normed.reserve(keys.size());
        for (auto& k : keys) normed.push_back(ag::l2_normalize(k));
        return ag::stack_rows(normed);
    }

    ag::Var self_similarity(const ag::Var& image) override {
        ag::Var k = patch_keys(image);  // rows already unit norm
        return ag::matmul_nt(k, k);
    }

    ag::Var global_embedding(const ag::Var& image) override {
        ag::Var f = ag::reshape(ag::area_resize(image, kPatchRes, kPatchRes),
                                {1, channels_ * kPatchRes * kPatchRes});
        return ag::reshape(ag::matmul_nt(f, ag::constant(wg_)), {global_dim_});
    }

    int patch_count() const override { return grid_ * grid_; }

    // frozen weights, exposed so oracles can recompute features independently
    const Tensor& key_weights() const { return wk_; }
    const Tensor& global_weights() const { return wg_; }
    static constexpr int patch_res() { return kPatchRes; }

private:
    static constexpr int kPatchRes = 8;
    int channels_, grid_, key_dim_, global_dim_;
    Tensor wk_, wg_;
};

// ---- CLIP-like whole-image embedder (style metric) ----

class ImageEmbedder {
public:
    virtual ~ImageEmbedder() = default;
    virtual Tensor embed(const Tensor& image) = 0;  // unit-norm vector
};

class ToyImageEmbedder : public ImageEmbedder {
public:
    explicit ToyImageEmbedder(int image_channels = 1, int out_dim = 24, uint64_t seed = 701)
        : channels_(image_channels), out_dim_(out_dim) {
        Rng rng(seed);
        w_ = rng.normal_tensor({out_dim, channels_ * kRes * kRes}, 0.0, 0.2);
    }
    Tensor embed(const Tensor& image) override {
        if (image.dim(0) != channels_) throw PluginError("image embedder: channel mismatch");
        ag::NoGradGuard off;
        ag::Var f = ag::reshape(ag::area_resize(ag::constant(image), kRes, kRes),
                                {1, channels_ * kRes * kRes});
        ag::Var e = ag::l2_normalize(ag::reshape(ag::matmul_nt(f, ag::constant(w_)), {out_dim_}));
        return e->value;
    }

private:
    static constexpr int kRes = 8;
    int channels_, out_dim_;
    Tensor w_;
};

// ---- aesthetic predictor ----

class AestheticPredictor {
public:
    virtual ~AestheticPredictor() = default;
    virtual double score(const Tensor& image) = 0;
};

class ConstantAesthetic : public AestheticPredictor {
public:
    explicit ConstantAesthetic(double v) : v_(v) {}
    double score(const Tensor&) override { return v_; }

private:
    double v_;
};

// luminance-anchored toy score in [0,10]
class ToyAesthetic : public AestheticPredictor {
public:
    double score(const Tensor& image) override { return 10.0 * image.mean(); }
};

// ---- postprocessors ----

class Postprocessor {
public:
    virtual ~Postprocessor() = default;
    virtual Tensor apply(const Tensor& image) = 0;
};

class Upscale2x : public Postprocessor {
public:
    Tensor apply(const Tensor& image) override {
        ag::NoGradGuard off;
        return ag::upsample_nearest2(ag::constant(image))->value;
    }
};

// crops the detected face and keeps only that region (dimensions shrink)
class CropFace : public Postprocessor {
public:
    explicit CropFace(std::shared_ptr<FaceDetectorCropper> det) : det_(std::move(det)) {}
    Tensor apply(const Tensor& image) override {
        auto box = det_->detect(image);
        if (!box) throw PluginError("crop-face: no face detected");
        ag::NoGradGuard off;
        return ag::crop2d(ag::constant(image), box->y, box->x, box->height, box->width)->value;
    }

private:
    std::shared_ptr<FaceDetectorCropper> det_;
};

class PostprocessRegistry {
public:
    void add(const std::string& id, std::shared_ptr<Postprocessor> p) { plugins_[id] = std::move(p); }
    bool has(const std::string& id) const { return plugins_.count(id) > 0; }
    Postprocessor& at(const std::string& id) const {
        auto it = plugins_.find(id);
        if (it == plugins_.end()) throw ConfigError("unknown postprocessor id: " + id);
        return *it->second;
    }
    // validate the whole pipeline before any work
    void validate(const std::vector<std::string>& ids) const {
        for (const auto& id : ids) (void)at(id);
    }

private:
    std::map<std::string, std::shared_ptr<Postprocessor>> plugins_;
};

}  // namespace stylefuse
