#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "stylefuse/errors.hpp"
#include "stylefuse/image.hpp"
#include "stylefuse/tensor.hpp"

namespace stylefuse {

enum class MaskRole { SourceFace, ReferenceNonFace, Custom };

inline const char* mask_role_name(MaskRole r) {
    switch (r) {
        case MaskRole::SourceFace: return "source-face";
        case MaskRole::ReferenceNonFace: return "reference-nonface";
        default: return "custom";
    }
}

// area-average then threshold at 0.5, ties -> 1; the configured down-sampler
// for every mask resolution in the pipeline
inline Tensor downsample_mask(const Tensor& mask, int th, int tw) {
    int H = mask.dim(0), W = mask.dim(1);
    if (th > H || tw > W)
        throw std::domain_error("mask resample: upsampling requested (" + std::to_string(th) +
                                "x" + std::to_string(tw) + " from " + std::to_string(H) + "x" +
                                std::to_string(W) + ")");
    if (th == H && tw == W) return mask;
    double sy = static_cast<double>(H) / th, sx = static_cast<double>(W) / tw;
    Tensor out({th, tw});
    for (int y = 0; y < th; ++y) {
        double ylo = y * sy, yhi = (y + 1) * sy;
        for (int x = 0; x < tw; ++x) {
            double xlo = x * sx, xhi = (x + 1) * sx;
            double acc = 0.0;
            for (int j = static_cast<int>(std::floor(ylo)); j < H && j < yhi; ++j) {
                double cy = std::min<double>(j + 1, yhi) - std::max<double>(j, ylo);
                if (cy <= 1e-12) continue;
                for (int i = static_cast<int>(std::floor(xlo)); i < W && i < xhi; ++i) {
                    double cx = std::min<double>(i + 1, xhi) - std::max<double>(i, xlo);
                    if (cx <= 1e-12) continue;
                    acc += cy * cx * mask.at(j, i);
                }
            }
            out.at(y, x) = (acc / (sy * sx)) >= 0.5 ? 1.0 : 0.0;
        }
    }
    return out;
}

// Binary region mask at native resolution plus a cache of resampled levels.
// The cache is populated once per size and immutable afterwards.
class RegionMask {
public:
    RegionMask() = default;
    RegionMask(Tensor bitmap, MaskRole role) : bitmap_(std::move(bitmap)), role_(role) {
        for (int64_t i = 0; i < bitmap_.numel(); ++i)
            if (bitmap_[i] != 0.0 && bitmap_[i] != 1.0)
                throw std::invalid_argument("region mask values must be exactly 0 or 1");
    }

    const Tensor& bitmap() const { return bitmap_; }
    MaskRole role() const { return role_; }
    int height() const { return bitmap_.dim(0); }
    int width() const { return bitmap_.dim(1); }

    const Tensor& resample(int th, int tw) const {
        if (th == height() && tw == width()) return bitmap_;
        auto key = std::make_pair(th, tw);
        auto it  = pyramid_.find(key);
        if (it != pyramid_.end()) return it->second;
        auto [ins, ok] = pyramid_.emplace(key, downsample_mask(bitmap_, th, tw));
        return ins->second;
    }

    double coverage() const { return bitmap_.mean(); }

private:
    Tensor bitmap_;
    MaskRole role_ = MaskRole::Custom;
    mutable std::map<std::pair<int, int>, Tensor> pyramid_;
};

inline Tensor complement(const Tensor& mask) {
    Tensor out(mask.shape());
    for (int64_t i = 0; i < mask.numel(); ++i) out[i] = mask[i] != 0.0 ? 0.0 : 1.0;
    return out;
}

// Produces the face-region bitmap for one image, nullopt when no face found.
class FaceSegmenter {
public:
    virtual ~FaceSegmenter() = default;
    virtual std::optional<Tensor> segment(const Tensor& image,
                                          const std::string& image_path) = 0;
};

struct FaceBox {
    int x = 0, y = 0, width = 0, height = 0;
};

inline Tensor box_to_bitmap(const FaceBox& box, int H, int W) {
    Tensor b({H, W}, 0.0);
    for (int y = std::max(0, box.y); y < std::min(H, box.y + box.height); ++y)
        for (int x = std::max(0, box.x); x < std::min(W, box.x + box.width); ++x)
            b.at(y, x) = 1.0;
    return b;
}

// Toy segmenter driven by sidecar annotations: `<image-stem>.mask.json`
// holding {"x":..,"y":..,"width":..,"height":..} in pixel coordinates.
class RectAnnotationSegmenter : public FaceSegmenter {
public:
    std::optional<Tensor> segment(const Tensor& image, const std::string& image_path) override {
        namespace fs = std::filesystem;
        fs::path p(image_path);
        fs::path sidecar = p.parent_path() / (p.stem().string() + ".mask.json");
        if (!fs::exists(sidecar)) return std::nullopt;
        std::ifstream in(sidecar);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("bad mask annotation " + sidecar.string() + ": " + e.what());
        }
        FaceBox box{j.at("x").get<int>(), j.at("y").get<int>(), j.at("width").get<int>(),
                    j.at("height").get<int>()};
        return box_to_bitmap(box, image.dim(1), image.dim(2));
    }
};

// Role decides polarity: the reference mask is the complement of the face
// region. Missing face is fatal for source images; for reference images the
// fallback (all non-face) is configurable.
inline RegionMask acquire_mask(const Tensor& image, const std::string& image_path, MaskRole role,
                               FaceSegmenter& segmenter, bool reference_noface_fallback = true) {
    auto face = segmenter.segment(image, image_path);
    if (!face) {
        if (role == MaskRole::SourceFace || !reference_noface_fallback)
            throw ValidationError("no face found in " + image_path + " (role " +
                                  mask_role_name(role) + ")");
        // everything is non-facial; caller logs the warning
        return RegionMask(Tensor({image.dim(1), image.dim(2)}, 1.0), role);
    }
    if (role == MaskRole::ReferenceNonFace) return RegionMask(complement(*face), role);
    return RegionMask(std::move(*face), role);
}

// Face bitmaps are persisted as lossless single-channel PNGs. A sidecar
// `<stem>.mask.png` next to the image is a manual override; otherwise the
// cached copy under cache_dir is used, generated on first run.
inline Tensor ensure_face_bitmap(const Tensor& image, const std::string& image_path,
                                 FaceSegmenter& segmenter, const std::string& cache_dir) {
    namespace fs = std::filesystem;
    fs::path p(image_path);
    std::string mask_name = p.stem().string() + ".mask.png";

    fs::path override_path = p.parent_path() / mask_name;
    if (fs::exists(override_path)) return load_mask_png(override_path.string());

    fs::path cached = fs::path(cache_dir) / mask_name;
    if (fs::exists(cached)) return load_mask_png(cached.string());

    auto face = segmenter.segment(image, image_path);
    if (!face) throw ValidationError("no face found in " + image_path);
    save_mask_png(cached.string(), *face);
    return *face;
}

}  // namespace stylefuse
