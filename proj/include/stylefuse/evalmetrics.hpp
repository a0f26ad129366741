#pragma once

#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylefuse/errors.hpp"
#include "stylefuse/mask.hpp"
#include "stylefuse/plugins.hpp"

namespace stylefuse {

struct EvalReport {
    std::optional<double> csim;
    double csim_coverage = 0.0;  // fraction of generated images with a detected face
    std::optional<double> style;
    std::optional<double> aesthetic;
    std::vector<std::string> notes;
    int image_count = 0;

    json to_json() const {
        json j;
        j["image_count"] = image_count;
        if (csim) j["csim"] = *csim;
        j["csim_coverage"] = csim_coverage;
        if (style) j["style"] = *style;
        if (aesthetic) j["aesthetic"] = *aesthetic;
        j["notes"] = notes;
        return j;
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4);
        os << "metric      value\n";
        os << "csim        " << (csim ? std::to_string(*csim) : std::string("absent")) << "\n";
        os << "coverage    " << csim_coverage << "\n";
        os << "style       " << (style ? std::to_string(*style) : std::string("absent")) << "\n";
        os << "aesthetic   " << (aesthetic ? std::to_string(*aesthetic) : std::string("absent"))
           << "\n";
        return os.str();
    }
};

inline double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

// mean pairwise cosine similarity of face embeddings; generated images
// without a detectable face are skipped and counted in coverage
inline std::pair<std::optional<double>, double> eval_csim(const std::vector<Tensor>& generated,
                                                          const std::vector<Tensor>& sources,
                                                          const IdentityEmbedder& embedder) {
    if (generated.empty() || sources.empty())
        throw ValidationError("csim: image sets must be non-empty");
    std::vector<Tensor> src_emb;
    for (const auto& s : sources) {
        auto e = embedder.embed_plain(s);
        if (e) src_emb.push_back(*e);
    }
    if (src_emb.empty()) return {std::nullopt, 0.0};

    double acc  = 0.0;
    int64_t cnt = 0;
    int covered = 0;
    for (const auto& g : generated) {
        auto e = embedder.embed_plain(g);
        if (!e) continue;
        ++covered;
        for (const auto& s : src_emb) {
            acc += cosine(*e, s);
            ++cnt;
        }
    }
    double coverage = static_cast<double>(covered) / generated.size();
    if (cnt == 0) return {std::nullopt, coverage};
    return {acc / cnt, coverage};
}

// facial regions are replaced with the dataset mean color before embedding
inline Tensor mask_face_with_mean(const Tensor& image, const Tensor& face_bitmap,
                                  const std::vector<double>& mean_color) {
    Tensor out = image;
    for (int c = 0; c < image.dim(0); ++c)
        for (int y = 0; y < image.dim(1); ++y)
            for (int x = 0; x < image.dim(2); ++x)
                if (face_bitmap.at(y, x) != 0.0)
                    out.at(c, y, x) = mean_color[static_cast<size_t>(c)];
    return out;
}

// Mean cosine similarity between embeddings of face-masked images. The fill
// color is the per-channel mean over both sets, which keeps the metric
// symmetric in its arguments.
inline double eval_style(const std::vector<Tensor>& generated,
                         const std::vector<Tensor>& references, ImageEmbedder& embedder,
                         const std::vector<Tensor>& generated_face_masks,
                         const std::vector<Tensor>& reference_face_masks) {
    if (generated.empty() || references.empty())
        throw ValidationError("style: image sets must be non-empty");
    if (generated_face_masks.size() != generated.size() ||
        reference_face_masks.size() != references.size())
        throw ValidationError("style: masks not aligned with images");

    int C = generated[0].dim(0);
    std::vector<double> mean(static_cast<size_t>(C), 0.0);
    int64_t px = 0;
    auto accumulate = [&](const std::vector<Tensor>& set) {
        for (const auto& img : set) {
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < img.dim(1); ++y)
                    for (int x = 0; x < img.dim(2); ++x) mean[static_cast<size_t>(c)] += img.at(c, y, x);
            px += img.dim(1) * img.dim(2);
        }
    };
    accumulate(generated);
    accumulate(references);
    for (auto& m : mean) m /= static_cast<double>(px);

    std::vector<Tensor> ge, re;
    for (size_t i = 0; i < generated.size(); ++i)
        ge.push_back(embedder.embed(mask_face_with_mean(generated[i], generated_face_masks[i], mean)));
    for (size_t i = 0; i < references.size(); ++i)
        re.push_back(embedder.embed(mask_face_with_mean(references[i], reference_face_masks[i], mean)));

    double acc = 0.0;
    for (const auto& g : ge)
        for (const auto& r : re) acc += cosine(g, r);
    return acc / static_cast<double>(ge.size() * re.size());
}

inline double eval_aesthetic(const std::vector<Tensor>& generated, AestheticPredictor& predictor) {
    if (generated.empty()) throw ValidationError("aesthetic: empty image list");
    double acc = 0.0;
    for (const auto& g : generated) acc += predictor.score(g);
    return acc / static_cast<double>(generated.size());
}

// ordered postprocessing; the caller is responsible for keeping originals
inline Tensor postprocess(const Tensor& image, const std::vector<std::string>& pipeline,
                          const PostprocessRegistry& registry) {
    registry.validate(pipeline);  // unknown ids fail before any work
    Tensor out = image;
    for (const auto& id : pipeline) out = registry.at(id).apply(out);
    return out;
}

}  // namespace stylefuse
