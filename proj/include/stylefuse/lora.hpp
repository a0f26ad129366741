#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stylefuse/autograd.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/random.hpp"
#include "stylefuse/tensor.hpp"

namespace stylefuse {

// Low-rank residual on one projection weight W (n x m):
//   W' = W + scale * U V^T,  U (n x r), V (m x r), r << min(n, m).
// Zero-init on U keeps the adapted forward identical to the base model.
struct LoraAdapter {
    std::string target;
    ag::Var U;
    ag::Var V;
    double scale = 1.0;
    bool merged  = false;

    int rank() const { return U->value.dim(1); }

    Tensor delta() const {
        int n = U->value.dim(0), m = V->value.dim(0), r = rank();
        Tensor d({n, m});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                double acc = 0.0;
                for (int k = 0; k < r; ++k) acc += U->value.at(i, k) * V->value.at(j, k);
                d.at(i, j) = acc * scale;
            }
        return d;
    }
};

using LoraPtr = std::shared_ptr<LoraAdapter>;

inline LoraPtr make_lora(const std::string& target, int n, int m, int rank, Rng& rng,
                         double scale = 1.0, double v_init_std = 0.01) {
    if (rank < 1 || rank >= std::min(n, m))
        throw ConfigError("lora rank " + std::to_string(rank) + " invalid for " +
                          std::to_string(n) + "x" + std::to_string(m) + " target " + target);
    auto a    = std::make_shared<LoraAdapter>();
    a->target = target;
    a->U      = ag::leaf(Tensor({n, rank}, 0.0));
    a->V      = ag::leaf(rng.normal_tensor({m, rank}, 0.0, v_init_std));
    a->scale  = scale;
    return a;
}

// One projection weight slot. The base tensor is frozen; it only ever changes
// through merge/unmerge, and the adapter contributes through the graph so
// gradients reach U and V but never the base.
struct Projection {
    Tensor base;  // (n x m), applied as x -> W x via matmul_nt(rows, W)
    LoraPtr adapter;

    ag::Var effective() const {
        if (adapter && !adapter->merged) {
            ag::Var dw = ag::matmul_nt(adapter->U, adapter->V);
            return ag::add(ag::constant(base), ag::scale(dw, adapter->scale));
        }
        return ag::constant(base);
    }
};

class ProjectionRegistry {
public:
    void add(const std::string& name, Tensor base) {
        slots_[name] = Projection{std::move(base), nullptr};
        order_.push_back(name);
    }

    const std::vector<std::string>& names() const { return order_; }

    Projection& at(const std::string& name) {
        auto it = slots_.find(name);
        if (it == slots_.end()) throw ConfigError("unknown projection target: " + name);
        return it->second;
    }
    const Projection& at(const std::string& name) const {
        auto it = slots_.find(name);
        if (it == slots_.end()) throw ConfigError("unknown projection target: " + name);
        return it->second;
    }

    void attach(const LoraPtr& adapter) {
        Projection& p = at(adapter->target);
        if (p.adapter) throw StateError("adapter already attached to " + adapter->target);
        if (adapter->U->value.dim(0) != p.base.dim(0) ||
            adapter->V->value.dim(0) != p.base.dim(1))
            throw ConfigError("adapter shape does not match target " + adapter->target);
        p.adapter = adapter;
    }

    LoraPtr detach(const std::string& name) {
        Projection& p = at(name);
        if (!p.adapter) throw StateError("no adapter attached to " + name);
        if (p.adapter->merged) throw StateError("detach while merged: " + name);
        LoraPtr out = std::move(p.adapter);
        p.adapter   = nullptr;
        return out;
    }

    void merge(const std::string& name) {
        Projection& p = at(name);
        if (!p.adapter) throw StateError("merge: no adapter on " + name);
        if (p.adapter->merged) throw StateError("merge: adapter already merged on " + name);
        Tensor d = p.adapter->delta();
        for (int64_t i = 0; i < p.base.numel(); ++i) p.base[i] += d[i];
        p.adapter->merged = true;
    }

    void unmerge(const std::string& name) {
        Projection& p = at(name);
        if (!p.adapter || !p.adapter->merged) throw StateError("unmerge: adapter not merged on " + name);
        Tensor d = p.adapter->delta();
        for (int64_t i = 0; i < p.base.numel(); ++i) p.base[i] -= d[i];
        p.adapter->merged = false;
    }

    std::vector<LoraPtr> adapters() const {
        std::vector<LoraPtr> out;
        for (const auto& name : order_) {
            const auto& p = slots_.at(name);
            if (p.adapter) out.push_back(p.adapter);
        }
        return out;
    }

    uint64_t base_hash() const {
        uint64_t h = 1469598103934665603ULL;
        for (const auto& name : order_) {
            h = fnv1a64(name.data(), name.size(), h);
            h = tensor_hash(slots_.at(name).base, h);
        }
        return h;
    }

private:
    std::map<std::string, Projection> slots_;
    std::vector<std::string> order_;
};

// Attach fresh adapters to every selected target. `selector` entries are
// matched as substrings; an empty selector means all projections.
inline std::vector<LoraPtr> attach_lora(ProjectionRegistry& reg,
                                        const std::vector<std::string>& selector, int rank,
                                        Rng& rng, double scale = 1.0, double v_init_std = 0.01) {
    std::vector<std::string> targets;
    for (const auto& name : reg.names()) {
        bool hit = selector.empty();
        for (const auto& s : selector) hit = hit || name.find(s) != std::string::npos;
        if (hit) targets.push_back(name);
    }
    if (targets.empty()) throw ConfigError("lora selector matched no projection targets");
    std::vector<LoraPtr> out;
    for (const auto& t : targets) {
        const Projection& p = reg.at(t);
        auto a = make_lora(t, p.base.dim(0), p.base.dim(1), rank, rng, scale, v_init_std);
        reg.attach(a);
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace stylefuse
