#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylefuse/backend.hpp"
#include "stylefuse/errors.hpp"
#include "stylefuse/tensor.hpp"

namespace stylefuse {

using nlohmann::json;

// ---- named-tensor container (little-endian, f64) ----

inline void write_tensor_blob(const std::string& path,
                              const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    auto put_u32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    out.write("SFTB", 4);
    put_u32(1u);
    put_u32(static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) {
            int64_t d = t.dim(i);
            out.write(reinterpret_cast<const char*>(&d), 8);
        }
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * 8));
    }
}

inline std::map<std::string, Tensor> read_tensor_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read tensor file " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, "SFTB", 4) != 0) throw ValidationError("bad tensor file: " + path);
    auto get_u32 = [&] {
        uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    if (get_u32() != 1u) throw ValidationError("unsupported tensor format version in " + path);
    uint32_t count = get_u32();
    std::map<std::string, Tensor> out;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t len = get_u32();
        std::string name(len, '\0');
        in.read(name.data(), len);
        uint32_t ndim = get_u32();
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) {
            int64_t v = 0;
            in.read(reinterpret_cast<char*>(&v), 8);
            shape[d] = static_cast<int>(v);
        }
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
        if (!in) throw ValidationError("truncated tensor file: " + path);
        out[name] = std::move(t);
    }
    return out;
}

// ---- checkpoint directory: manifest.json + tensors.bin ----

inline void save_checkpoint(const std::string& dir, DiffusionBackend& backend, int phase,
                            const json& config_echo, const json& provenance) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::vector<std::pair<std::string, Tensor>> tensors;
    json concepts = json::array();
    for (const auto& id : backend.concept_ids()) {
        tensors.push_back({"embedding." + id, backend.concept_embedding(id)->value});
        concepts.push_back({{"id", id}});
    }
    json lora = json::array();
    for (const auto& a : backend.projections().adapters()) {
        tensors.push_back({"lora." + a->target + ".U", a->U->value});
        tensors.push_back({"lora." + a->target + ".V", a->V->value});
        lora.push_back({{"target", a->target}, {"rank", a->rank()}, {"scale", a->scale}});
    }

    json manifest;
    manifest["format_version"]  = 1;
    manifest["phase"]           = phase;
    manifest["concepts"]        = concepts;
    manifest["lora"]            = lora;
    manifest["schedule_hash"]   = hash_hex(backend.schedule().hash());
    manifest["base_param_hash"] = hash_hex(backend.base_param_hash());
    manifest["tensors_file"]    = "tensors.bin";
    manifest["config"]          = config_echo;
    manifest["provenance"]      = provenance;

    write_tensor_blob((fs::path(dir) / "tensors.bin").string(), tensors);
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

struct CheckpointData {
    json manifest;
    std::map<std::string, Tensor> tensors;
};

inline CheckpointData load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path mf = fs::path(dir) / "manifest.json";
    if (!fs::exists(mf)) throw ValidationError("no checkpoint manifest at " + mf.string());
    CheckpointData data;
    std::ifstream in(mf);
    try {
        in >> data.manifest;
    } catch (const json::exception& e) {
        throw ValidationError("corrupt checkpoint manifest " + mf.string() + ": " + e.what());
    }
    std::string tf = data.manifest.value("tensors_file", "tensors.bin");
    data.tensors   = read_tensor_blob((fs::path(dir) / tf).string());
    return data;
}

// Restores embeddings and (when present) LoRA adapters onto a freshly
// constructed backend. The schedule and frozen weights must match.
inline void apply_checkpoint(DiffusionBackend& backend, const CheckpointData& data) {
    if (data.manifest.value("schedule_hash", "") != hash_hex(backend.schedule().hash()))
        throw ConfigError("checkpoint schedule does not match backend schedule");
    if (data.manifest.value("base_param_hash", "") != hash_hex(backend.base_param_hash()))
        throw ConfigError("checkpoint base parameters do not match backend");

    for (const auto& c : data.manifest.at("concepts")) {
        std::string id = c.at("id").get<std::string>();
        auto it        = data.tensors.find("embedding." + id);
        if (it == data.tensors.end()) throw ValidationError("checkpoint missing embedding." + id);
        ag::Var e = backend.concept_embedding(id);  // throws ConfigError if unregistered
        if (!e->value.same_shape(it->second))
            throw ConfigError("embedding shape mismatch for concept " + id);
        e->value = it->second;
    }
    for (const auto& l : data.manifest.at("lora")) {
        std::string target = l.at("target").get<std::string>();
        const Tensor& U    = data.tensors.at("lora." + target + ".U");
        const Tensor& V    = data.tensors.at("lora." + target + ".V");
        auto a             = std::make_shared<LoraAdapter>();
        a->target          = target;
        a->U               = ag::leaf(U);
        a->V               = ag::leaf(V);
        a->scale           = l.at("scale").get<double>();
        backend.projections().attach(a);
    }
}

// Identity of the learned state: tensors plus the manifest with provenance
// stripped, so split-phase and phase-all runs can be compared.
inline uint64_t checkpoint_hash(const std::string& dir) {
    namespace fs = std::filesystem;
    CheckpointData data = load_checkpoint(dir);
    data.manifest.erase("provenance");
    std::string m = data.manifest.dump();
    uint64_t h    = fnv1a64(m.data(), m.size());
    for (const auto& [name, t] : data.tensors) {
        h = fnv1a64(name.data(), name.size(), h);
        h = tensor_hash(t, h);
    }
    return h;
}

}  // namespace stylefuse
