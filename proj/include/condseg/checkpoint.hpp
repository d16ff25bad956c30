#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "condseg/config.hpp"
#include "condseg/param_store.hpp"

namespace condseg {

// Checkpoint container: magic line, a JSON manifest (names, shapes, dtype,
// config hash, full config snapshot), a NUL separator, then the raw
// little-endian tensor payload in manifest order.
inline constexpr const char* kCkptMagic = "CONDSEGCKPT1\n";

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

template <typename T>
void save_checkpoint(const ParamStore<T>& store,
                     const std::filesystem::path& path,
                     const TrainConfig& cfg) {
    ordered_json manifest;
    manifest["dtype"] = dtype_name<T>();
    manifest["encoder_sig"] = encoder_signature(cfg);
    manifest["config"] = config_to_json(cfg);
    ordered_json tensors = ordered_json::array();
    for (const auto& [name, e] : store) {
        tensors.push_back(ordered_json{
            {"name", name},
            {"shape", {e.value.shape.n, e.value.shape.c, e.value.shape.h,
                       e.value.shape.w}},
            {"trainable", e.trainable}});
    }
    manifest["tensors"] = tensors;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out << kCkptMagic;
    out << manifest.dump() << '\0';
    for (const auto& [name, e] : store)
        out.write(reinterpret_cast<const char*>(e.value.data.data()),
                  static_cast<std::streamsize>(e.value.size() * sizeof(T)));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

struct CkptTensorInfo {
    std::string name;
    Shape shape;
    bool trainable = true;
    std::uint64_t offset = 0;  // bytes from payload start
};

struct CkptManifest {
    std::string dtype;
    std::string encoder_sig;
    ordered_json config;
    std::vector<CkptTensorInfo> tensors;
    std::uint64_t payload_start = 0;
};

inline CkptManifest read_ckpt_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    std::string magic(std::string(kCkptMagic).size(), '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (magic != kCkptMagic)
        throw std::runtime_error("not a checkpoint file: " + path.string());
    std::string mjson;
    std::getline(in, mjson, '\0');
    CkptManifest m;
    ordered_json j;
    try {
        j = ordered_json::parse(mjson);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt checkpoint manifest: " +
                                 std::string(e.what()));
    }
    m.dtype = j.at("dtype").get<std::string>();
    m.encoder_sig = j.at("encoder_sig").get<std::string>();
    m.config = j.at("config");
    const std::size_t elem = m.dtype == "f32" ? 4 : 8;
    std::uint64_t off = 0;
    for (const auto& tj : j.at("tensors")) {
        CkptTensorInfo ti;
        ti.name = tj.at("name").get<std::string>();
        auto sh = tj.at("shape");
        ti.shape = Shape(sh[0].get<int>(), sh[1].get<int>(), sh[2].get<int>(),
                         sh[3].get<int>());
        ti.trainable = tj.at("trainable").get<bool>();
        ti.offset = off;
        off += ti.shape.count() * elem;
        m.tensors.push_back(ti);
    }
    m.payload_start = static_cast<std::uint64_t>(in.tellg());
    return m;
}

// Loads every store entry whose name starts with `prefix` from the file.
// A requested name missing from the checkpoint is an error, never a skip.
template <typename T>
void load_checkpoint_into(ParamStore<T>& store,
                          const std::filesystem::path& path,
                          const std::string& prefix = "") {
    CkptManifest m = read_ckpt_manifest(path);
    if (m.dtype != dtype_name<T>())
        throw std::runtime_error("checkpoint dtype " + m.dtype +
                                 " does not match store dtype " +
                                 dtype_name<T>());
    std::map<std::string, const CkptTensorInfo*> index;
    for (const auto& ti : m.tensors) index[ti.name] = &ti;

    std::ifstream in(path, std::ios::binary);
    for (const std::string& name : store.names(prefix)) {
        auto it = index.find(name);
        if (it == index.end())
            throw std::runtime_error("checkpoint " + path.string() +
                                     " is missing requested tensor \"" + name +
                                     "\"");
        auto& entry = store.at(name);
        if (!(entry.value.shape == it->second->shape))
            throw std::runtime_error(
                "checkpoint tensor \"" + name + "\" has shape " +
                it->second->shape.str() + ", store expects " +
                entry.value.shape.str());
        in.seekg(static_cast<std::streamoff>(m.payload_start +
                                             it->second->offset));
        in.read(reinterpret_cast<char*>(entry.value.data.data()),
                static_cast<std::streamsize>(entry.value.size() * sizeof(T)));
        if (!in)
            throw std::runtime_error("checkpoint read failed at tensor \"" +
                                     name + "\"");
    }
}

}  // namespace condseg
