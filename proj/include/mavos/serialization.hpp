#pragma once

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mavos/memory.hpp"
#include "mavos/params.hpp"
#include "mavos/tensor.hpp"

namespace mavos {

// Named tensor store (.mavw): magic "MAVW" | u16 version | u32 manifest
// length | manifest JSON | payload. The manifest lists precision, tensor
// names and shapes in payload order, plus a free-form "meta" object for the
// caller. Payload scalars are packed little-endian in declaration order, so
// a round trip through disk is bit-exact.

namespace storefile {

struct RawStore {
    nlohmann::json manifest;
    std::vector<uint8_t> payload;
    uint64_t payload_offset = 0;  // where the payload started in the file
};

void write_file(const std::string& path, const std::string& manifest,
                const std::vector<uint8_t>& payload);
RawStore read_file(const std::string& path);

}  // namespace storefile

template <typename T>
const char* precision_tag();
template <>
inline const char* precision_tag<float>() {
    return "f32";
}
template <>
inline const char* precision_tag<double>() {
    return "f64";
}

namespace detail {

inline void pack_scalar(double v, uint8_t* out) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    for (int i = 0; i < 8; ++i) out[i] = static_cast<uint8_t>(u >> (8 * i));
}

inline void pack_scalar(float v, uint8_t* out) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    for (int i = 0; i < 4; ++i) out[i] = static_cast<uint8_t>(u >> (8 * i));
}

inline void unpack_scalar(const uint8_t* in, double& v) {
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(in[i]) << (8 * i);
    std::memcpy(&v, &u, 8);
}

inline void unpack_scalar(const uint8_t* in, float& v) {
    uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<uint32_t>(in[i]) << (8 * i);
    std::memcpy(&v, &u, 4);
}

}  // namespace detail

template <typename T>
void save_tensors(const std::string& path, const nlohmann::json& meta,
                  const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
    nlohmann::json manifest;
    manifest["precision"] = precision_tag<T>();
    manifest["meta"] = meta;
    nlohmann::json list = nlohmann::json::array();
    size_t scalars = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t->shape();
        list.push_back(std::move(e));
        scalars += static_cast<size_t>(t->numel());
    }
    manifest["tensors"] = std::move(list);

    std::vector<uint8_t> payload(scalars * sizeof(T));
    size_t off = 0;
    for (const auto& [name, t] : tensors) {
        for (int64_t i = 0; i < t->numel(); ++i) {
            detail::pack_scalar((*t)[i], payload.data() + off);
            off += sizeof(T);
        }
    }
    storefile::write_file(path, manifest.dump(), payload);
}

template <typename T>
struct TensorStore {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor<T>>> tensors;

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }

    Tensor<T>& require(const std::string& name) {
        Tensor<T>* t = find(name);
        if (t == nullptr) throw FormatError("tensor store is missing entry '" + name + "'");
        return *t;
    }
};

template <typename T>
TensorStore<T> load_tensors(const std::string& path) {
    storefile::RawStore raw = storefile::read_file(path);
    std::string prec;
    try {
        prec = raw.manifest.at("precision").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' manifest is missing the precision tag (" + e.what() +
                          ")");
    }
    if (prec != precision_tag<T>()) {
        throw ConfigError("'" + path + "' stores " + prec + " scalars but " + precision_tag<T>() +
                          " was requested; cross-precision import is not supported");
    }
    TensorStore<T> store;
    store.meta = raw.manifest.value("meta", nlohmann::json::object());
    size_t off = 0;
    try {
        for (const auto& e : raw.manifest.at("tensors")) {
            std::string name = e.at("name").get<std::string>();
            std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            Tensor<T> t(shape);
            size_t need = static_cast<size_t>(t.numel()) * sizeof(T);
            if (off + need > raw.payload.size()) {
                throw FormatError("'" + path + "' payload ends inside tensor '" + name +
                                  "' at byte offset " +
                                  std::to_string(raw.payload_offset + raw.payload.size()));
            }
            for (int64_t i = 0; i < t.numel(); ++i) {
                detail::unpack_scalar(raw.payload.data() + off, t[i]);
                off += sizeof(T);
            }
            store.tensors.emplace_back(std::move(name), std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' manifest tensor list is malformed (" + e.what() + ")");
    }
    if (off != raw.payload.size()) {
        throw FormatError("'" + path + "' has " + std::to_string(raw.payload.size() - off) +
                          " unexplained payload bytes at byte offset " +
                          std::to_string(raw.payload_offset + off));
    }
    return store;
}

// Save every parameter in registry order.
template <typename T>
void save_params(const std::string& path, const nlohmann::json& meta, const Params<T>& params) {
    std::vector<std::pair<std::string, const Tensor<T>*>> items;
    for (const auto& [name, t] : params.items) items.emplace_back(name, t);
    save_tensors(path, meta, items);
}

// Load into an existing registry; every registered name must be present with
// a matching shape.
template <typename T>
nlohmann::json load_params(const std::string& path, Params<T>& params) {
    TensorStore<T> store = load_tensors<T>(path);
    for (auto& [name, dst] : params.items) {
        Tensor<T>& src = store.require(name);
        if (src.shape() != dst->shape()) {
            throw ConfigError("'" + path + "' tensor '" + name + "' has shape " + src.shape_str() +
                              " but the model expects " + dst->shape_str());
        }
        *dst = std::move(src);
    }
    return store.meta;
}

// ---- memory bank snapshots ----

template <typename T>
void save_bank(const std::string& path, const MemoryBank<T>& bank) {
    nlohmann::json meta;
    meta["policy"] = policy_name(bank.policy());
    meta["delta"] = bank.delta();
    meta["window"] = bank.window_size();
    meta["grid_h"] = bank.grid_h();
    meta["grid_w"] = bank.grid_w();
    meta["last_frame"] = bank.last_frame();
    nlohmann::json slots = nlohmann::json::array();
    std::vector<std::pair<std::string, const Tensor<T>*>> items;
    for (size_t i = 0; i < bank.slots().size(); ++i) {
        const auto& s = bank.slots()[i];
        nlohmann::json e;
        e["frame"] = s.frame_index;
        e["reference"] = s.is_reference;
        e["merges"] = s.merge_count;
        slots.push_back(std::move(e));
        items.emplace_back("slot" + std::to_string(i), &s.tokens);
    }
    meta["slots"] = std::move(slots);
    save_tensors(path, meta, items);
}

template <typename T>
MemoryBank<T> load_bank(const std::string& path) {
    TensorStore<T> store = load_tensors<T>(path);
    const nlohmann::json& meta = store.meta;
    std::vector<MemorySlot<T>> slots;
    try {
        size_t i = 0;
        for (const auto& e : meta.at("slots")) {
            MemorySlot<T> s;
            s.tokens = store.require("slot" + std::to_string(i));
            s.frame_index = e.at("frame").get<long>();
            s.is_reference = e.at("reference").get<bool>();
            s.merge_count = e.at("merges").get<int>();
            slots.push_back(std::move(s));
            ++i;
        }
        MemoryBank<T> bank(parse_policy(meta.at("policy").get<std::string>()),
                           meta.at("delta").get<int>(), meta.value("window", 4));
        bank.restore(bank.policy(), bank.delta(), bank.window_size(),
                     meta.at("grid_h").get<int>(), meta.at("grid_w").get<int>(),
                     meta.at("last_frame").get<long>(), std::move(slots));
        return bank;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "' bank snapshot manifest is malformed (" + e.what() + ")");
    }
}

}  // namespace mavos
