#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "dynpool/binary_io.hpp"
#include "dynpool/tape.hpp"

// Checkpoint container: "DPK1", u64 header length, JSON header
// {"tensors": [{"name", "dtype": "f32", "shape"}...], "metadata": {...}}, then the raw
// little-endian f32 payloads in header order.

namespace dynpool {

inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'K', '1'};

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

struct Checkpoint {
    std::vector<NamedTensor> tensors;
    nlohmann::json metadata = nlohmann::json::object();

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.value;
        return nullptr;
    }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    nlohmann::json header;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : ck.tensors) header["tensors"].push_back({{"name", t.name}, {"dtype", "f32"}, {"shape", t.value.shape()}});
    header["metadata"] = ck.metadata;
    const std::string text = header.dump();
    os.write(kCheckpointMagic, 4);
    io::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), std::streamsize(text.size()));
    for (const auto& t : ck.tensors) io::write_array(os, t.value.ptr(), t.value.size());
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) throw std::runtime_error("not a DPK1 checkpoint");
    const auto n = io::read_le<std::uint64_t>(is);
    if (n > (std::uint64_t{1} << 32)) throw std::runtime_error("checkpoint header too large");
    std::string text(n, '\0');
    if (!is.read(text.data(), std::streamsize(n))) throw std::runtime_error("truncated checkpoint header");
    const auto header = nlohmann::json::parse(text);
    Checkpoint ck;
    ck.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        if (entry.at("dtype") != "f32") throw std::runtime_error("unsupported dtype " + entry.at("dtype").dump());
        Tensor<float> t(entry.at("shape").get<Shape>());
        io::read_array(is, t.ptr(), t.size());
        ck.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
    }
    return ck;
}

/// Writes through a temporary file so an interrupted save never replaces a good checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        write_checkpoint(os, ck);
        if (!os) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    return read_checkpoint(is);
}

template <class T>
Checkpoint snapshot(const ParameterStore<T>& store, nlohmann::json metadata = nlohmann::json::object()) {
    Checkpoint ck;
    ck.metadata = std::move(metadata);
    for (std::size_t i = 0; i < store.size(); ++i) ck.tensors.push_back({store[i].name, store[i].value.template cast<float>()});
    return ck;
}

/// Copies checkpoint values into an already built store. Every store tensor must be present with
/// its exact shape; the error lists all missing or mismatched names.
template <class T>
void restore(ParameterStore<T>& store, const Checkpoint& ck) {
    std::string missing, mismatched;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto* t = ck.find(store[i].name);
        if (!t) missing += " " + store[i].name;
        else if (t->shape() != store[i].value.shape()) mismatched += " " + store[i].name;
    }
    if (!missing.empty() || !mismatched.empty()) {
        std::string msg = "checkpoint does not match model;";
        if (!missing.empty()) msg += " missing tensors:" + missing + ";";
        if (!mismatched.empty()) msg += " shape mismatch:" + mismatched + ";";
        throw std::runtime_error(msg);
    }
    for (std::size_t i = 0; i < store.size(); ++i) store[i].value = ck.find(store[i].name)->template cast<T>();
}

}  // namespace dynpool
