#pragma once

// Checkpoint file layout:
//   "dbifaunet-ckpt-v1\n"
//   u64 little-endian header length
//   JSON header {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
//   raw tensor bytes, in table order
// No timestamps are stored, so identical state gives identical files.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "dbifaunet/errors.hpp"

namespace dbifaunet {

inline constexpr const char *kCheckpointTag = "dbifaunet-ckpt-v1";

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    const torch::Tensor *find(const std::string &name) const {
        for (const auto &[n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    std::vector<std::pair<std::string, torch::Tensor>> section(const std::string &prefix) const {
        std::vector<std::pair<std::string, torch::Tensor>> out;
        for (const auto &[n, t] : tensors)
            if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
        return out;
    }
};

namespace detail {

inline std::string dtype_name(torch::ScalarType t) {
    switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw CheckpointError(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
    }
}

inline torch::ScalarType dtype_from_name(const std::string &s) {
    if (s == "float32") return torch::kFloat32;
    if (s == "float64") return torch::kFloat64;
    if (s == "int64") return torch::kInt64;
    if (s == "uint8") return torch::kUInt8;
    throw CheckpointError("checkpoint: unknown dtype " + s);
}

} // namespace detail

inline void write_checkpoint(const std::filesystem::path &path, const Checkpoint &c) {
    nlohmann::json table = nlohmann::json::array();
    std::vector<torch::Tensor> payload;
    uint64_t offset = 0;
    for (const auto &[name, t] : c.tensors) {
        auto cpu = t.detach().to(torch::kCPU).contiguous();
        const uint64_t nbytes = cpu.numel() * cpu.element_size();
        table.push_back({{"name", name}, {"dtype", detail::dtype_name(cpu.scalar_type())}, {"shape", cpu.sizes().vec()},
                         {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
        payload.push_back(cpu);
    }
    const std::string header = nlohmann::json{{"meta", c.meta}, {"tensors", table}}.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint " + tmp.string());
        f << kCheckpointTag << '\n';
        const uint64_t n = header.size();
        unsigned char len[8];
        for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(n >> (8 * i));
        f.write(reinterpret_cast<const char *>(len), 8);
        f.write(header.data(), static_cast<std::streamsize>(header.size()));
        for (const auto &t : payload)
            f.write(static_cast<const char *>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
        if (!f) throw IoError("short write on checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string tag;
    std::getline(f, tag);
    if (tag != kCheckpointTag) throw CheckpointError(path.string() + ": not a " + std::string(kCheckpointTag) + " file");
    unsigned char len[8];
    if (!f.read(reinterpret_cast<char *>(len), 8)) throw CheckpointError(path.string() + ": truncated header");
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<uint64_t>(len[i]) << (8 * i);
    std::string header(n, '\0');
    if (!f.read(header.data(), static_cast<std::streamsize>(n))) throw CheckpointError(path.string() + ": truncated header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception &e) {
        throw CheckpointError(path.string() + ": bad header: " + e.what());
    }
    const auto base = f.tellg();
    Checkpoint c;
    c.meta = h.at("meta");
    for (const auto &e : h.at("tensors")) {
        auto shape = e.at("shape").get<std::vector<int64_t>>();
        auto t = torch::empty(shape, torch::TensorOptions().dtype(detail::dtype_from_name(e.at("dtype"))));
        const auto nbytes = e.at("nbytes").get<uint64_t>();
        if (nbytes != static_cast<uint64_t>(t.numel() * t.element_size()))
            throw CheckpointError(path.string() + ": size mismatch for " + e.at("name").get<std::string>());
        f.seekg(base + static_cast<std::streamoff>(e.at("offset").get<uint64_t>()));
        if (!f.read(static_cast<char *>(t.data_ptr()), static_cast<std::streamsize>(nbytes)))
            throw CheckpointError(path.string() + ": truncated payload");
        c.tensors.emplace_back(e.at("name").get<std::string>(), t);
    }
    return c;
}

} // namespace dbifaunet
