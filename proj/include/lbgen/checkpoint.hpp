#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lbgen/errors.hpp"
#include "lbgen/hashing.hpp"
#include "lbgen/tensor.hpp"

namespace lbgen {

// Tensor-dump checkpoint file (shared by encoder, generator, adapter,
// discriminator and trainer state):
//
//   bytes 0..7   magic + version tag, ASCII "LBTD0001"
//   bytes 8..15  u64 little-endian: length of the JSON header
//   header       JSON: {"kind": ..., "dtype": "f32"|"f64",
//                       "tensors": [{"name": ..., "shape": [...]}, ...],
//                       "meta": {...}}
//   payload      tensors back to back, little-endian floats in header order
//
// "f32" payloads are up-converted to double on load. Trainer state is always
// written as "f64" so an interrupted run resumes bit-exactly.
struct Checkpoint {
    std::string kind;
    std::string dtype = "f64";
    std::vector<std::pair<std::string, Tensor>> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw DomainError("checkpoint: missing tensor '" + name + "'");
    }

    bool has_tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }

    void add(const std::string& name, Tensor t) { tensors.emplace_back(name, std::move(t)); }

    std::vector<unsigned char> serialize() const {
        require(dtype == "f64" || dtype == "f32",
                "checkpoint: dtype must be f64 or f32, got '" + dtype + "'");
        nlohmann::json header;
        header["kind"] = kind;
        header["dtype"] = dtype;
        header["meta"] = meta;
        nlohmann::json tl = nlohmann::json::array();
        for (const auto& [name, t] : tensors)
            tl.push_back({{"name", name}, {"shape", t.shape}});
        header["tensors"] = tl;
        std::string hs = header.dump();

        std::vector<unsigned char> out;
        const char magic[9] = "LBTD0001";
        out.insert(out.end(), magic, magic + 8);
        std::uint64_t hlen = hs.size();
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(hlen >> (8 * i)));
        out.insert(out.end(), hs.begin(), hs.end());
        for (const auto& [name, t] : tensors) {
            if (dtype == "f32") {
                for (double v : t.data) {
                    float f = static_cast<float>(v);
                    unsigned char b[4];
                    std::memcpy(b, &f, 4);
                    out.insert(out.end(), b, b + 4);
                }
            } else {
                for (double v : t.data) {
                    unsigned char b[8];
                    std::memcpy(b, &v, 8);
                    out.insert(out.end(), b, b + 8);
                }
            }
        }
        return out;
    }

    std::string file_hash() const { return content_hash(serialize()); }
};

// Hash of a file's raw bytes (hex digest), for provenance records.
inline std::string file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return content_hash(bytes);
}

// Atomic write: temp file in the target directory, then rename.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    auto bytes = ck.serialize();
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "checkpoint: cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        require(out.good(), "checkpoint: short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::string& expected_kind = "") {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "checkpoint: cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    require(bytes.size() >= 16, "checkpoint: truncated file " + path.string());
    require(std::memcmp(bytes.data(), "LBTD", 4) == 0,
            "checkpoint: bad magic in " + path.string());
    require(std::memcmp(bytes.data(), "LBTD0001", 8) == 0,
            "checkpoint: unsupported version tag in " + path.string() +
                " (expected LBTD0001)");
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
    require(bytes.size() >= 16 + hlen, "checkpoint: truncated header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw DomainError("checkpoint: corrupt header in " + path.string() + ": " + e.what());
    }

    Checkpoint ck;
    ck.kind = header.at("kind").get<std::string>();
    ck.dtype = header.at("dtype").get<std::string>();
    ck.meta = header.value("meta", nlohmann::json::object());
    require(ck.dtype == "f32" || ck.dtype == "f64",
            "checkpoint: unknown dtype '" + ck.dtype + "'");
    if (!expected_kind.empty())
        require(ck.kind == expected_kind, "checkpoint: expected kind '" + expected_kind +
                                              "' but file holds '" + ck.kind + "'");

    std::size_t offset = 16 + hlen;
    std::size_t word = ck.dtype == "f32" ? 4 : 8;
    for (const auto& entry : header.at("tensors")) {
        Tensor t;
        t.shape = entry.at("shape").get<std::vector<std::size_t>>();
        std::size_t n = Tensor::numel_of(t.shape);
        require(offset + n * word <= bytes.size(),
                "checkpoint: truncated payload in " + path.string());
        t.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (word == 4) {
                float f;
                std::memcpy(&f, bytes.data() + offset, 4);
                t.data[i] = static_cast<double>(f);
            } else {
                std::memcpy(&t.data[i], bytes.data() + offset, 8);
            }
            offset += word;
        }
        ck.add(entry.at("name").get<std::string>(), std::move(t));
    }
    require(offset == bytes.size(), "checkpoint: trailing bytes in " + path.string());
    return ck;
}

}  // namespace lbgen
