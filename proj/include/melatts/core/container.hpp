#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "melatts/core/matrix.hpp"

namespace melatts {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary containers are written little-endian; big-endian hosts are unsupported");

// Single-file binary container: 4-byte magic, u32 little-endian header
// length, UTF-8 JSON header, then a raw little-endian float32 payload.
// Used for both mel archives and model checkpoints.
inline constexpr char kContainerMagic[4] = {'M', 'T', 'B', 'C'};

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// Writes atomically: temp file in the same directory, then rename.
inline void write_container(const std::string& path, const json& header, const float* payload, size_t count) {
    namespace fs = std::filesystem;
    const std::string header_str = header.dump();
    if (header_str.size() > 0xffffffffULL) throw std::runtime_error("container header too large");

    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
        out.write(kContainerMagic, 4);
        const uint32_t len = static_cast<uint32_t>(header_str.size());
        out.write(reinterpret_cast<const char*>(&len), 4);
        out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        if (count > 0) out.write(reinterpret_cast<const char*>(payload), static_cast<std::streamsize>(count * sizeof(float)));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

struct ContainerData {
    json header;
    std::vector<float> payload;
};

inline ContainerData read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kContainerMagic, 4) != 0)
        throw std::runtime_error("not a melatts container: " + path);
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    if (!in) throw std::runtime_error("truncated container header: " + path);
    std::string header_str(len, '\0');
    in.read(header_str.data(), len);
    if (!in) throw std::runtime_error("truncated container header: " + path);

    ContainerData out;
    out.header = json::parse(header_str);

    in.seekg(0, std::ios::end);
    const auto end = in.tellg();
    const size_t payload_bytes = static_cast<size_t>(end) - 8 - len;
    if (payload_bytes % sizeof(float) != 0) throw std::runtime_error("corrupt payload size: " + path);
    out.payload.resize(payload_bytes / sizeof(float));
    in.seekg(8 + static_cast<std::streamoff>(len), std::ios::beg);
    if (!out.payload.empty())
        in.read(reinterpret_cast<char*>(out.payload.data()), static_cast<std::streamsize>(payload_bytes));
    if (!in) throw std::runtime_error("truncated payload: " + path);
    return out;
}

}  // namespace melatts
