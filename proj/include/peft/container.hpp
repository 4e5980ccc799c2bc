#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "peft/error.hpp"
#include "peft/tensor.hpp"

// Shared binary container for weights, adapters and checkpoints.
//
// Layout (all integers little-endian):
//   magic   "APFW"
//   version u16 (currently 1)
//   kind    4 bytes ("ENCW" encoder, "ADPT" adapter, "CKPT" checkpoint)
//   meta    u32 count, then per entry: u32 key len, key bytes,
//                                      u32 value len, value bytes
//   tensors u32 count, then per tensor: u32 name len, name bytes,
//           u32 rank, u32 dims[rank], f32 payload (row-major)
//
// Tensors are written in the caller's canonical order so identical content
// always produces byte-identical files.

namespace peft {

constexpr std::uint16_t kContainerVersion = 1;

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

struct Container {
    std::string kind;
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    const std::string& meta_at(const std::string& key) const {
        const auto it = meta.find(key);
        if (it == meta.end()) throw FormatError("container: missing metadata key \"" + key + "\"");
        return it->second;
    }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, sizeof(bits));
    put_u32(out, bits);
}

class Reader {
public:
    Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    std::string take(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size())
            throw FormatError("container " + path_ + ": truncated while reading " + what + " at offset " +
                              std::to_string(pos_));
        std::string out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::uint16_t u16(const char* what) {
        const std::string b = take(2, what);
        return static_cast<std::uint16_t>(static_cast<unsigned char>(b[0]) |
                                          (static_cast<unsigned char>(b[1]) << 8));
    }

    std::uint32_t u32(const char* what) {
        const std::string b = take(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }

    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, sizeof(f));
        return f;
    }

    void f32_block(float* dst, std::size_t n, const char* what) {
        if (pos_ + 4 * n > bytes_.size())
            throw FormatError("container " + path_ + ": truncated while reading " + what + " at offset " +
                              std::to_string(pos_));
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (int b = 3; b >= 0; --b)
                bits = (bits << 8) | static_cast<unsigned char>(bytes_[pos_ + 4 * i + static_cast<std::size_t>(b)]);
            std::memcpy(dst + i, &bits, sizeof(float));
        }
        pos_ += 4 * n;
    }

    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }
    const std::string& path() const { return path_; }

private:
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_container(const std::string& path, const std::string& kind,
                            const std::map<std::string, std::string>& meta,
                            const std::vector<NamedTensor>& tensors) {
    if (kind.size() != 4) throw ContractError("container kind must be 4 bytes, got \"" + kind + "\"");
    std::string out;
    out += "APFW";
    detail::put_u16(out, kContainerVersion);
    out += kind;
    detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        detail::put_u32(out, static_cast<std::uint32_t>(k.size()));
        out += k;
        detail::put_u32(out, static_cast<std::uint32_t>(v.size()));
        out += v;
    }
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (Tensor<float>::count(t.shape) != t.values.size())
            throw ContractError("container: tensor \"" + t.name + "\" shape/value mismatch");
        detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (const auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (const auto v : t.values) detail::put_f32(out, v);
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("container: cannot open \"" + tmp + "\" for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw FormatError("container: short write to \"" + tmp + "\"");
    }
    std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("container: cannot open \"" + path + "\"");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r(std::move(bytes), path);

    if (r.take(4, "magic") != "APFW")
        throw FormatError("container " + path + ": bad magic at offset 0");
    const std::uint16_t version = r.u16("version");
    if (version != kContainerVersion)
        throw FormatError("container " + path + ": unsupported version " + std::to_string(version));

    Container c;
    c.kind = r.take(4, "kind");
    const std::uint32_t meta_count = r.u32("metadata count");
    for (std::uint32_t i = 0; i < meta_count; ++i) {
        const std::uint32_t klen = r.u32("metadata key length");
        std::string key = r.take(klen, "metadata key");
        const std::uint32_t vlen = r.u32("metadata value length");
        c.meta.emplace(std::move(key), r.take(vlen, "metadata value"));
    }
    const std::uint32_t tensor_count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        NamedTensor t;
        const std::uint32_t nlen = r.u32("tensor name length");
        t.name = r.take(nlen, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw FormatError("container " + path + ": implausible rank " + std::to_string(rank) +
                                        " at offset " + std::to_string(r.pos()));
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape.push_back(r.u32("tensor dimension"));
            numel *= t.shape.back();
        }
        t.values.resize(numel);
        r.f32_block(t.values.data(), numel, ("tensor \"" + t.name + "\" payload").c_str());
        c.tensors.push_back(std::move(t));
    }
    if (!r.at_end())
        throw FormatError("container " + path + ": " + std::to_string(r.pos()) + " bytes parsed but file has trailing data");
    return c;
}

}  // namespace peft
