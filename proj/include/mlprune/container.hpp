// SPDX-License-Identifier: Apache-2.0
//
// Tensor container: a safetensors-compatible file holding named f32 tensors
// and a string-to-string metadata map.
//
//   [u64 LE header length H][H bytes of JSON header][raw LE f32 data]
//
// The JSON header maps each tensor name to
// {"dtype":"F32","shape":[...],"data_offsets":[begin,end]} with offsets
// relative to the start of the data section, plus a "__metadata__" object.

#pragma once

#include "mlprune/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace mlprune {

inline constexpr const char * kFormatVersion    = "1";
inline constexpr const char * kFormatVersionKey = "format_version";

struct TensorRecord {
    std::string              name;
    std::vector<std::size_t> shape;
    std::vector<float>       data;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) {
            n *= d;
        }
        return n;
    }

    bool operator==(const TensorRecord &) const = default;
};

struct Container {
    std::map<std::string, std::string> metadata;
    std::vector<TensorRecord>          records;

    const TensorRecord * find(std::string_view name) const {
        for (const auto & r : records) {
            if (r.name == name) {
                return &r;
            }
        }
        return nullptr;
    }

    const TensorRecord & at(std::string_view name) const {
        if (const auto * r = find(name)) {
            return *r;
        }
        throw Error("container: missing tensor '" + std::string(name) + "'");
    }

    const std::string & meta(const std::string & key) const {
        auto it = metadata.find(key);
        if (it == metadata.end()) {
            throw Error("container: missing metadata key '" + key + "'");
        }
        return it->second;
    }

    void add(std::string name, std::vector<std::size_t> shape, std::vector<float> data) {
        records.push_back({std::move(name), std::move(shape), std::move(data)});
    }

    void add_matrix(std::string name, const MatrixF & m) {
        add(std::move(name), {m.rows(), m.cols()}, m.storage());
    }

    bool operator==(const Container &) const = default;
};

namespace detail {

inline void put_u64_le(std::string & out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline std::uint64_t get_u64_le(std::string_view in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
    }
    return v;
}

inline void put_f32_le(std::string & out, std::span<const float> values) {
    const std::size_t base = out.size();
    out.resize(base + values.size() * 4);
    if constexpr (std::endian::native == std::endian::little) {
        if (!values.empty()) {
            std::memcpy(out.data() + base, values.data(), values.size() * 4);
        }
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(values[i]);
            for (int b = 0; b < 4; ++b) {
                out[base + i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
            }
        }
    }
}

inline void get_f32_le(std::string_view in, std::vector<float> & out) {
    out.resize(in.size() / 4);
    if constexpr (std::endian::native == std::endian::little) {
        if (!out.empty()) {
            std::memcpy(out.data(), in.data(), out.size() * 4);
        }
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[i * 4 + b])) << (8 * b);
            }
            out[i] = std::bit_cast<float>(bits);
        }
    }
}

inline std::size_t checked_numel(const std::vector<std::size_t> & shape, const std::string & name) {
    std::size_t n = 1;
    for (auto d : shape) {
        if (d != 0 && n > std::numeric_limits<std::size_t>::max() / 4 / d) {
            throw Error("container: shape of '" + name + "' overflows");
        }
        n *= d;
    }
    return n;
}

} // namespace detail

// Deterministic encoding: header keys are emitted in sorted order and tensor
// data is laid out in record order. The header is space-padded to a multiple
// of 8 bytes, as safetensors writers do.
inline std::string serialize(const Container & c) {
    nlohmann::json header = nlohmann::json::object();

    nlohmann::json meta = nlohmann::json::object();
    for (const auto & [k, v] : c.metadata) {
        if (k == kFormatVersionKey) {
            throw Error("container: metadata key '" + k + "' is reserved");
        }
        meta[k] = v;
    }
    meta[kFormatVersionKey] = kFormatVersion;
    header["__metadata__"]  = std::move(meta);

    std::set<std::string> seen;
    std::uint64_t         offset = 0;
    for (const auto & r : c.records) {
        if (r.name.empty() || r.name == "__metadata__") {
            throw Error("container: invalid tensor name '" + r.name + "'");
        }
        if (!seen.insert(r.name).second) {
            throw Error("container: duplicate tensor name '" + r.name + "'");
        }
        const std::size_t n = detail::checked_numel(r.shape, r.name);
        if (n != r.data.size()) {
            throw Error("container: tensor '" + r.name + "' data length does not match shape");
        }
        const std::uint64_t end = offset + static_cast<std::uint64_t>(n) * 4;
        header[r.name]          = {{"dtype", "F32"}, {"shape", r.shape}, {"data_offsets", {offset, end}}};
        offset                  = end;
    }

    std::string json = header.dump();
    json.append((8 - json.size() % 8) % 8, ' ');

    std::string out;
    out.reserve(8 + json.size() + offset);
    detail::put_u64_le(out, json.size());
    out += json;
    for (const auto & r : c.records) {
        detail::put_f32_le(out, r.data);
    }
    return out;
}

// Records come back ordered by data offset, so parse followed by serialize
// reproduces the original bytes for anything serialize() wrote.
inline Container parse(std::string_view bytes) {
    if (bytes.size() < 8) {
        throw Error("container: truncated (missing length prefix)");
    }
    const std::uint64_t hlen = detail::get_u64_le(bytes);
    if (hlen > bytes.size() - 8) {
        throw Error("container: truncated (header length exceeds file size)");
    }
    const std::string_view hbytes = bytes.substr(8, hlen);
    const std::string_view data   = bytes.substr(8 + hlen);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hbytes);
    } catch (const nlohmann::json::exception & e) {
        throw Error(std::string("container: malformed header: ") + e.what());
    }
    if (!header.is_object()) {
        throw Error("container: malformed header: not a JSON object");
    }

    Container c;

    struct Extent {
        std::uint64_t begin, end;
        std::size_t   index;
    };
    std::vector<Extent> extents;

    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string & key = it.key();
        const auto &        val = it.value();
        if (key == "__metadata__") {
            if (!val.is_object()) {
                throw Error("container: malformed header: __metadata__ is not an object");
            }
            for (auto m = val.begin(); m != val.end(); ++m) {
                if (!m.value().is_string()) {
                    throw Error("container: malformed header: metadata value for '" + m.key() + "' is not a string");
                }
                c.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (!val.is_object() || !val.contains("dtype") || !val.contains("shape") || !val.contains("data_offsets")) {
            throw Error("container: malformed header entry for '" + key + "'");
        }
        const auto & dtype = val["dtype"];
        if (!dtype.is_string() || dtype.get<std::string>() != "F32") {
            throw Error("container: unknown dtype for '" + key + "': " + dtype.dump());
        }
        const auto & shape   = val["shape"];
        const auto & offsets = val["data_offsets"];
        if (!shape.is_array() || !offsets.is_array() || offsets.size() != 2) {
            throw Error("container: malformed header entry for '" + key + "'");
        }
        TensorRecord rec;
        rec.name = key;
        for (const auto & d : shape) {
            if (!d.is_number_unsigned()) {
                throw Error("container: malformed shape for '" + key + "'");
            }
            rec.shape.push_back(d.get<std::size_t>());
        }
        if (!offsets[0].is_number_unsigned() || !offsets[1].is_number_unsigned()) {
            throw Error("container: malformed data_offsets for '" + key + "'");
        }
        const auto begin = offsets[0].get<std::uint64_t>();
        const auto end   = offsets[1].get<std::uint64_t>();
        if (begin > end || end > data.size()) {
            throw Error("container: out-of-bounds extent for '" + key + "'");
        }
        const std::size_t n = detail::checked_numel(rec.shape, key);
        if (end - begin != static_cast<std::uint64_t>(n) * 4) {
            throw Error("container: extent size of '" + key + "' does not match its shape");
        }
        extents.push_back({begin, end, c.records.size()});
        c.records.push_back(std::move(rec));
    }

    auto version = c.metadata.find(kFormatVersionKey);
    if (version != c.metadata.end()) {
        if (version->second != kFormatVersion) {
            throw Error("container: version mismatch (file has " + version->second + ", expected " + kFormatVersion + ")");
        }
        c.metadata.erase(version);
    }

    std::sort(extents.begin(), extents.end(), [](const Extent & a, const Extent & b) {
        return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
    });
    std::uint64_t cursor = 0;
    for (const auto & e : extents) {
        if (e.begin < cursor) {
            throw Error("container: overlapping extent for '" + c.records[e.index].name + "'");
        }
        if (e.begin > cursor) {
            throw Error("container: gap in data section before '" + c.records[e.index].name + "'");
        }
        cursor = e.end;
    }
    if (cursor != data.size()) {
        throw Error("container: data section has " + std::to_string(data.size() - cursor) + " trailing bytes");
    }

    std::vector<TensorRecord> ordered;
    ordered.reserve(extents.size());
    for (const auto & e : extents) {
        auto & rec = c.records[e.index];
        detail::get_f32_le(data.substr(e.begin, e.end - e.begin), rec.data);
        ordered.push_back(std::move(rec));
    }
    c.records = std::move(ordered);
    return c;
}

inline void save(const Container & c, const std::filesystem::path & path) {
    const std::string bytes = serialize(c);
    std::ofstream     out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("container: cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("container: write failed for '" + path.string() + "'");
    }
}

inline std::string read_file(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Container load(const std::filesystem::path & path) {
    return parse(read_file(path));
}

} // namespace mlprune
