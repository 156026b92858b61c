#pragma once

// Single-file model container. Layout, all little-endian:
//
//   bytes 0..4   magic "CAST1"
//   u32          header length
//   header       compact JSON (kind, configs, digests, seed)
//   payload      encode_params() bytes
//
// The header stores an FNV-1a digest of the payload; readers verify it and
// report tampering, truncation, and foreign files as distinct errors so the
// CLI can tell the user which failure it actually hit.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "backbone.hpp"
#include "common.hpp"
#include "params.hpp"
#include "stream.hpp"

namespace castream {

struct CheckpointMagicError : IoError {
    using IoError::IoError;
};
struct CheckpointTruncatedError : IoError {
    using IoError::IoError;
};
struct CheckpointDigestError : IoError {
    using IoError::IoError;
};
struct CheckpointHeaderError : IoError {
    using IoError::IoError;
};

namespace detail {
constexpr char kMagic[5] = {'C', 'A', 'S', 'T', '1'};
}

struct Checkpoint {
    nlohmann::json header;
    std::vector<ParamRecord> params;
};

inline void write_checkpoint(const std::string& path, nlohmann::json header,
                             const std::vector<ParamRecord>& params) {
    std::vector<std::uint8_t> payload = encode_params(params);
    header["digest"] = digest_params(params);
    std::string hdr = header.dump();
    if (hdr.size() > 0x7fffffff) throw IoError("checkpoint: header too large");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(detail::kMagic, 5);
    std::uint32_t hlen = static_cast<std::uint32_t>(hdr.size());
    unsigned char lenb[4] = {
        static_cast<unsigned char>(hlen & 0xff),
        static_cast<unsigned char>((hlen >> 8) & 0xff),
        static_cast<unsigned char>((hlen >> 16) & 0xff),
        static_cast<unsigned char>((hlen >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(lenb), 4);
    f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 9)
        throw CheckpointTruncatedError(path + ": file too short for header");
    if (std::memcmp(buf.data(), detail::kMagic, 5) != 0)
        throw CheckpointMagicError(path + ": not a model checkpoint");
    std::uint32_t hlen = static_cast<std::uint32_t>(buf[5]) |
                         static_cast<std::uint32_t>(buf[6]) << 8 |
                         static_cast<std::uint32_t>(buf[7]) << 16 |
                         static_cast<std::uint32_t>(buf[8]) << 24;
    if (buf.size() < 9 + static_cast<std::size_t>(hlen))
        throw CheckpointTruncatedError(path + ": header truncated");

    Checkpoint ck;
    try {
        ck.header = nlohmann::json::parse(buf.begin() + 9,
                                          buf.begin() + 9 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointHeaderError(path + ": header is not valid JSON (" +
                                    e.what() + ")");
    }
    if (!ck.header.is_object() || !ck.header.contains("digest") ||
        !ck.header["digest"].is_string())
        throw CheckpointHeaderError(path + ": header lacks a digest field");

    // Parameter payload: count, then per-record name/shape/values.
    std::size_t pos = 9 + hlen;
    auto need = [&](std::size_t n) {
        if (buf.size() - pos < n)
            throw CheckpointTruncatedError(
                path + ": parameter payload truncated at byte " +
                std::to_string(pos));
    };
    auto get_u32 = [&]() {
        need(4);
        std::uint32_t v = static_cast<std::uint32_t>(buf[pos]) |
                          static_cast<std::uint32_t>(buf[pos + 1]) << 8 |
                          static_cast<std::uint32_t>(buf[pos + 2]) << 16 |
                          static_cast<std::uint32_t>(buf[pos + 3]) << 24;
        pos += 4;
        return v;
    };

    Fnv1a digest;
    std::size_t payload_start = pos;
    std::uint32_t count = get_u32();
    ck.params.resize(count);
    for (std::uint32_t r = 0; r < count; ++r) {
        ParamRecord& rec = ck.params[r];
        std::uint32_t name_len = get_u32();
        need(name_len);
        rec.name.assign(reinterpret_cast<const char*>(buf.data() + pos),
                        name_len);
        pos += name_len;
        std::uint32_t rank = get_u32();
        if (rank > 8)
            throw CheckpointHeaderError(path + ": implausible tensor rank");
        rec.shape.resize(rank);
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint32_t ext = get_u32();
            if (ext == 0)
                throw CheckpointHeaderError(path + ": zero tensor extent");
            rec.shape[d] = static_cast<std::int64_t>(ext);
            numel *= rec.shape[d];
            if (numel > (std::int64_t{1} << 31))
                throw CheckpointHeaderError(path + ": implausible tensor size");
        }
        need(static_cast<std::size_t>(numel) * 4);
        rec.values.resize(static_cast<std::size_t>(numel));
        for (std::int64_t i = 0; i < numel; ++i) {
            std::uint32_t bits = static_cast<std::uint32_t>(buf[pos]) |
                                 static_cast<std::uint32_t>(buf[pos + 1]) << 8 |
                                 static_cast<std::uint32_t>(buf[pos + 2])
                                     << 16 |
                                 static_cast<std::uint32_t>(buf[pos + 3])
                                     << 24;
            float v;
            std::memcpy(&v, &bits, 4);
            rec.values[static_cast<std::size_t>(i)] = v;
            pos += 4;
        }
    }
    if (pos != buf.size())
        throw CheckpointHeaderError(path + ": trailing bytes after payload");
    digest.update(buf.data() + payload_start, pos - payload_start);
    if (digest.hex() != ck.header["digest"].get<std::string>())
        throw CheckpointDigestError(path +
                                    ": parameter digest mismatch (corrupt?)");
    return ck;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint

namespace detail {

inline nlohmann::json backbone_json(const BackboneConfig& c, bool frozen) {
    return nlohmann::json{{"blocks_per_stage", c.blocks_per_stage},
                          {"class_count", c.class_count},
                          {"frozen", frozen},
                          {"input_channels", c.input_channels},
                          {"input_size", c.input_size},
                          {"seed", c.seed},
                          {"widths", c.widths}};
}

inline nlohmann::json stream_json(const StreamConfig& c) {
    return nlohmann::json{{"mode", to_string(c.mode)},
                          {"seed", c.seed},
                          {"start_stage", c.start_stage},
                          {"variant", to_string(c.variant)}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.blocks_per_stage = j.at("blocks_per_stage").get<std::int64_t>();
    c.class_count = j.at("class_count").get<std::int64_t>();
    c.input_channels = j.at("input_channels").get<std::int64_t>();
    c.input_size = j.at("input_size").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.widths = j.at("widths").get<std::vector<std::int64_t>>();
    return c;
}

inline StreamConfig stream_from_json(const nlohmann::json& j) {
    StreamConfig c;
    c.mode = parse_class_mode(j.at("mode").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.start_stage = j.at("start_stage").get<std::int64_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    return c;
}

template <typename T>
inline void apply_records(
    std::vector<std::pair<std::string, Tensor<T>>> named,
    const std::vector<ParamRecord>& records, const std::string& path) {
    if (named.size() != records.size())
        throw CheckpointHeaderError(path + ": parameter count mismatch");
    for (std::size_t i = 0; i < named.size(); ++i) {
        const ParamRecord& rec = records[i];
        Tensor<T>& dst = named[i].second;
        if (rec.name != named[i].first)
            throw CheckpointHeaderError(path + ": parameter '" + rec.name +
                                        "' does not match expected '" +
                                        named[i].first + "'");
        if (rec.shape != dst.shape())
            throw CheckpointHeaderError(path + ": shape mismatch for '" +
                                        rec.name + "'");
        for (std::int64_t k = 0; k < dst.numel(); ++k)
            dst.data()[k] =
                static_cast<T>(rec.values[static_cast<std::size_t>(k)]);
    }
}

}  // namespace detail

template <typename T>
inline void save_model(const std::string& path, const Model<T>& model,
                       nlohmann::json extra = {}) {
    nlohmann::json header;
    header["format"] = "castream-model";
    header["kind"] = model.stream ? "backbone+stream" : "backbone";
    header["backbone"] =
        detail::backbone_json(model.backbone.config(), model.backbone.frozen());
    header["backbone_digest"] = model.backbone.param_digest();
    if (model.stream) header["stream"] = detail::stream_json(model.stream->config());
    for (auto& [k, v] : extra.items()) header[k] = v;

    std::vector<std::pair<std::string, Tensor<T>>> named =
        model.backbone.named_params();
    if (model.stream) {
        auto sp = model.stream->named_params();
        named.insert(named.end(), sp.begin(), sp.end());
    }
    write_checkpoint(path, header, records_of(named));
}

template <typename T>
inline Model<T> load_model(const std::string& path,
                           nlohmann::json* header_out = nullptr) {
    Checkpoint ck = read_checkpoint(path);
    const nlohmann::json& h = ck.header;
    if (!h.contains("format") || h["format"] != "castream-model")
        throw CheckpointHeaderError(path + ": not a model checkpoint header");
    std::string kind = h.at("kind").get<std::string>();
    if (kind != "backbone" && kind != "backbone+stream")
        throw CheckpointHeaderError(path + ": unknown checkpoint kind '" +
                                    kind + "'");

    BackboneConfig bc;
    bool frozen = false;
    StreamConfig sc;
    try {
        bc = detail::backbone_from_json(h.at("backbone"));
        frozen = h.at("backbone").value("frozen", false);
        if (kind == "backbone+stream")
            sc = detail::stream_from_json(h.at("stream"));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointHeaderError(path + ": malformed config block (" +
                                    e.what() + ")");
    }

    Model<T> model{StagedBackbone<T>(bc), std::nullopt};
    std::vector<std::pair<std::string, Tensor<T>>> named =
        model.backbone.named_params();
    if (kind == "backbone+stream") {
        model.stream.emplace(model.backbone.stages(), bc.class_count, sc);
        auto sp = model.stream->named_params();
        named.insert(named.end(), sp.begin(), sp.end());
    }
    detail::apply_records(named, ck.params, path);
    if (frozen) model.backbone.freeze();

    // The payload digest already passed; the stored per-component digest
    // must agree with a recompute from the loaded tensors.
    if (h.contains("backbone_digest") &&
        model.backbone.param_digest() !=
            h["backbone_digest"].get<std::string>())
        throw CheckpointDigestError(path + ": backbone digest mismatch");
    if (header_out) *header_out = ck.header;
    return model;
}

}  // namespace castream
