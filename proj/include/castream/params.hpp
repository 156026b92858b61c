#pragma once

// Canonical named-parameter encoding. The same byte layout backs the
// in-memory digest and the checkpoint payload, so "digest of the model" and
// "digest of the file" can never disagree. Values are 32-bit little-endian
// reals: that is the training precision, and it makes round-trips bit-exact
// for float models.

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace castream {

struct ParamRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

template <typename T>
inline ParamRecord record_of(const std::string& name, const Tensor<T>& t) {
    ParamRecord r;
    r.name = name;
    r.shape = t.shape();
    r.values.resize(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        r.values[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
    return r;
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, sizeof v);
    put_u32(out, v);
}

}  // namespace detail

// Layout: u32 record count, then per record u32 name length, name bytes,
// u32 rank, u32 per extent, f32 per value. All little-endian.
inline std::vector<std::uint8_t> encode_params(
    const std::vector<ParamRecord>& records) {
    std::vector<std::uint8_t> out;
    detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        detail::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
        for (std::int64_t d : r.shape)
            detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : r.values) detail::put_f32(out, f);
    }
    return out;
}

inline std::string digest_params(const std::vector<ParamRecord>& records) {
    auto bytes = encode_params(records);
    Fnv1a h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

template <typename T>
inline std::vector<ParamRecord> records_of(
    const std::vector<std::pair<std::string, Tensor<T>>>& named) {
    std::vector<ParamRecord> out;
    out.reserve(named.size());
    for (const auto& [name, t] : named) out.push_back(record_of(name, t));
    return out;
}

}  // namespace castream
