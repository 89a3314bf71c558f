#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "fedst/binio.hpp"
#include "fedst/param_tree.hpp"

namespace fedst {

// Round-message wire format, magic "FSTM":
//   u16 version, u8 direction, u32 round, u32 site_id, u32 sample_count,
//   u32 entry count, entries (u16-length-prefixed UTF-8 path, u8 dtype tag,
//   u32 rank, u32 dims..., little-endian f64 payload), trailing CRC32.
// Only shared-parameter paths may appear in a payload; the encoder refuses
// anything else and the decoder verifies the checksum.

enum class Direction : std::uint8_t { SiteToServer = 0, ServerToSite = 1 };

struct TensorBlob {
    Shape shape;
    std::vector<double> values;

    bool operator==(const TensorBlob& o) const = default;
};

using PayloadMap = std::map<std::string, TensorBlob>;

struct RoundMessage {
    Direction direction = Direction::SiteToServer;
    std::uint32_t round = 0;
    std::uint32_t site_id = 0;
    std::uint32_t sample_count = 0;
    PayloadMap payload;

    bool operator==(const RoundMessage& o) const = default;
};

constexpr std::uint16_t kWireVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

inline PayloadMap payload_from_tree(const ParamTree& tree, ParamRole role) {
    PayloadMap out;
    for (const auto& [path, t] : tree.entries())
        if (tree.role(path) == role) out.emplace(path, TensorBlob{t.shape(), t.data()});
    return out;
}

inline Bytes encode_message(const RoundMessage& msg, const std::set<std::string>& shared_paths) {
    for (const auto& [path, blob] : msg.payload)
        if (!shared_paths.count(path))
            throw ProtocolError("refusing to serialize non-shared path: " + path);

    ByteWriter wr;
    wr.put_bytes("FSTM", 4);
    wr.put_u16(kWireVersion);
    wr.put_u8(static_cast<std::uint8_t>(msg.direction));
    wr.put_u32(msg.round);
    wr.put_u32(msg.site_id);
    wr.put_u32(msg.sample_count);
    wr.put_u32(static_cast<std::uint32_t>(msg.payload.size()));
    for (const auto& [path, blob] : msg.payload) {
        wr.put_string(path);
        wr.put_u8(kDtypeF64);
        wr.put_u32(static_cast<std::uint32_t>(blob.shape.size()));
        std::int64_t numel = 1;
        for (int d : blob.shape) {
            wr.put_u32(static_cast<std::uint32_t>(d));
            numel *= d;
        }
        if (numel != static_cast<std::int64_t>(blob.values.size()))
            throw ProtocolError("payload blob size does not match its dims: " + path);
        for (double v : blob.values) wr.put_f64(v);
    }
    const std::uint32_t crc = crc32(wr.bytes());
    wr.put_u32(crc);
    return wr.take();
}

inline RoundMessage decode_message_impl(const Bytes& bytes) {
    ByteReader rd(bytes.data(), bytes.size() - 4);
    if (std::memcmp(rd.take(4), "FSTM", 4) != 0) throw ProtocolError("bad message magic");
    if (rd.get_u16() != kWireVersion) throw ProtocolError("unsupported message version");

    RoundMessage msg;
    const std::uint8_t dir = rd.get_u8();
    if (dir > 1) throw ProtocolError("bad direction byte");
    msg.direction = static_cast<Direction>(dir);
    msg.round = rd.get_u32();
    msg.site_id = rd.get_u32();
    msg.sample_count = rd.get_u32();
    const std::uint32_t entries = rd.get_u32();
    for (std::uint32_t e = 0; e < entries; ++e) {
        const std::string path = rd.get_string();
        if (rd.get_u8() != kDtypeF64) throw ProtocolError("unsupported dtype tag");
        const std::uint32_t rank = rd.get_u32();
        TensorBlob blob;
        std::int64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint32_t d = rd.get_u32();
            if (d == 0) throw ProtocolError("zero dim in payload");
            blob.shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        if (numel * 8 > static_cast<std::int64_t>(rd.remaining()))
            throw ProtocolError("truncated payload");
        blob.values.reserve(static_cast<std::size_t>(numel));
        for (std::int64_t i = 0; i < numel; ++i) blob.values.push_back(rd.get_f64());
        if (!msg.payload.emplace(path, std::move(blob)).second)
            throw ProtocolError("duplicate path in payload: " + path);
    }
    if (!rd.done()) throw ProtocolError("trailing bytes in message");
    return msg;
}

inline RoundMessage decode_message(const Bytes& bytes) {
    if (bytes.size() < 4 + 2 + 1 + 4 * 4 + 4) throw ProtocolError("message too short");
    const std::uint32_t want_crc = crc32(bytes.data(), bytes.size() - 4);
    ByteReader tail(bytes.data() + bytes.size() - 4, 4);
    if (tail.get_u32() != want_crc) throw ProtocolError("message checksum mismatch");
    try {
        return decode_message_impl(bytes);
    } catch (const DataError& e) {
        throw ProtocolError(std::string("malformed message: ") + e.what());
    }
}

} // namespace fedst
