#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "fedst/transport.hpp"
#include "fedst/wire.hpp"

using namespace fedst;

namespace {

RoundMessage random_message(Rng& rng, int entries) {
    RoundMessage msg;
    msg.direction = rng.uniform() < 0.5 ? Direction::SiteToServer : Direction::ServerToSite;
    msg.round = static_cast<std::uint32_t>(rng.uniform_int(0, 500));
    msg.site_id = static_cast<std::uint32_t>(rng.uniform_int(0, 7));
    msg.sample_count = static_cast<std::uint32_t>(rng.uniform_int(1, 100));
    for (int e = 0; e < entries; ++e) {
        TensorBlob blob;
        const int r = rng.uniform_int(1, 3);
        std::int64_t n = 1;
        for (int i = 0; i < r; ++i) {
            blob.shape.push_back(rng.uniform_int(1, 4));
            n *= blob.shape.back();
        }
        for (std::int64_t i = 0; i < n; ++i) blob.values.push_back(rng.normal());
        msg.payload.emplace("path." + std::to_string(e), std::move(blob));
    }
    return msg;
}

std::set<std::string> all_paths(const RoundMessage& msg) {
    std::set<std::string> s;
    for (const auto& [p, b] : msg.payload) s.insert(p);
    return s;
}

} // namespace

TEST_CASE("message round-trip is bit-exact on random payloads") {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        RoundMessage msg = random_message(rng, rng.uniform_int(0, 6));
        const Bytes wire = encode_message(msg, all_paths(msg));
        RoundMessage back = decode_message(wire);
        REQUIRE(back == msg);
        REQUIRE(encode_message(back, all_paths(back)) == wire);
    }
}

TEST_CASE("wire layout starts with the magic and version") {
    Rng rng(1);
    RoundMessage msg = random_message(rng, 1);
    msg.direction = Direction::ServerToSite;
    const Bytes wire = encode_message(msg, all_paths(msg));
    REQUIRE(wire[0] == 'F');
    REQUIRE(wire[1] == 'S');
    REQUIRE(wire[2] == 'T');
    REQUIRE(wire[3] == 'M');
    REQUIRE(wire[4] == 1); // version u16 LE
    REQUIRE(wire[5] == 0);
    REQUIRE(wire[6] == 1); // direction byte
}

TEST_CASE("corrupted messages are rejected") {
    Rng rng(7);
    RoundMessage msg = random_message(rng, 3);
    Bytes wire = encode_message(msg, all_paths(msg));

    SECTION("flipped payload byte breaks the checksum") {
        wire[wire.size() / 2] ^= 0x40;
        REQUIRE_THROWS_AS(decode_message(wire), ProtocolError);
    }
    SECTION("flipped checksum byte") {
        wire.back() ^= 0x01;
        REQUIRE_THROWS_AS(decode_message(wire), ProtocolError);
    }
    SECTION("truncation") {
        wire.resize(wire.size() - 1);
        REQUIRE_THROWS_AS(decode_message(wire), ProtocolError);
    }
    SECTION("bad magic") {
        wire[0] = 'X';
        REQUIRE_THROWS_AS(decode_message(wire), ProtocolError);
    }
}

TEST_CASE("encoder refuses non-shared paths") {
    Rng rng(9);
    RoundMessage msg = random_message(rng, 2);
    std::set<std::string> shared = all_paths(msg);
    shared.erase(shared.begin()); // declare one path private
    REQUIRE_THROWS_AS(encode_message(msg, shared), ProtocolError);
}

TEST_CASE("in-process queue is ordered and exactly-once") {
    InProcessQueueTransport tr(2);
    tr.send_to_server(0, Bytes{1});
    tr.send_to_server(0, Bytes{2});
    tr.send_to_server(1, Bytes{3});
    REQUIRE(tr.recv_at_server(0) == Bytes{1});
    REQUIRE(tr.recv_at_server(0) == Bytes{2});
    REQUIRE(tr.recv_at_server(1) == Bytes{3});
    REQUIRE_THROWS_AS(tr.recv_at_server(0), ProtocolError);
    REQUIRE(tr.bytes_sent() == 3);

    std::size_t captured = 0;
    tr.set_capture([&](const Bytes&) { ++captured; });
    tr.send_to_site(1, Bytes{9, 9});
    REQUIRE(captured == 1);
    REQUIRE(tr.recv_at_site(1) == Bytes{9, 9});
}

TEST_CASE("loopback socket transport delivers framed messages") {
    LoopbackSocketTransport tr(2, 0);
    REQUIRE(tr.port() != 0);

    // small messages both directions
    tr.send_to_server(0, Bytes{42});
    tr.send_to_site(1, Bytes{7, 8});
    REQUIRE(tr.recv_at_server(0) == Bytes{42});
    REQUIRE(tr.recv_at_site(1) == Bytes{7, 8});

    // a message bigger than typical socket buffers must not deadlock the
    // sequential send-then-receive pattern
    Bytes big(3 << 20);
    for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<std::uint8_t>(i * 31);
    tr.send_to_server(1, big);
    REQUIRE(tr.recv_at_server(1) == big);

    // per-peer ordering
    tr.send_to_site(0, Bytes{1});
    tr.send_to_site(0, Bytes{2});
    REQUIRE(tr.recv_at_site(0) == Bytes{1});
    REQUIRE(tr.recv_at_site(0) == Bytes{2});
}
