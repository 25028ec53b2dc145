#include <random>

#include "doctest.h"
#include "detcp/seq.hpp"
#include "detcp/wire.hpp"
#include "gen.hpp"

using namespace detcp;

namespace {

// Straight RFC 1071 style sum, written independently of the codec.
std::uint16_t oracle_checksum(const Bytes& b) {
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < b.size(); i += 2) {
    const std::uint32_t hi = b[i];
    const std::uint32_t lo = i + 1 < b.size() ? b[i + 1] : 0;
    sum += (hi << 8) | lo;
  }
  while (sum > 0xFFFF) sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum & 0xFFFF);
}

Bytes with_checksum(Bytes b) {
  b[17] = b[18] = 0;
  const std::uint16_t c = oracle_checksum(b);
  b[17] = static_cast<std::uint8_t>(c >> 8);
  b[18] = static_cast<std::uint8_t>(c);
  return b;
}

WireErrc decode_error(const Bytes& b) {
  try {
    decode_segment(b);
  } catch (const WireError& e) {
    return e.code();
  }
  FAIL("decode succeeded");
  return WireErrc::kInvalidSegment;
}

}  // namespace

TEST_CASE("checksum arithmetic") {
  CHECK(compute_checksum(Bytes{0, 0, 0, 0}) == 0xFFFF);
  CHECK(compute_checksum(Bytes{0x01}) == 0xFEFF);  // word 0x0100
  CHECK(compute_checksum(Bytes{}) == 0xFFFF);
  // carry wraps around: 0xFFFF + 0x0001 = 0x0001 after folding
  CHECK(compute_checksum(Bytes{0xFF, 0xFF, 0x00, 0x01}) == oracle_checksum(Bytes{0xFF, 0xFF, 0x00, 0x01}));

  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    Bytes b(rng() % 64);
    for (auto& x : b) x = static_cast<std::uint8_t>(rng());
    CHECK(compute_checksum(b) == oracle_checksum(b));
  }
}

TEST_CASE("bare SYN encodes to the hand-built 19 octets") {
  Segment s;
  s.flags = {Flag::kSyn};
  s.source_port = 5000;
  s.dest_port = 80;
  const Bytes got = encode_segment(s);
  const Bytes want = with_checksum(
      {0x01, 0x01, 0x13, 0x88, 0x00, 0x50, 0, 0, 0, 0, 0, 0, 0, 0, 0x00, 0x00, 0x00, 0x00, 0x00});
  CHECK(got.size() == 19);
  CHECK(got == want);
  CHECK(got[17] == 0xEB);
  CHECK(got[18] == 0x26);
}

TEST_CASE("option TLVs") {
  Segment s;
  s.flags = {Flag::kSyn};
  s.source_port = 40000;
  s.dest_port = 8080;
  s.seq = 0x01020304;
  s.window = 0x0100;
  s.options = {SegmentOption::complementary_addr(Address::parse("10.0.1.2")),
               SegmentOption::connection_id(0x1122334455667788ULL)};
  const Bytes got = encode_segment(s);
  REQUIRE(got.size() == 19 + 6 + 10);
  CHECK(got[16] == 16);
  const Bytes ca(got.begin() + 19, got.begin() + 25);
  CHECK(ca == Bytes{0x01, 0x04, 0x0A, 0x00, 0x01, 0x02});
  const Bytes cid(got.begin() + 25, got.end());
  CHECK(cid == Bytes{0x02, 0x08, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88});
  CHECK(got[6] == 0x01);
  CHECK(got[9] == 0x04);
  CHECK(got[14] == 0x01);
  CHECK(got[15] == 0x00);

  const Segment back = decode_segment(got);
  CHECK(back == s);
  CHECK(back.complementary_addr() == Address::parse("10.0.1.2"));
  CHECK(back.connection_id() == 0x1122334455667788ULL);
}

TEST_CASE("SACK option layout") {
  Segment s;
  s.flags = {Flag::kAck};
  s.ack = 1000;
  const std::vector<SackBlock> blocks{{2000, 3000}, {0xFFFFFF00u, 0x00000100u}};
  s.options = {SegmentOption::sack_blocks(blocks)};
  const Bytes got = encode_segment(s);
  const Bytes tlv(got.begin() + 19, got.end());
  CHECK(tlv == Bytes{0x03, 16, 0, 0, 0x07, 0xD0, 0, 0, 0x0B, 0xB8, 0xFF, 0xFF, 0xFF, 0x00, 0, 0, 0x01, 0x00});
  CHECK(decode_segment(got).sack_blocks() == blocks);
}

TEST_CASE("hand-built encoding with an unknown option decodes and is kept") {
  Bytes raw{0x01, 0x02, 0x00, 0x50, 0x13, 0x88, 0, 0, 0, 7, 0, 0, 0, 9, 0x00, 0x10, 0x03, 0, 0,
            0x7F, 0x01, 0xAA, 'h', 'i'};
  raw = with_checksum(raw);
  const Segment s = decode_segment(raw);
  CHECK(s.flags == SegmentFlags{Flag::kAck});
  CHECK(s.source_port == 80);
  CHECK(s.dest_port == 5000);
  CHECK(s.seq == 7);
  CHECK(s.ack == 9);
  CHECK(s.window_bytes() == 16 * 1024);
  REQUIRE(s.options.size() == 1);
  CHECK(s.options[0].kind == 0x7F);
  CHECK(s.options[0].value == Bytes{0xAA});
  CHECK(s.payload == Bytes{'h', 'i'});
  CHECK(encode_segment(s) == raw);
}

TEST_CASE("decode errors") {
  CHECK(decode_error({}) == WireErrc::kTruncated);
  CHECK(decode_error(Bytes(18, 0)) == WireErrc::kTruncated);

  Segment s;
  s.flags = {Flag::kAck};
  s.payload = {1, 2, 3};
  Bytes b = encode_segment(s);
  b[20] ^= 0x40;
  CHECK(decode_error(b) == WireErrc::kBadChecksum);

  Bytes v = encode_segment(s);
  v[0] = 2;
  CHECK(decode_error(with_checksum(v)) == WireErrc::kBadVersion);

  // options_len claims more octets than exist
  Bytes t = encode_segment(Segment{});
  t[16] = 4;
  CHECK(decode_error(with_checksum(t)) == WireErrc::kTruncated);

  // TLV length runs past the options region
  Bytes m{0x01, 0, 0, 1, 0, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x03, 0, 0, 0x7F, 0x05, 0x00};
  CHECK(decode_error(with_checksum(m)) == WireErrc::kMalformedOption);

  // a CONNECTION_ID that is not 8 octets
  Bytes c{0x01, 0, 0, 1, 0, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x04, 0, 0, 0x02, 0x02, 0x00, 0x01};
  CHECK(decode_error(with_checksum(c)) == WireErrc::kMalformedOption);
}

TEST_CASE("encode rejects invalid segments") {
  auto code = [](const Segment& s) {
    try {
      encode_segment(s);
    } catch (const WireError& e) {
      return e.code();
    }
    return WireErrc::kInvalidSegment;
  };
  Segment big;
  big.payload.resize(kMaxPayloadSize + 1);
  CHECK(code(big) == WireErrc::kPayloadTooLong);

  Segment opts;
  for (int i = 0; i < 26; ++i) opts.options.push_back(SegmentOption::connection_id(i));  // 260 octets
  CHECK(code(opts) == WireErrc::kOptionsTooLong);

  Segment syn;
  syn.flags = {Flag::kSyn};
  syn.payload = {1};
  CHECK_THROWS_AS(encode_segment(syn), WireError);

  Segment reversed;
  reversed.options = {SegmentOption::sack_blocks(std::vector<SackBlock>{{10, 5}})};
  CHECK(code(reversed) == WireErrc::kMalformedOption);

  Segment max;
  max.payload.resize(kMaxPayloadSize);
  CHECK(encode_segment(max).size() == 19 + kMaxPayloadSize);
}

TEST_CASE("round trip and corruption, sampled") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    const Segment s = test::random_segment(rng);
    const Bytes b = encode_segment(s);
    REQUIRE(b.size() == kHeaderSize + s.options_size() + s.payload.size());
    REQUIRE(decode_segment(b) == s);
    Bytes bad = b;
    bad[rng() % bad.size()] ^= static_cast<std::uint8_t>(1 + rng() % 255);
    CHECK_THROWS_AS(decode_segment(bad), WireError);
  }
}

TEST_CASE("sequence arithmetic across the wrap") {
  const std::uint32_t isn = 0xFFFFFFFFu - 4999;  // 2^32 - 5000
  CHECK(seq_lt(isn, isn + 10000));
  CHECK(seq_gt(5000, isn));
  CHECK(seq_diff(100, 0xFFFFFF00u) == 356);
  CHECK(wrap_seq(6000, isn) == 1000);
  CHECK(unwrap_seq(1000, isn, 5500) == 6000);
  CHECK(unwrap_seq(isn + 10, isn, 0) == 10);
  // a position just past 2^32 stays ahead of its reference
  const std::uint64_t far = (std::uint64_t{1} << 32) + 20;
  CHECK(unwrap_seq(wrap_seq(far, isn), isn, far - 100) == far);
}

TEST_CASE("address text") {
  CHECK(Address::parse("10.0.1.2").to_u32() == 0x0A000102u);
  CHECK(Address::from_u32(0xC0A80001u).to_string() == "192.168.0.1");
  CHECK_FALSE(Address::try_parse("10.0.1"));
  CHECK_FALSE(Address::try_parse("10.0.1.256"));
  CHECK(SegmentFlags{Flag::kSyn, Flag::kAck}.to_string() == "SA");
}
