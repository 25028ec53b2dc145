#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace detcp {

using Bytes = std::vector<std::uint8_t>;

// IPv4-style four-octet address.
struct Address {
  std::array<std::uint8_t, 4> octets{};

  static Address parse(std::string_view text);
  static std::optional<Address> try_parse(std::string_view text);
  static constexpr Address from_u32(std::uint32_t v) {
    return Address{{static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                    static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)}};
  }

  std::uint32_t to_u32() const {
    return (std::uint32_t{octets[0]} << 24) | (std::uint32_t{octets[1]} << 16) |
           (std::uint32_t{octets[2]} << 8) | std::uint32_t{octets[3]};
  }
  std::string to_string() const;

  auto operator<=>(const Address&) const = default;
};

enum class Flag : std::uint8_t { kSyn = 0x01, kAck = 0x02, kFin = 0x04, kRst = 0x08 };

struct SegmentFlags {
  std::uint8_t bits = 0;

  static constexpr std::uint8_t kKnownMask = 0x0F;

  constexpr SegmentFlags() = default;
  constexpr SegmentFlags(std::initializer_list<Flag> flags) {
    for (Flag f : flags) bits |= static_cast<std::uint8_t>(f);
  }

  constexpr bool has(Flag f) const { return (bits & static_cast<std::uint8_t>(f)) != 0; }
  constexpr void set(Flag f) { bits |= static_cast<std::uint8_t>(f); }
  constexpr void clear(Flag f) { bits &= static_cast<std::uint8_t>(~static_cast<std::uint8_t>(f)); }

  // e.g. "SA" for SYN|ACK, "." when empty.
  std::string to_string() const;

  bool operator==(const SegmentFlags&) const = default;
};

enum class OptionKind : std::uint8_t {
  kComplementaryAddr = 0x01,
  kConnectionId = 0x02,
  kSackBlocks = 0x03,
};

// Half-open range [left, right) in 32-bit sequence space.
struct SackBlock {
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  bool operator==(const SackBlock&) const = default;
};

inline constexpr std::size_t kMaxSackBlocks = 4;

// A TLV option. Values are kept as raw octets so unknown kinds survive a
// decode/encode cycle untouched.
struct SegmentOption {
  std::uint8_t kind = 0;
  Bytes value;

  static SegmentOption complementary_addr(Address addr);
  static SegmentOption connection_id(std::uint64_t id);
  static SegmentOption sack_blocks(std::span<const SackBlock> blocks);

  bool is(OptionKind k) const { return kind == static_cast<std::uint8_t>(k); }
  std::size_t encoded_size() const { return 2 + value.size(); }

  bool operator==(const SegmentOption&) const = default;
};

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kHeaderSize = 19;
inline constexpr std::size_t kMaxOptionsSize = 255;
inline constexpr std::size_t kMaxPayloadSize = 65535;
// The window field counts units of this many bytes.
inline constexpr std::uint32_t kWindowUnit = 1024;

struct Segment {
  std::uint8_t version = kWireVersion;
  SegmentFlags flags;
  std::uint16_t source_port = 0;
  std::uint16_t dest_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint16_t window = 0;
  std::vector<SegmentOption> options;
  Bytes payload;

  std::optional<Address> complementary_addr() const;
  std::optional<std::uint64_t> connection_id() const;
  // Empty when the option is absent or malformed.
  std::vector<SackBlock> sack_blocks() const;

  std::size_t options_size() const;
  std::size_t encoded_size() const { return kHeaderSize + options_size() + payload.size(); }
  std::uint64_t window_bytes() const { return std::uint64_t{window} * kWindowUnit; }
  // SYN and FIN each occupy one sequence number.
  std::uint32_t sequence_length() const {
    return static_cast<std::uint32_t>(payload.size()) + (flags.has(Flag::kSyn) ? 1 : 0) +
           (flags.has(Flag::kFin) ? 1 : 0);
  }

  bool operator==(const Segment&) const = default;
};

// Per-hop network envelope standing in for the IP header.
struct Envelope {
  Address src_addr;
  Address dst_addr;
  Segment segment;

  bool operator==(const Envelope&) const = default;
};

enum class WireErrc {
  kOptionsTooLong,
  kPayloadTooLong,
  kInvalidSegment,
  kTruncated,
  kBadChecksum,
  kBadVersion,
  kMalformedOption,
};

std::string_view to_string(WireErrc code);

class WireError : public std::runtime_error {
 public:
  WireError(WireErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  WireErrc code() const { return code_; }

 private:
  WireErrc code_;
};

// 16-bit ones-complement of the ones-complement sum of big-endian words.
std::uint16_t compute_checksum(std::span<const std::uint8_t> bytes);

// Throws WireError if the segment violates a Segment invariant.
void validate_segment(const Segment& segment);

Bytes encode_segment(const Segment& segment);
Segment decode_segment(std::span<const std::uint8_t> bytes);

// Compact one-line rendering used by traces and logs.
std::string summarize(const Segment& segment);

}  // namespace detcp
