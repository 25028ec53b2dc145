#include "detcp/wire.hpp"

#include <charconv>
#include <cstdio>

#include "detcp/seq.hpp"

namespace detcp {

namespace {

void put16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put32(Bytes& out, std::uint32_t v) {
  put16(out, static_cast<std::uint16_t>(v >> 16));
  put16(out, static_cast<std::uint16_t>(v));
}

std::uint16_t get16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>((b[at] << 8) | b[at + 1]);
}

std::uint32_t get32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{get16(b, at)} << 16) | get16(b, at + 2);
}

// Checks the length/shape rules of the three defined option kinds.
bool known_option_valid(const SegmentOption& opt) {
  switch (static_cast<OptionKind>(opt.kind)) {
    case OptionKind::kComplementaryAddr:
      return opt.value.size() == 4;
    case OptionKind::kConnectionId:
      return opt.value.size() == 8;
    case OptionKind::kSackBlocks: {
      const std::size_t n = opt.value.size();
      if (n == 0 || n % 8 != 0 || n / 8 > kMaxSackBlocks) return false;
      for (std::size_t i = 0; i < n; i += 8) {
        if (!seq_lt(get32(opt.value, i), get32(opt.value, i + 4))) return false;
      }
      return true;
    }
  }
  return true;  // unknown kinds are opaque
}

}  // namespace

Address Address::parse(std::string_view text) {
  auto addr = try_parse(text);
  if (!addr) throw std::invalid_argument("invalid address '" + std::string(text) + "'");
  return *addr;
}

std::optional<Address> Address::try_parse(std::string_view text) {
  Address addr;
  std::size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    if (i > 0) {
      if (pos >= text.size() || text[pos] != '.') return std::nullopt;
      ++pos;
    }
    unsigned value = 0;
    const char* first = text.data() + pos;
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr == first || ptr - first > 3 || value > 255) return std::nullopt;
    addr.octets[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(value);
    pos = static_cast<std::size_t>(ptr - text.data());
  }
  if (pos != text.size()) return std::nullopt;
  return addr;
}

std::string Address::to_string() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", octets[0], octets[1], octets[2], octets[3]);
  return buf;
}

std::string SegmentFlags::to_string() const {
  std::string s;
  if (has(Flag::kSyn)) s += 'S';
  if (has(Flag::kAck)) s += 'A';
  if (has(Flag::kFin)) s += 'F';
  if (has(Flag::kRst)) s += 'R';
  return s.empty() ? "." : s;
}

SegmentOption SegmentOption::complementary_addr(Address addr) {
  return {static_cast<std::uint8_t>(OptionKind::kComplementaryAddr),
          Bytes(addr.octets.begin(), addr.octets.end())};
}

SegmentOption SegmentOption::connection_id(std::uint64_t id) {
  SegmentOption opt{static_cast<std::uint8_t>(OptionKind::kConnectionId), {}};
  put32(opt.value, static_cast<std::uint32_t>(id >> 32));
  put32(opt.value, static_cast<std::uint32_t>(id));
  return opt;
}

SegmentOption SegmentOption::sack_blocks(std::span<const SackBlock> blocks) {
  SegmentOption opt{static_cast<std::uint8_t>(OptionKind::kSackBlocks), {}};
  for (const SackBlock& b : blocks) {
    put32(opt.value, b.left);
    put32(opt.value, b.right);
  }
  return opt;
}

std::optional<Address> Segment::complementary_addr() const {
  for (const auto& opt : options) {
    if (opt.is(OptionKind::kComplementaryAddr) && opt.value.size() == 4) {
      return Address{{opt.value[0], opt.value[1], opt.value[2], opt.value[3]}};
    }
  }
  return std::nullopt;
}

std::optional<std::uint64_t> Segment::connection_id() const {
  for (const auto& opt : options) {
    if (opt.is(OptionKind::kConnectionId) && opt.value.size() == 8) {
      return (std::uint64_t{get32(opt.value, 0)} << 32) | get32(opt.value, 4);
    }
  }
  return std::nullopt;
}

std::vector<SackBlock> Segment::sack_blocks() const {
  std::vector<SackBlock> blocks;
  for (const auto& opt : options) {
    if (!opt.is(OptionKind::kSackBlocks) || !known_option_valid(opt)) continue;
    for (std::size_t i = 0; i < opt.value.size(); i += 8) {
      blocks.push_back({get32(opt.value, i), get32(opt.value, i + 4)});
    }
    break;
  }
  return blocks;
}

std::size_t Segment::options_size() const {
  std::size_t n = 0;
  for (const auto& opt : options) n += opt.encoded_size();
  return n;
}

std::string_view to_string(WireErrc code) {
  switch (code) {
    case WireErrc::kOptionsTooLong: return "OPTIONS_TOO_LONG";
    case WireErrc::kPayloadTooLong: return "PAYLOAD_TOO_LONG";
    case WireErrc::kInvalidSegment: return "INVALID_SEGMENT";
    case WireErrc::kTruncated: return "TRUNCATED";
    case WireErrc::kBadChecksum: return "BAD_CHECKSUM";
    case WireErrc::kBadVersion: return "BAD_VERSION";
    case WireErrc::kMalformedOption: return "MALFORMED_OPTION";
  }
  return "UNKNOWN";
}

std::uint16_t compute_checksum(std::span<const std::uint8_t> bytes) {
  std::uint32_t sum = 0;
  std::size_t i = 0;
  for (; i + 1 < bytes.size(); i += 2) sum += get16(bytes, i);
  if (i < bytes.size()) sum += std::uint32_t{bytes[i]} << 8;
  while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

void validate_segment(const Segment& s) {
  auto fail = [](WireErrc code, const char* msg) { throw WireError(code, msg); };
  if (s.version != kWireVersion) fail(WireErrc::kBadVersion, "segment version must be 1");
  if (s.flags.bits & ~SegmentFlags::kKnownMask) fail(WireErrc::kInvalidSegment, "reserved flag bits set");
  if (!s.flags.has(Flag::kAck) && s.ack != 0) fail(WireErrc::kInvalidSegment, "ack number without ACK flag");
  if (s.flags.has(Flag::kSyn) && !s.payload.empty()) fail(WireErrc::kInvalidSegment, "SYN carries payload");
  if (s.payload.size() > kMaxPayloadSize) fail(WireErrc::kPayloadTooLong, "payload exceeds 65535 octets");
  std::size_t options_len = 0;
  for (const auto& opt : s.options) {
    if (opt.value.size() > 253) fail(WireErrc::kOptionsTooLong, "option value exceeds 253 octets");
    if (!known_option_valid(opt)) fail(WireErrc::kMalformedOption, "option value has invalid shape");
    options_len += opt.encoded_size();
  }
  if (options_len > kMaxOptionsSize) fail(WireErrc::kOptionsTooLong, "options exceed 255 octets");
}

Bytes encode_segment(const Segment& s) {
  validate_segment(s);
  const std::size_t options_len = s.options_size();

  Bytes out;
  out.reserve(kHeaderSize + options_len + s.payload.size());
  out.push_back(s.version);
  out.push_back(s.flags.bits);
  put16(out, s.source_port);
  put16(out, s.dest_port);
  put32(out, s.seq);
  put32(out, s.ack);
  put16(out, s.window);
  out.push_back(static_cast<std::uint8_t>(options_len));
  put16(out, 0);  // checksum placeholder
  for (const auto& opt : s.options) {
    out.push_back(opt.kind);
    out.push_back(static_cast<std::uint8_t>(opt.value.size()));
    out.insert(out.end(), opt.value.begin(), opt.value.end());
  }
  out.insert(out.end(), s.payload.begin(), s.payload.end());

  const std::uint16_t sum = compute_checksum(out);
  out[17] = static_cast<std::uint8_t>(sum >> 8);
  out[18] = static_cast<std::uint8_t>(sum);
  return out;
}

Segment decode_segment(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw WireError(WireErrc::kTruncated, "shorter than fixed header");
  // The stored value covers the whole datagram with the field taken as zero.
  Bytes zeroed(bytes.begin(), bytes.end());
  zeroed[17] = 0;
  zeroed[18] = 0;
  if (compute_checksum(zeroed) != get16(bytes, 17)) throw WireError(WireErrc::kBadChecksum, "checksum mismatch");
  if (bytes[0] != kWireVersion) throw WireError(WireErrc::kBadVersion, "unsupported version");

  Segment s;
  s.version = bytes[0];
  s.flags.bits = bytes[1];
  s.source_port = get16(bytes, 2);
  s.dest_port = get16(bytes, 4);
  s.seq = get32(bytes, 6);
  s.ack = get32(bytes, 10);
  s.window = get16(bytes, 14);
  const std::size_t options_len = bytes[16];
  if (bytes.size() < kHeaderSize + options_len) {
    throw WireError(WireErrc::kTruncated, "options region overruns the datagram");
  }
  const std::size_t payload_len = bytes.size() - kHeaderSize - options_len;
  if (payload_len > kMaxPayloadSize) throw WireError(WireErrc::kPayloadTooLong, "payload exceeds 65535 octets");

  auto opts = bytes.subspan(kHeaderSize, options_len);
  std::size_t at = 0;
  while (at < opts.size()) {
    if (at + 2 > opts.size()) throw WireError(WireErrc::kMalformedOption, "option header overruns region");
    const std::size_t len = opts[at + 1];
    if (at + 2 + len > opts.size()) throw WireError(WireErrc::kMalformedOption, "option value overruns region");
    SegmentOption opt{opts[at], Bytes(opts.begin() + static_cast<std::ptrdiff_t>(at + 2),
                                      opts.begin() + static_cast<std::ptrdiff_t>(at + 2 + len))};
    if (!known_option_valid(opt)) throw WireError(WireErrc::kMalformedOption, "option value has invalid shape");
    s.options.push_back(std::move(opt));
    at += 2 + len;
  }
  auto payload = bytes.subspan(kHeaderSize + options_len);
  s.payload.assign(payload.begin(), payload.end());

  if ((s.flags.bits & ~SegmentFlags::kKnownMask) || (!s.flags.has(Flag::kAck) && s.ack != 0) ||
      (s.flags.has(Flag::kSyn) && !s.payload.empty())) {
    throw WireError(WireErrc::kInvalidSegment, "header violates segment invariants");
  }
  return s;
}

std::string summarize(const Segment& s) {
  std::string out = s.flags.to_string();
  out += " seq=" + std::to_string(s.seq);
  if (s.flags.has(Flag::kAck)) out += " ack=" + std::to_string(s.ack);
  out += " len=" + std::to_string(s.payload.size());
  std::string opts;
  for (const auto& opt : s.options) {
    if (!opts.empty()) opts += ',';
    switch (opt.kind) {
      case 0x01: opts += "CA"; break;
      case 0x02: opts += "CID"; break;
      case 0x03: opts += "SACK"; break;
      default: opts += "K" + std::to_string(opt.kind);
    }
  }
  if (!opts.empty()) out += " opts=" + opts;
  return out;
}

}  // namespace detcp
