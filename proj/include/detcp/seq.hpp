#pragma once

#include <cstdint>

namespace detcp {

// Modulo-2^32 sequence comparisons.
constexpr std::int32_t seq_diff(std::uint32_t a, std::uint32_t b) {
  return static_cast<std::int32_t>(a - b);
}
constexpr bool seq_lt(std::uint32_t a, std::uint32_t b) { return seq_diff(a, b) < 0; }
constexpr bool seq_le(std::uint32_t a, std::uint32_t b) { return seq_diff(a, b) <= 0; }
constexpr bool seq_gt(std::uint32_t a, std::uint32_t b) { return seq_diff(a, b) > 0; }
constexpr bool seq_ge(std::uint32_t a, std::uint32_t b) { return seq_diff(a, b) >= 0; }

// Maps a wire sequence number to a 64-bit stream offset relative to `isn`,
// choosing the candidate nearest `reference` (an offset already known).
constexpr std::uint64_t unwrap_seq(std::uint32_t seq, std::uint32_t isn, std::uint64_t reference) {
  const std::uint32_t rel = seq - isn;
  const std::uint64_t base = reference & ~std::uint64_t{0xFFFFFFFF};
  std::uint64_t candidate = base | rel;
  constexpr std::uint64_t kHalf = std::uint64_t{1} << 31;
  constexpr std::uint64_t kSpan = std::uint64_t{1} << 32;
  if (candidate > reference && candidate - reference > kHalf && candidate >= kSpan) {
    candidate -= kSpan;
  } else if (candidate < reference && reference - candidate > kHalf) {
    candidate += kSpan;
  }
  return candidate;
}

constexpr std::uint32_t wrap_seq(std::uint64_t offset, std::uint32_t isn) {
  return isn + static_cast<std::uint32_t>(offset);
}

}  // namespace detcp
