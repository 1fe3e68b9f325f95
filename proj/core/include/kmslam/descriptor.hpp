#pragma once

#include <array>
#include <bit>
#include <cstdint>

namespace kmslam {

inline constexpr int kDescriptorBits = 256;
inline constexpr int kDescriptorWords = kDescriptorBits / 64;

/// Fixed-length binary feature descriptor.
struct Descriptor {
  std::array<std::uint64_t, kDescriptorWords> words{};

  bool get_bit(int i) const { return (words[i / 64] >> (i % 64)) & 1u; }
  void set_bit(int i, bool v) {
    const std::uint64_t mask = std::uint64_t{1} << (i % 64);
    if (v)
      words[i / 64] |= mask;
    else
      words[i / 64] &= ~mask;
  }
  void flip_bit(int i) { words[i / 64] ^= std::uint64_t{1} << (i % 64); }

  bool operator==(const Descriptor& other) const { return words == other.words; }
};

/// The one distance seam: everything that compares descriptors goes through
/// here, so swapping the descriptor type means changing this function only.
inline int descriptor_distance(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (int i = 0; i < kDescriptorWords; ++i) d += std::popcount(a.words[i] ^ b.words[i]);
  return d;
}

}  // namespace kmslam
