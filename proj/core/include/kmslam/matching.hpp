#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "kmslam/descriptor.hpp"

namespace kmslam {

struct TwoNearest {
  int index = -1;
  int best = std::numeric_limits<int>::max();
  int second = std::numeric_limits<int>::max();
};

TwoNearest two_nearest(const Descriptor& query, const std::vector<Descriptor>& candidates);

struct MatchParams {
  double ratio = 0.8;   // accept when best < ratio * second
  int max_distance = 50;
};

/// One-way matching a -> b with ratio test and distance gate. Duplicate
/// targets resolved by smallest distance. Returns (index_in_a, index_in_b).
std::vector<std::pair<std::uint32_t, std::uint32_t>> match_descriptor_sets(
    const std::vector<Descriptor>& a, const std::vector<Descriptor>& b,
    const MatchParams& params);

/// Pairs that are each other's nearest neighbor within the distance gate.
std::vector<std::pair<std::uint32_t, std::uint32_t>> mutual_matches(
    const std::vector<Descriptor>& a, const std::vector<Descriptor>& b, int max_distance);

}  // namespace kmslam
