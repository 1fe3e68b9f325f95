#include "kmslam/matching.hpp"

#include <algorithm>
#include <map>

namespace kmslam {

TwoNearest two_nearest(const Descriptor& query, const std::vector<Descriptor>& candidates) {
  TwoNearest result;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const int d = descriptor_distance(query, candidates[i]);
    if (d < result.best) {
      result.second = result.best;
      result.best = d;
      result.index = static_cast<int>(i);
    } else if (d < result.second) {
      result.second = d;
    }
  }
  return result;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> match_descriptor_sets(
    const std::vector<Descriptor>& a, const std::vector<Descriptor>& b,
    const MatchParams& params) {
  // target index in b -> (distance, source index in a), keeping the closest
  std::map<std::uint32_t, std::pair<int, std::uint32_t>> claimed;
  for (std::uint32_t i = 0; i < a.size(); ++i) {
    const TwoNearest nn = two_nearest(a[i], b);
    if (nn.index < 0) continue;
    if (nn.best > params.max_distance) continue;
    if (nn.second != std::numeric_limits<int>::max() &&
        !(nn.best < params.ratio * nn.second))
      continue;
    const auto j = static_cast<std::uint32_t>(nn.index);
    auto it = claimed.find(j);
    if (it == claimed.end() || nn.best < it->second.first) claimed[j] = {nn.best, i};
  }
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  out.reserve(claimed.size());
  for (const auto& [j, entry] : claimed) out.push_back({entry.second, j});
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> mutual_matches(
    const std::vector<Descriptor>& a, const std::vector<Descriptor>& b, int max_distance) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  if (a.empty() || b.empty()) return out;
  std::vector<int> best_for_b(b.size(), -1);
  std::vector<int> best_dist_b(b.size(), std::numeric_limits<int>::max());
  for (std::uint32_t j = 0; j < b.size(); ++j) {
    const TwoNearest nn = two_nearest(b[j], a);
    best_for_b[j] = nn.index;
    best_dist_b[j] = nn.best;
  }
  for (std::uint32_t i = 0; i < a.size(); ++i) {
    const TwoNearest nn = two_nearest(a[i], b);
    if (nn.index < 0 || nn.best > max_distance) continue;
    const auto j = static_cast<std::uint32_t>(nn.index);
    if (best_for_b[j] == static_cast<int>(i)) out.push_back({i, j});
  }
  return out;
}

}  // namespace kmslam
