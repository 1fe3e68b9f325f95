#include <doctest.h>

#include <random>

#include "kmslam/matching.hpp"

using namespace kmslam;

namespace {

Descriptor random_descriptor(std::mt19937_64& rng) {
  Descriptor d;
  for (auto& w : d.words) w = rng();
  return d;
}

Descriptor flipped(Descriptor d, std::mt19937_64& rng, int bits) {
  for (int i = 0; i < bits; ++i) d.flip_bit(static_cast<int>(rng() % kDescriptorBits));
  return d;
}

}  // namespace

TEST_CASE("two_nearest finds the best and second best") {
  std::mt19937_64 rng(1);
  const Descriptor q = random_descriptor(rng);
  std::vector<Descriptor> candidates;
  for (int i = 0; i < 20; ++i) candidates.push_back(random_descriptor(rng));
  candidates[7] = flipped(q, rng, 3);
  candidates[12] = flipped(q, rng, 9);

  const auto nn = two_nearest(q, candidates);
  CHECK(nn.index == 7);
  CHECK(nn.best <= 3);
  CHECK(nn.second <= 9 + 3);
  CHECK(nn.best <= nn.second);
}

TEST_CASE("match_descriptor_sets applies ratio, gate, and dedup") {
  std::mt19937_64 rng(2);
  std::vector<Descriptor> b;
  for (int i = 0; i < 30; ++i) b.push_back(random_descriptor(rng));

  std::vector<Descriptor> a;
  a.push_back(flipped(b[4], rng, 2));    // clean match
  a.push_back(flipped(b[9], rng, 2));    // clean match
  a.push_back(random_descriptor(rng));   // unrelated, should fail the gate
  a.push_back(flipped(b[4], rng, 10));   // duplicate target, worse distance

  const auto matches = match_descriptor_sets(a, b, MatchParams{0.8, 50});
  bool found_4 = false, found_9 = false;
  for (const auto& [i, j] : matches) {
    if (j == 4) {
      CHECK(i == 0);  // the closer source wins the duplicate
      found_4 = true;
    }
    if (j == 9) {
      CHECK(i == 1);
      found_9 = true;
    }
    CHECK(i != 2);
  }
  CHECK(found_4);
  CHECK(found_9);
}

TEST_CASE("mutual matches recover a random permutation") {
  std::mt19937_64 rng(3);
  std::vector<Descriptor> a;
  for (int i = 0; i < 40; ++i) a.push_back(random_descriptor(rng));
  std::vector<std::uint32_t> perm(a.size());
  for (std::uint32_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Descriptor> b(a.size());
  for (std::uint32_t i = 0; i < a.size(); ++i) b[perm[i]] = flipped(a[i], rng, 4);

  const auto pairs = mutual_matches(a, b, 50);
  CHECK(pairs.size() >= 38);  // a couple may collide by chance
  for (const auto& [i, j] : pairs) CHECK(perm[i] == j);
}
