#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "entlab/rng.hpp"

using namespace entlab;

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, BelowStaysInRange) {
  Rng r(3);
  std::set<std::size_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto k = r.below(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(DeriveSeed, DistinctTagsAndPathsGiveDistinctSeeds) {
  std::set<std::uint64_t> seeds;
  for (auto tag : {Stream::Task, Stream::Init, Stream::Rollout, Stream::Eval, Stream::Plugin, Stream::Schedule})
    for (std::uint64_t a = 0; a < 20; ++a)
      for (std::uint64_t b = 0; b < 20; ++b) seeds.insert(derive_seed(7, tag, {a, b}));
  EXPECT_EQ(seeds.size(), 6u * 20u * 20u);
}

TEST(DeriveSeed, PathOrderMatters) {
  EXPECT_NE(derive_seed(0, Stream::Rollout, {1, 2}), derive_seed(0, Stream::Rollout, {2, 1}));
  EXPECT_NE(derive_seed(0, Stream::Rollout, {}), derive_seed(0, Stream::Rollout, {0}));
}

TEST(DeriveSeed, Deterministic) {
  EXPECT_EQ(derive_seed(123, Stream::Eval, {4, 5, 6}), derive_seed(123, Stream::Eval, {4, 5, 6}));
}

TEST(Mix64, MatchesReferenceSplitMix) {
  // First output of the reference SplitMix64 generator seeded with 0.
  EXPECT_EQ(mix64(0), 0xe220a8397b1dcdafULL);
}
