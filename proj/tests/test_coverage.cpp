#include "guardian/coverage.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <unordered_set>

using namespace guardian;

namespace {

CoverageSource src(std::uint64_t v) { return CoverageSource{v}; }

}  // namespace

TEST(CountingBloom, InsertThenQuery) {
  CountingBloomFilter f;
  EXPECT_FALSE(f.query(src(1)));
  f.insert(src(1));
  EXPECT_TRUE(f.query(src(1)));
}

TEST(CountingBloom, RemoveClears) {
  CountingBloomFilter f;
  f.insert(src(77));
  f.remove(src(77));
  EXPECT_FALSE(f.query(src(77)));
  for (std::size_t i = 0; i < CountingBloomFilter::kCounters; ++i) {
    EXPECT_EQ(f.counter(i), 0);
  }
}

TEST(CountingBloom, CountsMultiplicity) {
  CountingBloomFilter f;
  f.insert(src(5));
  f.insert(src(5));
  f.remove(src(5));
  EXPECT_TRUE(f.query(src(5)));
  f.remove(src(5));
  EXPECT_FALSE(f.query(src(5)));
}

TEST(CountingBloom, SaturatedCountersStick) {
  CountingBloomFilter f;
  for (int i = 0; i < 20; ++i) {
    f.insert(src(9));
  }
  EXPECT_GE(f.saturated_count(), 1u);
  for (int i = 0; i < 20; ++i) {
    f.remove(src(9));
  }
  // Saturation is permanent: the source still reads as present.
  EXPECT_TRUE(f.query(src(9)));
  f.clear();
  EXPECT_FALSE(f.query(src(9)));
  EXPECT_EQ(f.saturated_count(), 0u);
}

TEST(CountingBloom, NoFalseNegativesAgainstMultiset) {
  std::mt19937_64 rng(8);
  CountingBloomFilter f;
  std::map<std::uint64_t, int> oracle;
  std::vector<std::uint64_t> universe;
  for (int i = 0; i < 200; ++i) {
    universe.push_back(rng());
  }
  for (int op = 0; op < 100'000; ++op) {
    const std::uint64_t x = universe[rng() % universe.size()];
    if (rng() % 2 == 0 || oracle[x] == 0) {
      f.insert(src(x));
      ++oracle[x];
    } else {
      f.remove(src(x));
      --oracle[x];
    }
    // Check a few members every step, everything now and then.
    if (op % 1000 == 0) {
      for (const auto& [k, n] : oracle) {
        if (n > 0) {
          ASSERT_TRUE(f.query(src(k))) << op;
        }
      }
    } else if (oracle[x] > 0) {
      ASSERT_TRUE(f.query(src(x))) << op;
    }
    // Keep the live population near pool scale so counters rarely saturate.
    std::size_t live = 0;
    for (const auto& [k, n] : oracle) {
      live += static_cast<std::size_t>(n);
    }
    if (live > 64) {
      for (auto& [k, n] : oracle) {
        while (n > 0) {
          f.remove(src(k));
          --n;
        }
      }
    }
  }
}

TEST(CountingBloom, FalsePositiveRateNearTheory) {
  constexpr int kTrials = 10'000;
  constexpr int kLoad = 64;
  std::mt19937_64 rng(11);
  int false_positives = 0;
  for (int t = 0; t < kTrials; ++t) {
    CountingBloomFilter f;
    std::unordered_set<std::uint64_t> members;
    for (int i = 0; i < kLoad; ++i) {
      const std::uint64_t x = rng();
      members.insert(x);
      f.insert(src(x));
    }
    std::uint64_t probe = rng();
    while (members.count(probe)) {
      probe = rng();
    }
    false_positives += f.query(src(probe));
  }
  const double k = CountingBloomFilter::kHashes;
  const double theory =
      std::pow(1.0 - std::exp(-k * kLoad / static_cast<double>(CountingBloomFilter::kCounters)), k);
  const double measured = static_cast<double>(false_positives) / kTrials;
  EXPECT_LE(measured, 2.0 * theory);
  EXPECT_GE(measured, theory / 2.0);
}

TEST(CoverageSourceHash, DeterministicAndSentinel) {
  const std::uintptr_t t[] = {0x401000, 0x402000, 0x7f0000001234};
  EXPECT_EQ(source_of(t), source_of(t));
  EXPECT_EQ(source_of({}).hash, kEmptyTraceSource);
}

TEST(CoverageSourceHash, OneFrameDifferenceChangesHash) {
  std::mt19937_64 rng(12);
  std::unordered_set<std::uint64_t> seen;
  int collisions = 0;
  std::vector<std::uintptr_t> base(16);
  for (auto& f : base) {
    f = rng();
  }
  for (int i = 0; i < 100'000; ++i) {
    std::vector<std::uintptr_t> t = base;
    t[rng() % t.size()] = rng();
    collisions += !seen.insert(source_of(t).hash).second;
  }
  // Birthday bound for 10^5 64-bit values is ~3e-10.
  EXPECT_EQ(collisions, 0);
}

TEST(CoverageFilter, AdmitFollowsThreshold) {
  CoverageFilter filter;
  EXPECT_DOUBLE_EQ(filter.threshold(), 0.75);
  filter.insert(src(1));
  EXPECT_TRUE(filter.admit(0.5, src(1)));
  EXPECT_FALSE(filter.admit(0.8, src(1)));
  EXPECT_TRUE(filter.admit(0.8, src(2)));
  EXPECT_FALSE(filter.admit(0.75, src(1)));
}

TEST(CoverageFilter, RebuildAfterSaturation) {
  CoverageFilter filter;
  // Saturate more than 1% of the counters.
  for (std::uint64_t x = 0; x < 12; ++x) {
    for (int i = 0; i < 16; ++i) {
      filter.insert(src(splitmix64(x)));
    }
  }
  EXPECT_TRUE(filter.needs_rebuild());
  const CoverageSource live[] = {src(42)};
  filter.rebuild(live);
  EXPECT_FALSE(filter.needs_rebuild());
  EXPECT_TRUE(filter.query(src(42)));
  EXPECT_FALSE(filter.query(src(splitmix64(0))));
}

TEST(CoverageFilter, HotSiteLeavesQuarterOfPoolToColdSites) {
  const auto with = guardian::testing::run_hot_cold(true);
  EXPECT_LE(with.max_hot_live, 12u);
  EXPECT_GE(with.min_cold_capacity, 4u);
  EXPECT_GT(with.cold_guarded, 0u);
  EXPECT_GT(with.rejected, 0u);

  // Without the policy the hot site takes over the pool.
  const auto without = guardian::testing::run_hot_cold(false);
  EXPECT_GT(without.max_hot_live, 12u);
}
