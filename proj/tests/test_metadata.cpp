#include "guardian/metadata.hpp"
#include "guardian/stack_trace.hpp"
#include "guardian/varint.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <thread>
#include <vector>

using namespace guardian;

namespace {

// Reference encoder written from the format description, independent of the
// library: zigzag as a branchy mapping, LEB128 byte by byte.
std::uint64_t ref_zigzag(std::int64_t v) {
  if (v >= 0) {
    return static_cast<std::uint64_t>(v) * 2;
  }
  // -1 -> 1, -2 -> 3, ... computed without shifting a negative value.
  return (~static_cast<std::uint64_t>(v)) * 2 + 1;
}

void ref_leb128(std::uint64_t v, std::vector<std::uint8_t>& out) {
  do {
    std::uint8_t byte = v % 128;
    v /= 128;
    if (v != 0) {
      byte |= 0x80;
    }
    out.push_back(byte);
  } while (v != 0);
}

std::vector<std::uint8_t> ref_serialize(const std::vector<std::uintptr_t>& frames) {
  std::vector<std::uint8_t> out;
  ref_leb128(frames.size(), out);
  if (frames.empty()) {
    return out;
  }
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::uint8_t>(frames[0] >> (8 * i)));
  }
  for (std::size_t i = 1; i < frames.size(); ++i) {
    ref_leb128(ref_zigzag(static_cast<std::int64_t>(frames[i] - frames[i - 1])), out);
  }
  return out;
}

std::vector<std::uintptr_t> as_vector(const StackTrace& t) {
  return {t.frames().begin(), t.frames().end()};
}

}  // namespace

TEST(Varint, ZigzagMatchesReference) {
  std::mt19937_64 rng(1);
  for (std::int64_t v : {std::int64_t{0}, std::int64_t{-1}, std::int64_t{1}, std::int64_t{-64},
                         std::int64_t{63}, std::numeric_limits<std::int64_t>::min(),
                         std::numeric_limits<std::int64_t>::max()}) {
    EXPECT_EQ(varint::zigzag_encode(v), ref_zigzag(v)) << v;
    EXPECT_EQ(varint::zigzag_decode(ref_zigzag(v)), v);
  }
  for (int i = 0; i < 100'000; ++i) {
    const auto v = static_cast<std::int64_t>(rng());
    ASSERT_EQ(varint::zigzag_encode(v), ref_zigzag(v));
    ASSERT_EQ(varint::zigzag_decode(varint::zigzag_encode(v)), v);
  }
}

TEST(Varint, EncodeMatchesReference) {
  std::mt19937_64 rng(2);
  std::array<std::uint8_t, varint::kMaxBytes> buf{};
  for (int i = 0; i < 100'000; ++i) {
    const std::uint64_t v = rng() >> (rng() % 64);
    std::vector<std::uint8_t> want;
    ref_leb128(v, want);
    const std::size_t n = varint::encode(v, buf);
    ASSERT_EQ(n, want.size());
    ASSERT_EQ(n, varint::encoded_length(v));
    ASSERT_TRUE(std::equal(want.begin(), want.end(), buf.begin()));
    const auto d = varint::decode(std::span<const std::uint8_t>(buf.data(), n));
    ASSERT_TRUE(d);
    ASSERT_EQ(d->value, v);
    ASSERT_EQ(d->length, n);
  }
}

TEST(Varint, DecodeRejectsMalformed) {
  const std::uint8_t truncated[] = {0x80, 0x80};
  EXPECT_FALSE(varint::decode(truncated));
  EXPECT_FALSE(varint::decode(std::span<const std::uint8_t>{}));
  std::uint8_t too_long[11];
  std::fill(std::begin(too_long), std::end(too_long), 0x80);
  too_long[10] = 0x01;
  EXPECT_FALSE(varint::decode(too_long));
  // Tenth byte may only carry the top bit of a 64-bit value.
  const std::uint8_t overflow[] = {0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x02};
  EXPECT_FALSE(varint::decode(overflow));
  const std::uint8_t max[] = {0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x01};
  ASSERT_TRUE(varint::decode(max));
  EXPECT_EQ(varint::decode(max)->value, ~std::uint64_t{0});
}

TEST(Varint, EncodeReportsShortBuffer) {
  std::array<std::uint8_t, 1> one{};
  EXPECT_EQ(varint::encode(200, one), 0u);
  EXPECT_EQ(varint::encode(100, one), 1u);
}

TEST(CompressedTrace, PositiveDeltaIsOneByte) {
  const std::uintptr_t frames[] = {0x1000, 0x1010};
  const auto c = CompressedTrace::compress(frames);
  EXPECT_EQ(c.first_pc(), 0x1000u);
  ASSERT_EQ(c.deltas().size(), 1u);
  EXPECT_EQ(c.deltas()[0], 0x20);
}

TEST(CompressedTrace, NegativeDeltaIsOneByte) {
  const std::uintptr_t frames[] = {0x2000, 0x1ff0};
  const auto c = CompressedTrace::compress(frames);
  ASSERT_EQ(c.deltas().size(), 1u);
  EXPECT_EQ(c.deltas()[0], 0x1f);
}

TEST(CompressedTrace, EmptyRoundTrips) {
  const auto c = CompressedTrace::compress({});
  EXPECT_EQ(c.frame_count(), 0u);
  EXPECT_TRUE(c.decompress().empty());
  const auto bytes = c.to_bytes();
  EXPECT_EQ(bytes, std::vector<std::uint8_t>{0});
  ASSERT_TRUE(CompressedTrace::from_bytes(bytes));
  EXPECT_EQ(CompressedTrace::from_bytes(bytes)->frame_count(), 0u);
}

TEST(CompressedTrace, RandomRoundTripsAgainstReferenceBytes) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10'000; ++i) {
    const std::size_t n = rng() % (kMaxFrames + 1);
    std::vector<std::uintptr_t> frames(n);
    const int mode = static_cast<int>(rng() % 3);
    std::uintptr_t pc = rng();
    for (auto& f : frames) {
      switch (mode) {
        case 0:  // full 64-bit magnitudes
          f = rng();
          break;
        case 1:  // clustered, both directions
          pc += static_cast<std::uintptr_t>(static_cast<std::int64_t>(rng() % 8192) - 4096);
          f = pc;
          break;
        default:  // extremes
          f = rng() % 2 ? ~std::uintptr_t{0} - rng() % 16 : rng() % 16;
          break;
      }
    }
    const auto c = CompressedTrace::compress(frames);
    ASSERT_EQ(as_vector(c.decompress()), frames);
    const auto bytes = c.to_bytes();
    ASSERT_EQ(bytes, ref_serialize(frames));
    ASSERT_EQ(bytes.size(), c.encoded_size());
    const auto back = CompressedTrace::from_bytes(bytes);
    ASSERT_TRUE(back);
    ASSERT_EQ(as_vector(back->decompress()), frames);
  }
}

TEST(CompressedTrace, FromBytesRejectsGarbage) {
  const std::uintptr_t frames[] = {0x400000, 0x400100, 0x3fff00};
  auto bytes = CompressedTrace::compress(frames).to_bytes();
  bytes.pop_back();
  EXPECT_FALSE(CompressedTrace::from_bytes(bytes));
  bytes = CompressedTrace::compress(frames).to_bytes();
  bytes.push_back(0);
  EXPECT_FALSE(CompressedTrace::from_bytes(bytes));
  const std::uint8_t too_many[] = {65};
  EXPECT_FALSE(CompressedTrace::from_bytes(too_many));
}

TEST(CompressedTrace, ClusteredTracesShrinkByHalfToThreeQuarters) {
  // 20 return addresses spread over a few nearby code regions, as in a
  // typical call chain through one binary and its libraries.
  std::mt19937_64 rng(4);
  std::size_t raw = 0;
  std::size_t packed = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::uintptr_t> frames;
    const std::uintptr_t module = 0x55550000'0000ULL + (rng() % 64) * 0x100000;
    for (int f = 0; f < 20; ++f) {
      frames.push_back(module + rng() % 0x40000);
    }
    const auto c = CompressedTrace::compress(frames);
    raw += frames.size() * sizeof(std::uintptr_t);
    packed += c.encoded_size();
  }
  const double ratio = static_cast<double>(packed) / static_cast<double>(raw);
  EXPECT_GE(ratio, 0.25);
  EXPECT_LE(ratio, 0.50);
}

TEST(MetadataStore, FreshRecordHasNoDealloc) {
  MetadataStore store(4);
  const std::uintptr_t trace[] = {0x10, 0x20};
  const auto h = store.store_alloc(2, 1, 41, 100, trace);
  const auto r = store.snapshot(h);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->slot_index, 2u);
  EXPECT_EQ(r->user_size, 41u);
  EXPECT_EQ(r->alloc_thread, 100u);
  EXPECT_FALSE(r->has_dealloc);
  EXPECT_EQ(as_vector(r->alloc_trace.decompress()), (std::vector<std::uintptr_t>{0x10, 0x20}));
}

TEST(MetadataStore, DeallocRecordsOtherThread) {
  MetadataStore store(4);
  const std::uintptr_t a[] = {0x10};
  const std::uintptr_t d[] = {0x30, 0x40, 0x50};
  const auto h = store.store_alloc(0, 1, 8, 100, a);
  store.store_dealloc(h, 200, d);
  const auto r = store.snapshot(h);
  ASSERT_TRUE(r && r->has_dealloc);
  EXPECT_EQ(r->alloc_thread, 100u);
  EXPECT_EQ(r->dealloc_thread, 200u);
  EXPECT_EQ(as_vector(r->dealloc_trace.decompress()), (std::vector<std::uintptr_t>{0x30, 0x40, 0x50}));
}

TEST(MetadataStore, CapacityOneEvictsOldest) {
  MetadataStore store(1);
  const auto first = store.store_alloc(0, 1, 8, 1, {});
  const auto second = store.store_alloc(1, 1, 16, 1, {});
  EXPECT_FALSE(store.snapshot(first));
  ASSERT_TRUE(store.snapshot(second));
  // Deallocation against the evicted handle is a no-op.
  const std::uintptr_t d[] = {0x99};
  store.store_dealloc(first, 5, d);
  EXPECT_FALSE(store.snapshot(second)->has_dealloc);
}

TEST(MetadataStore, LatestAllocationWins) {
  MetadataStore store(4);
  const auto h1 = store.store_alloc(3, 1, 8, 1, {});
  const auto h2 = store.store_alloc(3, 2, 8, 1, {});
  EXPECT_GT(store.snapshot(h2)->alloc_seq, store.snapshot(h1)->alloc_seq);
  EXPECT_EQ(store.snapshot(h2)->slot_generation, 2u);
}

TEST(MetadataStore, InvalidHandleIsEmpty) {
  MetadataStore store(2);
  EXPECT_FALSE(store.snapshot(MetadataHandle{}));
  EXPECT_FALSE(store.snapshot(MetadataHandle{7, 1}));
  // An entry that was never written does not match the zero sequence number.
  EXPECT_FALSE(store.snapshot(MetadataHandle{0, 0}));
}

TEST(MetadataStore, BudgetAccounting) {
  constexpr std::size_t kCapacity = 8;
  MetadataStore store(kCapacity);
  std::mt19937_64 rng(5);
  std::vector<std::uintptr_t> frames(kMaxFrames);
  for (int i = 0; i < 1000; ++i) {
    for (auto& f : frames) {
      f = rng();
    }
    const auto h = store.store_alloc(i % 16, static_cast<std::uint64_t>(i), 8, 1, frames);
    store.store_dealloc(h, 2, frames);
    ASSERT_LE(store.bytes_held(), store.budget_bytes());
  }
  EXPECT_EQ(store.budget_bytes(),
            kCapacity * (MetadataStore::kRecordHeaderBytes + 2 * kMaxFrames * varint::kMaxBytes));
  EXPECT_GT(store.bytes_held(), 0u);
}

TEST(MetadataStore, ConcurrentReadersNeverSeeTornRecords) {
  // Every record is internally consistent: size, thread and trace are all
  // derived from the generation. A reader must never see a mix.
  MetadataStore store(2);
  std::atomic<bool> stop{false};
  std::atomic<std::uint64_t> latest_index{0};
  std::atomic<std::uint64_t> latest_seq{0};
  std::thread writer([&] {
    std::vector<std::uintptr_t> frames(kMaxFrames);
    for (std::uint64_t gen = 1; gen < 200'000; ++gen) {
      for (std::size_t f = 0; f < frames.size(); ++f) {
        frames[f] = gen * 0x1000 + f;
      }
      const auto h = store.store_alloc(gen % 4, gen, gen % 4096, gen, frames);
      latest_index.store(h.index);
      latest_seq.store(h.seq);
    }
    stop = true;
  });
  std::uint64_t checked = 0;
  std::uint64_t torn = 0;
  AllocationRecord r;
  while (!stop) {
    const MetadataHandle h{latest_index.load(), latest_seq.load()};
    if (!store.snapshot_into(h, r)) {
      continue;
    }
    const std::uint64_t gen = r.slot_generation;
    const StackTrace t = r.alloc_trace.decompress();
    const bool consistent = r.alloc_thread == gen && r.user_size == gen % 4096 &&
                            t.size() == kMaxFrames && t[0] == gen * 0x1000 &&
                            t[kMaxFrames - 1] == gen * 0x1000 + kMaxFrames - 1;
    torn += !consistent;
    ++checked;
  }
  writer.join();
  EXPECT_EQ(torn, 0u);
  EXPECT_GT(checked, 0u);
}

namespace {

[[gnu::noinline]] StackTrace capture_in_callee(std::uintptr_t& return_address) {
  return_address = reinterpret_cast<std::uintptr_t>(__builtin_return_address(0));
  StackTrace t = capture_trace(8);
  asm volatile("" ::: "memory");
  return t;
}

[[gnu::noinline]] StackTrace capture_skipping_callee(std::uintptr_t& return_address) {
  return_address = reinterpret_cast<std::uintptr_t>(__builtin_return_address(0));
  StackTrace t = capture_trace(8, 1);
  asm volatile("" ::: "memory");
  return t;
}

[[gnu::noinline]] int recurse(int depth, StackTrace& out) {
  if (depth == 0) {
    out = capture_trace(64);
    return 0;
  }
  const int r = recurse(depth - 1, out) + 1;
  asm volatile("" ::: "memory");
  return r;
}

}  // namespace

TEST(StackTraceCapture, ZeroFramesIsEmpty) {
  EXPECT_TRUE(capture_trace(0).empty());
}

TEST(StackTraceCapture, StartsAtCaller) {
  std::uintptr_t ra = 0;
  const StackTrace t = capture_in_callee(ra);
  ASSERT_GE(t.size(), 2u);
  const auto callee = reinterpret_cast<std::uintptr_t>(&capture_in_callee);
  EXPECT_GT(t[0], callee);
  EXPECT_LT(t[0], callee + 4096);
  EXPECT_EQ(t[1], ra);
}

TEST(StackTraceCapture, SkipDropsInnerFrames) {
  std::uintptr_t ra = 0;
  const StackTrace t = capture_skipping_callee(ra);
  ASSERT_GE(t.size(), 1u);
  EXPECT_EQ(t[0], ra);
}

TEST(StackTraceCapture, DeepRecursionTruncates) {
  StackTrace t;
  recurse(1000, t);
  EXPECT_EQ(t.size(), 64u);
  // The innermost frames are all the same return site inside recurse().
  for (std::size_t i = 2; i < t.size(); ++i) {
    EXPECT_EQ(t[i], t[1]);
  }
}

TEST(StackTraceCapture, WorksOnOtherThreads) {
  StackTrace t;
  std::thread([&] { recurse(10, t); }).join();
  EXPECT_GE(t.size(), 11u);
}

TEST(ModuleTable, FindsOwnExecutable) {
  refresh_process_modules();
  const auto* m = process_modules().find(reinterpret_cast<std::uintptr_t>(&recurse));
  ASSERT_NE(m, nullptr);
  EXPECT_NE(std::string(m->name.data()).find("test_metadata"), std::string::npos);
  EXPECT_EQ(process_modules().find(0x10), nullptr);
}
