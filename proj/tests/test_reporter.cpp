#include "guardian/allocator.hpp"
#include "guardian/platform.hpp"
#include "guardian/report_parser.hpp"

#include "golden.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <sys/mman.h>
#include <unistd.h>

#include <atomic>
#include <thread>

using namespace guardian;
using guardian::testing::catching_config;
using guardian::testing::FaultCatcher;
using guardian::testing::normalize_report;
using guardian::testing::read_golden;
using guardian::testing::touch_read;
using guardian::testing::touch_write;

// Counts heap calls made while a fault is being handled. The executable's
// definitions take precedence over the C library's.
extern "C" {
void* __libc_malloc(std::size_t);
void* __libc_calloc(std::size_t, std::size_t);
void* __libc_realloc(void*, std::size_t);
void __libc_free(void*);
}

namespace {
std::atomic<bool> g_count_heap{false};
std::atomic<int> g_heap_calls{0};

void note_heap_call() {
  if (g_count_heap.load(std::memory_order_relaxed)) {
    g_heap_calls.fetch_add(1, std::memory_order_relaxed);
  }
}
}  // namespace

extern "C" {
void* malloc(std::size_t n) {
  note_heap_call();
  return __libc_malloc(n);
}
void* calloc(std::size_t c, std::size_t n) {
  note_heap_call();
  return __libc_calloc(c, n);
}
void* realloc(void* p, std::size_t n) {
  note_heap_call();
  return __libc_realloc(p, n);
}
void free(void* p) {
  note_heap_call();
  __libc_free(p);
}
}

namespace {

AllocatorConfig sided(SidePolicy side, std::size_t slots = 4) {
  AllocatorConfig c = catching_config(slots);
  c.pool.side_policy = side;
  c.min_alignment = 1;
  return c;
}

}  // namespace

TEST(Reporter, UseAfterFreeWriteMatchesGolden) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(41, 1));
  ASSERT_TRUE(a.is_guarded(p));
  a.free(p);
  const auto fault = FaultCatcher::run([&] { touch_write(p + 8); });
  ASSERT_TRUE(fault);
  const ErrorReport& r = fault->report;
  EXPECT_EQ(r.kind, ErrorKind::UseAfterFree);
  EXPECT_EQ(r.access, AccessKind::Write);
  EXPECT_EQ(r.offset(), 8);
  EXPECT_EQ(r.allocation_size, 41u);
  EXPECT_EQ(r.allocation_address, reinterpret_cast<std::uintptr_t>(p));
  EXPECT_TRUE(r.has_dealloc);
  EXPECT_FALSE(r.metadata_lost);
  EXPECT_EQ(r.faulting_thread, current_thread_id());
  EXPECT_EQ(r.alloc_thread, current_thread_id());
  EXPECT_EQ(r.dealloc_thread, current_thread_id());
  EXPECT_FALSE(r.access_trace.empty());
  EXPECT_FALSE(r.dealloc_trace.empty());
  EXPECT_FALSE(r.alloc_trace.empty());
  EXPECT_EQ(normalize_report(fault->text), normalize_report(read_golden("uaf_write.txt")))
      << fault->text;
  EXPECT_NE(fault->text.find("Use-after-free write at"), std::string::npos);
}

TEST(Reporter, UnderflowReadMatchesGolden) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(41, 1));
  const auto fault = FaultCatcher::run([&] { touch_read(p - 2); });
  ASSERT_TRUE(fault);
  EXPECT_EQ(fault->report.kind, ErrorKind::BufferUnderflow);
  EXPECT_EQ(fault->report.access, AccessKind::Read);
  EXPECT_EQ(fault->report.offset(), -2);
  EXPECT_FALSE(fault->report.has_dealloc);
  EXPECT_EQ(normalize_report(fault->text), normalize_report(read_golden("underflow_read.txt")))
      << fault->text;
  EXPECT_NE(fault->text.find("2B left of 41B allocation"), std::string::npos);
  a.free(p);
}

TEST(Reporter, OverflowOfRightAlignedAllocation) {
  GuardianAllocator a(sided(SidePolicy::Right));
  auto* p = static_cast<char*>(a.malloc(41, 1));
  const auto fault = FaultCatcher::run([&] { touch_write(p + 41); });
  ASSERT_TRUE(fault);
  EXPECT_EQ(fault->report.kind, ErrorKind::BufferOverflow);
  EXPECT_EQ(fault->report.access, AccessKind::Write);
  EXPECT_NE(fault->text.find("0B right of 41B allocation"), std::string::npos);
  a.free(p);
}

TEST(Reporter, ReportTextParsesBackToReport) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(100, 1));
  a.free(p);
  const auto fault = FaultCatcher::run([&] { touch_read(p + 99); });
  ASSERT_TRUE(fault);
  const ErrorReport back = parse_report(fault->text);
  EXPECT_EQ(back.kind, fault->report.kind);
  EXPECT_EQ(back.offset(), 99);
  EXPECT_EQ(back.access_trace, fault->report.access_trace);
  EXPECT_EQ(back.alloc_trace, fault->report.alloc_trace);
  EXPECT_EQ(back.dealloc_trace, fault->report.dealloc_trace);
}

TEST(Reporter, FramesAreModuleRelative) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(8, 1));
  const auto fault = FaultCatcher::run([&] { touch_read(p - 1); });
  ASSERT_TRUE(fault);
  EXPECT_NE(fault->text.find("test_reporter(+0x"), std::string::npos) << fault->text;
  a.free(p);
}

TEST(Reporter, MetadataLostAfterEviction) {
  AllocatorConfig c = sided(SidePolicy::Left);
  c.metadata_capacity = 1;
  GuardianAllocator a(c);
  auto* first = static_cast<char*>(a.malloc(41, 1));
  auto* second = static_cast<char*>(a.malloc(41, 1));
  ASSERT_TRUE(a.is_guarded(first) && a.is_guarded(second));
  a.free(first);
  const auto fault = FaultCatcher::run([&] { touch_read(first); });
  ASSERT_TRUE(fault);
  EXPECT_EQ(fault->report.kind, ErrorKind::UseAfterFree);
  EXPECT_TRUE(fault->report.metadata_lost);
  EXPECT_EQ(fault->report.allocation_size, 41u);
  EXPECT_NE(fault->text.find("<metadata lost>"), std::string::npos);
  a.free(second);
}

TEST(Reporter, BeyondBoundsOnFreedSlotIsUseAfterFree) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(41, 1));
  a.free(p);
  const auto fault = FaultCatcher::run([&] { touch_read(p - 2); });
  ASSERT_TRUE(fault);
  EXPECT_EQ(fault->report.kind, ErrorKind::UseAfterFree);
  EXPECT_EQ(fault->report.offset(), -2);
  EXPECT_NE(fault->text.find("2B left of 41B allocation"), std::string::npos);
}

TEST(Reporter, GuardBetweenFreeSlotsIsIndeterminate) {
  GuardianAllocator a(sided(SidePolicy::Left));
  const GuardedPool* pool = a.pool();
  const auto fault = FaultCatcher::run(
      [&] { touch_read(reinterpret_cast<void*>(pool->guard_start(0) + 5)); });
  ASSERT_TRUE(fault);
  EXPECT_EQ(fault->report.kind, ErrorKind::IndeterminateGuardHit);
  EXPECT_FALSE(fault->report.has_allocation);
}

TEST(Reporter, AccessKindWithoutContextIsUnknown) {
  EXPECT_EQ(determine_access_kind(nullptr), AccessKind::Unknown);
}

TEST(Reporter, HandlerDoesNotTouchTheHeap) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(41, 1));
  a.free(p);
  // Warm up lazily initialised state (module table, stack bounds).
  ErrorReport warm;
  ASSERT_TRUE(FaultCatcher::run_into(warm, [&] { touch_read(p); }));

  ErrorReport out;
  g_heap_calls = 0;
  g_count_heap = true;
  const bool caught = FaultCatcher::run_into(out, [&] { touch_write(p + 3); });
  g_count_heap = false;
  ASSERT_TRUE(caught);
  EXPECT_EQ(g_heap_calls.load(), 0);
  EXPECT_EQ(out.kind, ErrorKind::UseAfterFree);
}

TEST(Reporter, SessionIsNotReentrant) {
  ReportSession outer;
  ASSERT_TRUE(outer);
  ReportSession inner;
  EXPECT_FALSE(inner);
}

TEST(Reporter, SessionSerializesThreads) {
  std::atomic<int> inside{0};
  std::atomic<bool> overlap{false};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 2000; ++i) {
        ReportSession s;
        if (!s) {
          continue;
        }
        if (inside.fetch_add(1) != 0) {
          overlap = true;
        }
        inside.fetch_sub(1);
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }
  EXPECT_FALSE(overlap);
}

TEST(Reporter, FaultWhilePeerHoldsPoolLock) {
  GuardianAllocator a(sided(SidePolicy::Left, 128));
  for (int trial = 0; trial < 100; ++trial) {
    auto* p = static_cast<char*>(a.malloc(41, 1));
    ASSERT_TRUE(a.is_guarded(p));
    a.free(p);
    std::atomic<bool> locked{false};
    std::atomic<bool> release{false};
    std::thread peer([&] {
      auto lock = a.lock_pool_for_testing();
      locked = true;
      while (!release) {
        std::this_thread::yield();
      }
    });
    while (!locked) {
      std::this_thread::yield();
    }
    ErrorReport r;
    const bool caught = FaultCatcher::run_into(r, [&] { touch_read(p + 8); });
    release = true;
    peer.join();
    ASSERT_TRUE(caught) << trial;
    ASSERT_EQ(r.kind, ErrorKind::UseAfterFree) << trial;
  }
}

TEST(Reporter, FaultWhileOwnThreadHoldsPoolLock) {
  GuardianAllocator a(sided(SidePolicy::Left, 128));
  for (int trial = 0; trial < 100; ++trial) {
    auto* p = static_cast<char*>(a.malloc(41, 1));
    { const auto s = a.stats(); ASSERT_TRUE(a.is_guarded(p)) << trial << " sampled=" << s.sampled << " guarded=" << s.guarded << " unavail=" << s.unavailable << " enabled=" << a.enabled(); }
    a.free(p);
    ErrorReport r;
    bool caught = false;
    {
      auto lock = a.lock_pool_for_testing();
      caught = FaultCatcher::run_into(r, [&] { touch_read(p + 8); });
    }
    ASSERT_TRUE(caught) << trial;
    ASSERT_EQ(r.kind, ErrorKind::UseAfterFree) << trial;
  }
}

TEST(Reporter, FaultOnOtherThreadNamesThatThread) {
  GuardianAllocator a(sided(SidePolicy::Left));
  auto* p = static_cast<char*>(a.malloc(41, 1));
  std::uint64_t freeing_thread = 0;
  std::thread([&] {
    freeing_thread = current_thread_id();
    a.free(p);
  }).join();
  ErrorReport r;
  std::uint64_t faulting_thread = 0;
  bool caught = false;
  std::thread([&] {
    faulting_thread = current_thread_id();
    caught = FaultCatcher::run_into(r, [&] { touch_read(p); });
  }).join();
  ASSERT_TRUE(caught);
  EXPECT_EQ(r.dealloc_thread, freeing_thread);
  EXPECT_EQ(r.faulting_thread, faulting_thread);
  EXPECT_EQ(r.alloc_thread, current_thread_id());
  EXPECT_NE(r.dealloc_thread, r.alloc_thread);
}

TEST(Reporter, RecoverableUseAfterFree) {
  AllocatorConfig c = sided(SidePolicy::Left);
  c.reporter.recoverable = true;
  c.reporter.on_report = nullptr;
  GuardianAllocator a(c);
  auto* p = static_cast<char*>(a.malloc(41, 1));
  auto* q = static_cast<char*>(a.malloc(41, 1));
  std::memset(p, 0x77, 41);
  std::memset(q, 0x77, 41);
  a.free(p);
  a.free(q);
  const std::uint64_t before = reports_emitted();
  touch_write(p + 8, 0x42);  // reported, then resumed
  EXPECT_EQ(reports_emitted(), before + 1);
  EXPECT_FALSE(a.enabled());
  EXPECT_EQ(static_cast<unsigned char>(p[8]), 0x42);  // the write landed
  EXPECT_EQ(p[0], 0);                                  // page was zeroed
  EXPECT_EQ(q[0], 0);  // second freed slot: silent recovery, reads zero
  EXPECT_EQ(reports_emitted(), before + 1);
  // Sampling is off for good.
  void* later = a.malloc(16);
  EXPECT_FALSE(a.is_guarded(later));
  a.free(later);
}

TEST(ReporterDeathTest, TerminatesWithOriginalSignal) {
  ::testing::FLAGS_gtest_death_test_style = "threadsafe";
  EXPECT_EXIT(
      {
        AllocatorConfig c = sided(SidePolicy::Left);
        c.reporter.on_report = nullptr;
        c.reporter.sink_fd = 2;
        GuardianAllocator a(c);
        auto* p = static_cast<char*>(a.malloc(41, 1));
        a.free(p);
        touch_write(p + 8);
      },
      ::testing::KilledBySignal(SIGSEGV), "Use-after-free write at");
}

TEST(ReporterDeathTest, DoubleFreeAborts) {
  ::testing::FLAGS_gtest_death_test_style = "threadsafe";
  EXPECT_EXIT(
      {
        AllocatorConfig c = sided(SidePolicy::Left);
        c.reporter.on_report = nullptr;
        c.reporter.sink_fd = 2;
        GuardianAllocator a(c);
        void* p = a.malloc(41, 1);
        a.free(p);
        a.free(p);
      },
      ::testing::KilledBySignal(SIGABRT), "Double-free at");
}

TEST(ReporterDeathTest, WildFaultIsNotReported) {
  ::testing::FLAGS_gtest_death_test_style = "threadsafe";
  EXPECT_EXIT(
      {
        AllocatorConfig c = sided(SidePolicy::Left);
        c.reporter.sink_fd = 2;
        GuardianAllocator a(c);
        void* wild = mmap(nullptr, 4096, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        touch_read(wild);
      },
      ::testing::KilledBySignal(SIGSEGV), "^$");
}
