#pragma once

#include "guardian/rng.hpp"

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

namespace guardian {

enum class SlotState : std::uint8_t { Free, Allocated, Quarantined };
enum class AlignmentSide : std::uint8_t { Left, Right };

/// How the pool places an allocation inside its slot page.
enum class SidePolicy : std::uint8_t { Random, Left, Right };

struct PoolConfig {
  std::size_t slot_count = 16;
  /// 0 selects the platform page size.
  std::size_t page_size = 0;
  std::size_t max_simultaneous_allocations = 16;
  /// A released slot is not handed out again until this many further
  /// acquisitions have been attempted, unless it is the only free slot.
  std::size_t quarantine_min_slots = 0;
  SidePolicy side_policy = SidePolicy::Random;
  std::uint64_t seed = 0;
};

/// Reference from a slot to its record in the metadata store.
struct MetadataHandle {
  static constexpr std::uint64_t kNone = ~std::uint64_t{0};
  std::uint64_t index = kNone;
  std::uint64_t seq = 0;
  bool valid() const noexcept { return index != kNone; }
};

struct SlotAcquisition {
  std::size_t slot = 0;
  void* user_address = nullptr;
  std::uint64_t generation = 0;
};

/// Consistent copy of one slot's published state.
struct SlotSnapshot {
  SlotState state = SlotState::Free;
  AlignmentSide side = AlignmentSide::Left;
  std::size_t user_offset = 0;
  std::size_t user_size = 0;
  std::uint64_t generation = 0;
  MetadataHandle metadata;
};

enum class AddressClass : std::uint8_t {
  NotOurs,
  LeftGuardOf,      // guard page below the slot: underflow
  RightGuardOf,     // guard page above the slot: overflow
  QuarantinedSlot,
  AllocatedSlot,
  FreeSlot,
  IndeterminateGuard,  // guard page with no live or quarantined neighbour
};

struct Classification {
  AddressClass kind = AddressClass::NotOurs;
  std::size_t slot = 0;
};

/// The reserved region of N slot pages interleaved with N+1 guard pages:
///
///   [guard 0][slot 0][guard 1][slot 1] ... [slot N-1][guard N]
///
/// Slot pages are readable and writable only while Allocated. Released slots
/// go to the back of a FIFO free list, which was seeded in random order.
/// Mutation is serialized by one mutex; classify() and snapshot() are
/// lock-free and safe to call from a signal handler.
class GuardedPool {
 public:
  /// Throws std::invalid_argument for an inconsistent config and
  /// std::system_error if the region cannot be reserved.
  explicit GuardedPool(const PoolConfig& config);
  ~GuardedPool();

  GuardedPool(const GuardedPool&) = delete;
  GuardedPool& operator=(const GuardedPool&) = delete;

  using Lock = std::unique_lock<std::mutex>;
  Lock lock() const { return Lock(mutex_); }

  std::optional<SlotAcquisition> acquire(std::size_t size, std::size_t alignment);
  std::optional<SlotAcquisition> acquire_locked(const Lock& lock, std::size_t size,
                                                std::size_t alignment);

  /// Allocated -> Quarantined. Returns false if the slot was not Allocated.
  bool release(std::size_t slot);
  bool release_locked(const Lock& lock, std::size_t slot);

  void set_metadata_locked(const Lock& lock, std::size_t slot, MetadataHandle handle) noexcept;

  Classification classify(std::uintptr_t address) const noexcept;
  SlotSnapshot snapshot(std::size_t slot) const noexcept;

  bool contains(std::uintptr_t address) const noexcept {
    return address - base_ < region_length_;
  }

  /// Slot owning a slot-page address, if the address is on a slot page.
  std::optional<std::size_t> slot_of(std::uintptr_t address) const noexcept;

  std::uintptr_t slot_start(std::size_t slot) const noexcept {
    return base_ + (2 * slot + 1) * page_size_;
  }
  std::uintptr_t guard_start(std::size_t guard) const noexcept {
    return base_ + 2 * guard * page_size_;
  }
  std::uintptr_t user_address(const SlotSnapshot& s, std::size_t slot) const noexcept {
    return slot_start(slot) + s.user_offset;
  }

  /// Makes the page containing `address` accessible and zero-filled. Used by
  /// recoverable mode; async-signal-safe.
  bool unprotect_for_recovery(std::uintptr_t address) noexcept;

  std::uintptr_t base() const noexcept { return base_; }
  std::size_t region_length() const noexcept { return region_length_; }
  std::size_t page_size() const noexcept { return page_size_; }
  std::size_t slot_count() const noexcept { return config_.slot_count; }
  std::size_t max_simultaneous_allocations() const noexcept {
    return config_.max_simultaneous_allocations;
  }
  std::size_t live_count() const noexcept { return live_count_.load(std::memory_order_relaxed); }
  std::size_t free_list_size() const;
  const PoolConfig& config() const noexcept { return config_; }

  std::uint64_t unavailable_count() const noexcept {
    return unavailable_.load(std::memory_order_relaxed);
  }
  std::uint64_t protection_failures() const noexcept {
    return protection_failures_.load(std::memory_order_relaxed);
  }

 private:
  struct Slot {
    std::atomic<SlotState> state{SlotState::Free};
    std::atomic<AlignmentSide> side{AlignmentSide::Left};
    std::atomic<std::size_t> user_offset{0};
    std::atomic<std::size_t> user_size{0};
    std::atomic<std::uint64_t> generation{0};
    std::atomic<std::uint64_t> metadata_index{MetadataHandle::kNone};
    std::atomic<std::uint64_t> metadata_seq{0};
    // Guarded by mutex_.
    std::uint64_t release_tick = 0;
    bool ever_used = false;
  };

  // Fixed-capacity FIFO of slot indices; never allocates after construction.
  class FreeList {
   public:
    explicit FreeList(std::size_t capacity) : items_(capacity) {}
    bool empty() const noexcept { return count_ == 0; }
    std::size_t size() const noexcept { return count_; }
    std::size_t front() const noexcept { return items_[head_]; }
    void pop_front() noexcept {
      head_ = (head_ + 1) % items_.size();
      --count_;
    }
    void push_front(std::size_t v) noexcept {
      head_ = (head_ + items_.size() - 1) % items_.size();
      items_[head_] = v;
      ++count_;
    }
    void push_back(std::size_t v) noexcept {
      items_[(head_ + count_) % items_.size()] = v;
      ++count_;
    }

   private:
    std::vector<std::size_t> items_;
    std::size_t head_ = 0;
    std::size_t count_ = 0;
  };

  PoolConfig config_;
  std::size_t page_size_ = 0;
  std::uintptr_t base_ = 0;
  std::size_t region_length_ = 0;
  std::unique_ptr<Slot[]> slots_;

  mutable std::mutex mutex_;
  FreeList free_list_;
  XorShift64 rng_;
  std::uint64_t acquire_tick_ = 0;
  std::atomic<std::size_t> live_count_{0};
  std::atomic<std::uint64_t> unavailable_{0};
  std::atomic<std::uint64_t> protection_failures_{0};
};

}  // namespace guardian
