#pragma once

#include "guardian/pool.hpp"
#include "guardian/stack_trace.hpp"
#include "guardian/varint.hpp"

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace guardian {

/// A stack trace stored as its first pc plus zigzag/LEB128 deltas between
/// consecutive frames. Fixed capacity so records never allocate.
///
/// Serialized form (to_bytes): LEB128 frame count, then for a non-empty
/// trace the first pc as 8 little-endian bytes, then the delta bytes.
class CompressedTrace {
 public:
  static constexpr std::size_t kMaxDeltaBytes = (kMaxFrames - 1) * varint::kMaxBytes;

  static CompressedTrace compress(std::span<const std::uintptr_t> frames) noexcept;

  StackTrace decompress() const noexcept;

  std::size_t frame_count() const noexcept { return frame_count_; }
  std::uintptr_t first_pc() const noexcept { return first_pc_; }
  std::span<const std::uint8_t> deltas() const noexcept { return {bytes_.data(), length_}; }

  /// Size of the serialized form.
  std::size_t encoded_size() const noexcept;

  std::vector<std::uint8_t> to_bytes() const;
  static std::optional<CompressedTrace> from_bytes(std::span<const std::uint8_t> bytes) noexcept;

 private:
  std::uint16_t frame_count_ = 0;
  std::uint16_t length_ = 0;
  std::uintptr_t first_pc_ = 0;
  std::array<std::uint8_t, kMaxDeltaBytes> bytes_{};
};

struct AllocationRecord {
  std::size_t slot_index = 0;
  std::uint64_t slot_generation = 0;
  std::size_t user_size = 0;
  std::uint64_t alloc_thread = 0;
  CompressedTrace alloc_trace;
  bool has_dealloc = false;
  std::uint64_t dealloc_thread = 0;
  CompressedTrace dealloc_trace;
  std::uint64_t alloc_seq = 0;
};

/// Ring of allocation records with FIFO eviction. Writers must be serialized
/// externally (the pool lock). Readers, including the fault handler, use
/// snapshot(), which validates a copy with a per-entry sequence counter and
/// never blocks.
class MetadataStore {
 public:
  /// Accounted size of a record excluding its traces.
  static constexpr std::size_t kRecordHeaderBytes =
      sizeof(AllocationRecord) - 2 * sizeof(CompressedTrace);
  static constexpr std::size_t kMaxTraceBytes = kMaxFrames * varint::kMaxBytes;

  explicit MetadataStore(std::size_t capacity);

  MetadataStore(const MetadataStore&) = delete;
  MetadataStore& operator=(const MetadataStore&) = delete;

  MetadataHandle store_alloc(std::size_t slot, std::uint64_t slot_generation, std::size_t size,
                             std::uint64_t thread, std::span<const std::uintptr_t> trace) noexcept;

  /// No-op if the record was evicted since `handle` was issued.
  void store_dealloc(MetadataHandle handle, std::uint64_t thread,
                     std::span<const std::uintptr_t> trace) noexcept;

  /// Copy of the record `handle` refers to, or nullopt if it was evicted or
  /// could not be read consistently.
  std::optional<AllocationRecord> snapshot(MetadataHandle handle) const noexcept;

  /// Same as snapshot() but writes into `out` (no large return value on a
  /// signal stack).
  bool snapshot_into(MetadataHandle handle, AllocationRecord& out) const noexcept;

  std::size_t capacity() const noexcept { return capacity_; }
  /// Header plus compressed trace bytes of every retained record.
  std::size_t bytes_held() const noexcept { return bytes_held_.load(std::memory_order_relaxed); }
  std::size_t budget_bytes() const noexcept {
    return capacity_ * (kRecordHeaderBytes + 2 * kMaxTraceBytes);
  }
  /// Memory reserved for the record array.
  std::size_t reserved_bytes() const noexcept { return capacity_ * sizeof(Entry); }

 private:
  struct Entry {
    std::atomic<std::uint64_t> version{0};
    AllocationRecord record;
    bool occupied = false;
  };

  static std::size_t accounted_size(const AllocationRecord& r) noexcept;

  std::size_t capacity_;
  std::unique_ptr<Entry[]> entries_;
  std::size_t next_ = 0;
  std::uint64_t next_seq_ = 1;
  std::atomic<std::size_t> bytes_held_{0};
};

}  // namespace guardian
