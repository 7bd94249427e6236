#include "guardian/metadata.hpp"

#include <cstring>
#include <stdexcept>

namespace guardian {

CompressedTrace CompressedTrace::compress(std::span<const std::uintptr_t> frames) noexcept {
  CompressedTrace out;
  if (frames.size() > kMaxFrames) {
    frames = frames.first(kMaxFrames);
  }
  if (frames.empty()) {
    return out;
  }
  out.frame_count_ = static_cast<std::uint16_t>(frames.size());
  out.first_pc_ = frames[0];
  std::size_t length = 0;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const auto delta = static_cast<std::int64_t>(frames[i] - frames[i - 1]);
    length += varint::encode(varint::zigzag_encode(delta),
                             std::span(out.bytes_).subspan(length));
  }
  out.length_ = static_cast<std::uint16_t>(length);
  return out;
}

StackTrace CompressedTrace::decompress() const noexcept {
  StackTrace trace;
  if (frame_count_ == 0) {
    return trace;
  }
  std::uintptr_t pc = first_pc_;
  trace.push(pc);
  std::span<const std::uint8_t> rest = deltas();
  for (std::size_t i = 1; i < frame_count_; ++i) {
    const auto d = varint::decode(rest);
    if (!d) {
      break;
    }
    pc += static_cast<std::uintptr_t>(varint::zigzag_decode(d->value));
    trace.push(pc);
    rest = rest.subspan(d->length);
  }
  return trace;
}

std::size_t CompressedTrace::encoded_size() const noexcept {
  if (frame_count_ == 0) {
    return varint::encoded_length(0);
  }
  return varint::encoded_length(frame_count_) + sizeof(std::uint64_t) + length_;
}

std::vector<std::uint8_t> CompressedTrace::to_bytes() const {
  std::vector<std::uint8_t> out(encoded_size());
  std::size_t n = varint::encode(frame_count_, out);
  if (frame_count_ == 0) {
    return out;
  }
  auto pc = static_cast<std::uint64_t>(first_pc_);
  for (std::size_t i = 0; i < 8; ++i) {
    out[n++] = static_cast<std::uint8_t>(pc >> (8 * i));
  }
  std::memcpy(out.data() + n, bytes_.data(), length_);
  return out;
}

std::optional<CompressedTrace> CompressedTrace::from_bytes(
    std::span<const std::uint8_t> bytes) noexcept {
  const auto count = varint::decode(bytes);
  if (!count || count->value > kMaxFrames) {
    return std::nullopt;
  }
  CompressedTrace out;
  bytes = bytes.subspan(count->length);
  if (count->value == 0) {
    return bytes.empty() ? std::optional(out) : std::nullopt;
  }
  if (bytes.size() < 8) {
    return std::nullopt;
  }
  std::uint64_t pc = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    pc |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  }
  bytes = bytes.subspan(8);
  // Exactly count-1 well-formed deltas must remain.
  std::span<const std::uint8_t> rest = bytes;
  for (std::uint64_t i = 1; i < count->value; ++i) {
    const auto d = varint::decode(rest);
    if (!d) {
      return std::nullopt;
    }
    rest = rest.subspan(d->length);
  }
  if (!rest.empty() || bytes.size() > kMaxDeltaBytes) {
    return std::nullopt;
  }
  out.frame_count_ = static_cast<std::uint16_t>(count->value);
  out.first_pc_ = static_cast<std::uintptr_t>(pc);
  out.length_ = static_cast<std::uint16_t>(bytes.size());
  std::memcpy(out.bytes_.data(), bytes.data(), bytes.size());
  return out;
}

MetadataStore::MetadataStore(std::size_t capacity)
    : capacity_(capacity), entries_(std::make_unique<Entry[]>(capacity)) {
  if (capacity == 0) {
    throw std::invalid_argument("metadata capacity must be positive");
  }
}

std::size_t MetadataStore::accounted_size(const AllocationRecord& r) noexcept {
  std::size_t n = kRecordHeaderBytes + r.alloc_trace.encoded_size();
  if (r.has_dealloc) {
    n += r.dealloc_trace.encoded_size();
  }
  return n;
}

// Seqlock writer protocol: odd version while the record is being changed.
MetadataHandle MetadataStore::store_alloc(std::size_t slot, std::uint64_t slot_generation,
                                          std::size_t size, std::uint64_t thread,
                                          std::span<const std::uintptr_t> trace) noexcept {
  const std::size_t index = next_;
  next_ = (next_ + 1) % capacity_;
  Entry& e = entries_[index];

  const std::uint64_t v = e.version.load(std::memory_order_relaxed);
  e.version.store(v + 1, std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_release);

  if (e.occupied) {
    bytes_held_.fetch_sub(accounted_size(e.record), std::memory_order_relaxed);
  }
  AllocationRecord& r = e.record;
  r.slot_index = slot;
  r.slot_generation = slot_generation;
  r.user_size = size;
  r.alloc_thread = thread;
  r.alloc_trace = CompressedTrace::compress(trace);
  r.has_dealloc = false;
  r.dealloc_thread = 0;
  r.dealloc_trace = CompressedTrace{};
  r.alloc_seq = next_seq_++;
  e.occupied = true;
  bytes_held_.fetch_add(accounted_size(r), std::memory_order_relaxed);

  e.version.store(v + 2, std::memory_order_release);
  return MetadataHandle{index, r.alloc_seq};
}

void MetadataStore::store_dealloc(MetadataHandle handle, std::uint64_t thread,
                                  std::span<const std::uintptr_t> trace) noexcept {
  if (!handle.valid() || handle.index >= capacity_) {
    return;
  }
  Entry& e = entries_[handle.index];
  if (!e.occupied || e.record.alloc_seq != handle.seq) {
    return;
  }
  const std::uint64_t v = e.version.load(std::memory_order_relaxed);
  e.version.store(v + 1, std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_release);

  bytes_held_.fetch_sub(accounted_size(e.record), std::memory_order_relaxed);
  e.record.has_dealloc = true;
  e.record.dealloc_thread = thread;
  e.record.dealloc_trace = CompressedTrace::compress(trace);
  bytes_held_.fetch_add(accounted_size(e.record), std::memory_order_relaxed);

  e.version.store(v + 2, std::memory_order_release);
}

bool MetadataStore::snapshot_into(MetadataHandle handle, AllocationRecord& out) const noexcept {
  if (!handle.valid() || handle.index >= capacity_) {
    return false;
  }
  const Entry& e = entries_[handle.index];
  // Bounded retries: the handler may have interrupted the writer itself, in
  // which case the version stays odd forever.
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::uint64_t v1 = e.version.load(std::memory_order_acquire);
    if (v1 & 1) {
      continue;
    }
    std::memcpy(static_cast<void*>(&out), &e.record, sizeof(AllocationRecord));
    const bool occupied = e.occupied;
    std::atomic_thread_fence(std::memory_order_acquire);
    const std::uint64_t v2 = e.version.load(std::memory_order_relaxed);
    if (v1 != v2) {
      continue;
    }
    return occupied && out.alloc_seq == handle.seq;
  }
  return false;
}

std::optional<AllocationRecord> MetadataStore::snapshot(MetadataHandle handle) const noexcept {
  AllocationRecord r;
  if (!snapshot_into(handle, r)) {
    return std::nullopt;
  }
  return r;
}

}  // namespace guardian
