#include "guardian/pool.hpp"

#include "guardian/platform.hpp"

#include <cstring>
#include <numeric>
#include <stdexcept>
#include <system_error>

namespace guardian {

namespace {

PoolConfig validated(PoolConfig config) {
  if (config.page_size == 0) {
    config.page_size = system_page_size();
  }
  if (!is_power_of_two(config.page_size)) {
    throw std::invalid_argument("page size must be a power of two");
  }
  if (config.slot_count == 0) {
    throw std::invalid_argument("slot count must be positive");
  }
  if (config.max_simultaneous_allocations == 0 ||
      config.max_simultaneous_allocations > config.slot_count) {
    throw std::invalid_argument("max simultaneous allocations must be in [1, slot count]");
  }
  return config;
}

}  // namespace

GuardedPool::GuardedPool(const PoolConfig& config)
    : config_(validated(config)),
      page_size_(config_.page_size),
      region_length_((2 * config_.slot_count + 1) * config_.page_size),
      slots_(std::make_unique<Slot[]>(config_.slot_count)),
      free_list_(config_.slot_count),
      rng_(config_.seed) {
  void* region = reserve_region(region_length_);
  if (region == nullptr) {
    throw std::system_error(errno, std::generic_category(), "guarded pool reservation failed");
  }
  base_ = reinterpret_cast<std::uintptr_t>(region);

  std::vector<std::size_t> order(config_.slot_count);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng_.uniform(0, i - 1)]);
  }
  for (std::size_t s : order) {
    free_list_.push_back(s);
  }
}

GuardedPool::~GuardedPool() {
  release_region(reinterpret_cast<void*>(base_), region_length_);
}

std::optional<SlotAcquisition> GuardedPool::acquire(std::size_t size, std::size_t alignment) {
  auto guard = lock();
  return acquire_locked(guard, size, alignment);
}

std::optional<SlotAcquisition> GuardedPool::acquire_locked(const Lock&, std::size_t size,
                                                           std::size_t alignment) {
  ++acquire_tick_;
  if (size == 0 || size > page_size_ || !is_power_of_two(alignment) || alignment > page_size_) {
    unavailable_.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }
  if (live_count_.load(std::memory_order_relaxed) >= config_.max_simultaneous_allocations ||
      free_list_.empty()) {
    unavailable_.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }

  const std::size_t index = free_list_.front();
  Slot& slot = slots_[index];
  if (slot.ever_used && free_list_.size() > 1) {
    const std::uint64_t others = acquire_tick_ - slot.release_tick - 1;
    if (others < config_.quarantine_min_slots) {
      unavailable_.fetch_add(1, std::memory_order_relaxed);
      return std::nullopt;
    }
  }
  free_list_.pop_front();

  void* page = reinterpret_cast<void*>(slot_start(index));
  if (!set_page_access(page, page_size_, PageAccess::ReadWrite)) {
    protection_failures_.fetch_add(1, std::memory_order_relaxed);
    unavailable_.fetch_add(1, std::memory_order_relaxed);
    free_list_.push_front(index);
    return std::nullopt;
  }
  if (slot.ever_used) {
    std::memset(page, 0, page_size_);
  }

  AlignmentSide side;
  switch (config_.side_policy) {
    case SidePolicy::Left:
      side = AlignmentSide::Left;
      break;
    case SidePolicy::Right:
      side = AlignmentSide::Right;
      break;
    default:
      side = (rng_.next() & 1) ? AlignmentSide::Right : AlignmentSide::Left;
      break;
  }
  const std::size_t offset =
      side == AlignmentSide::Left ? 0 : align_down(page_size_ - size, alignment);

  slot.ever_used = true;
  slot.side.store(side, std::memory_order_relaxed);
  slot.user_offset.store(offset, std::memory_order_relaxed);
  slot.user_size.store(size, std::memory_order_relaxed);
  slot.metadata_index.store(MetadataHandle::kNone, std::memory_order_relaxed);
  const std::uint64_t generation = slot.generation.load(std::memory_order_relaxed) + 1;
  slot.generation.store(generation, std::memory_order_relaxed);
  slot.state.store(SlotState::Allocated, std::memory_order_release);
  live_count_.fetch_add(1, std::memory_order_relaxed);

  return SlotAcquisition{index, reinterpret_cast<void*>(slot_start(index) + offset), generation};
}

bool GuardedPool::release(std::size_t slot) {
  auto guard = lock();
  return release_locked(guard, slot);
}

bool GuardedPool::release_locked(const Lock&, std::size_t index) {
  if (index >= config_.slot_count) {
    return false;
  }
  Slot& slot = slots_[index];
  if (slot.state.load(std::memory_order_relaxed) != SlotState::Allocated) {
    return false;
  }
  // Publish the state first: any fault after the page goes PROT_NONE must
  // classify the slot as quarantined.
  slot.state.store(SlotState::Quarantined, std::memory_order_release);
  if (!set_page_access(reinterpret_cast<void*>(slot_start(index)), page_size_, PageAccess::None)) {
    protection_failures_.fetch_add(1, std::memory_order_relaxed);
  }
  slot.release_tick = acquire_tick_;
  free_list_.push_back(index);
  live_count_.fetch_sub(1, std::memory_order_relaxed);
  return true;
}

void GuardedPool::set_metadata_locked(const Lock&, std::size_t index,
                                      MetadataHandle handle) noexcept {
  Slot& slot = slots_[index];
  slot.metadata_seq.store(handle.seq, std::memory_order_relaxed);
  slot.metadata_index.store(handle.index, std::memory_order_release);
}

std::optional<std::size_t> GuardedPool::slot_of(std::uintptr_t address) const noexcept {
  if (!contains(address)) {
    return std::nullopt;
  }
  const std::size_t page = (address - base_) / page_size_;
  if (page % 2 == 0) {
    return std::nullopt;
  }
  return page / 2;
}

SlotSnapshot GuardedPool::snapshot(std::size_t index) const noexcept {
  const Slot& slot = slots_[index];
  SlotSnapshot s;
  s.state = slot.state.load(std::memory_order_acquire);
  s.side = slot.side.load(std::memory_order_relaxed);
  s.user_offset = slot.user_offset.load(std::memory_order_relaxed);
  s.user_size = slot.user_size.load(std::memory_order_relaxed);
  s.generation = slot.generation.load(std::memory_order_relaxed);
  s.metadata.index = slot.metadata_index.load(std::memory_order_acquire);
  s.metadata.seq = slot.metadata_seq.load(std::memory_order_relaxed);
  return s;
}

Classification GuardedPool::classify(std::uintptr_t address) const noexcept {
  if (!contains(address)) {
    return {AddressClass::NotOurs, 0};
  }
  const std::size_t page = (address - base_) / page_size_;
  if (page % 2 == 1) {
    const std::size_t index = page / 2;
    switch (slots_[index].state.load(std::memory_order_acquire)) {
      case SlotState::Allocated:
        return {AddressClass::AllocatedSlot, index};
      case SlotState::Quarantined:
        return {AddressClass::QuarantinedSlot, index};
      case SlotState::Free:
        return {AddressClass::FreeSlot, index};
    }
  }

  // Guard g sits between slot g-1 (below) and slot g (above). Prefer the
  // neighbour that holds a live allocation, then a quarantined one; on a tie
  // the hit is an overflow off the slot below.
  const std::size_t guard = page / 2;
  auto rank = [this](std::size_t index) {
    switch (slots_[index].state.load(std::memory_order_acquire)) {
      case SlotState::Allocated:
        return 2;
      case SlotState::Quarantined:
        return 1;
      default:
        return 0;
    }
  };
  const int below = guard > 0 ? rank(guard - 1) : 0;
  const int above = guard < config_.slot_count ? rank(guard) : 0;
  if (below == 0 && above == 0) {
    return {AddressClass::IndeterminateGuard, 0};
  }
  if (below >= above) {
    return {AddressClass::RightGuardOf, guard - 1};
  }
  return {AddressClass::LeftGuardOf, guard};
}

bool GuardedPool::unprotect_for_recovery(std::uintptr_t address) noexcept {
  if (!contains(address)) {
    return false;
  }
  const std::uintptr_t page = align_down(address, page_size_);
  if (!set_page_access(reinterpret_cast<void*>(page), page_size_, PageAccess::ReadWrite)) {
    return false;
  }
  std::memset(reinterpret_cast<void*>(page), 0, page_size_);
  return true;
}

std::size_t GuardedPool::free_list_size() const {
  auto guard = lock();
  return free_list_.size();
}

}  // namespace guardian
