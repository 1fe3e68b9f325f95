#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <vector>

#include "kmslam/errors.hpp"

namespace kmslam {

/// Stable integer id into a SlotStore. Typed on the element so keyframe ids
/// and point ids cannot be mixed up.
template <typename T>
struct SlotId {
  std::uint32_t value = 0;

  friend bool operator==(SlotId a, SlotId b) { return a.value == b.value; }
  friend bool operator!=(SlotId a, SlotId b) { return a.value != b.value; }
  friend bool operator<(SlotId a, SlotId b) { return a.value < b.value; }
};

/// Arena of fixed-capacity blocks. Elements keep their id for their whole
/// life, erased slots are recycled lowest-index-first, and growing the store
/// never moves existing elements.
template <typename T>
class SlotStore {
 public:
  using Id = SlotId<T>;

  explicit SlotStore(std::uint32_t block_capacity = 4096)
      : block_capacity_(block_capacity == 0 ? 1 : block_capacity) {}

  Id insert(T element) {
    std::uint32_t slot;
    if (!free_slots_.empty()) {
      slot = *free_slots_.begin();
      free_slots_.erase(free_slots_.begin());
    } else {
      slot = high_water_++;
      const std::uint32_t block = slot / block_capacity_;
      if (block >= blocks_.size()) {
        blocks_.push_back(std::make_unique<std::vector<std::optional<T>>>());
        blocks_.back()->resize(block_capacity_);
      }
    }
    (*blocks_[slot / block_capacity_])[slot % block_capacity_] = std::move(element);
    ++live_count_;
    return Id{slot};
  }

  void erase(Id id) {
    auto& cell = cell_checked(id, "erase");
    cell.reset();
    free_slots_.insert(id.value);
    --live_count_;
  }

  T& get(Id id) { return *cell_checked(id, "get"); }
  const T& get(Id id) const {
    return *const_cast<SlotStore*>(this)->cell_checked(id, "get");
  }

  bool contains(Id id) const {
    if (id.value >= high_water_) return false;
    return (*blocks_[id.value / block_capacity_])[id.value % block_capacity_].has_value();
  }

  std::uint32_t size() const { return live_count_; }
  bool empty() const { return live_count_ == 0; }
  std::uint32_t high_water() const { return high_water_; }
  std::uint32_t block_capacity() const { return block_capacity_; }

  /// Live ids in increasing order.
  std::vector<Id> ids() const {
    std::vector<Id> out;
    out.reserve(live_count_);
    for (std::uint32_t i = 0; i < high_water_; ++i) {
      if (contains(Id{i})) out.push_back(Id{i});
    }
    return out;
  }

  template <typename F>
  void for_each(F&& f) const {
    for (std::uint32_t i = 0; i < high_water_; ++i) {
      const Id id{i};
      if (contains(id)) f(id, get(id));
    }
  }

  void clear() {
    blocks_.clear();
    free_slots_.clear();
    high_water_ = 0;
    live_count_ = 0;
  }

  /// Re-registers a vacant slot region after deserialization. Slots below
  /// high_water that were not inserted become free, preserving reuse order.
  void restore_layout(std::uint32_t high_water) {
    for (std::uint32_t i = 0; i < high_water; ++i) {
      if (i >= high_water_) {
        const std::uint32_t block = i / block_capacity_;
        if (block >= blocks_.size()) {
          blocks_.push_back(std::make_unique<std::vector<std::optional<T>>>());
          blocks_.back()->resize(block_capacity_);
        }
        free_slots_.insert(i);
      } else if (!contains(Id{i})) {
        free_slots_.insert(i);
      }
    }
    high_water_ = std::max(high_water_, high_water);
  }

  /// Places an element at an explicit slot (deserialization path).
  void insert_at(Id id, T element) {
    const std::uint32_t block = id.value / block_capacity_;
    while (block >= blocks_.size()) {
      blocks_.push_back(std::make_unique<std::vector<std::optional<T>>>());
      blocks_.back()->resize(block_capacity_);
    }
    auto& cell = (*blocks_[block])[id.value % block_capacity_];
    if (!cell.has_value()) ++live_count_;
    cell = std::move(element);
    free_slots_.erase(id.value);
    if (id.value >= high_water_) {
      for (std::uint32_t i = high_water_; i < id.value; ++i) free_slots_.insert(i);
      high_water_ = id.value + 1;
    }
  }

 private:
  std::optional<T>& cell_checked(Id id, const char* op) {
    if (id.value >= high_water_)
      raise(Errc::dead_id, std::string(op) + " on unused id " + std::to_string(id.value));
    auto& cell = (*blocks_[id.value / block_capacity_])[id.value % block_capacity_];
    if (!cell.has_value())
      raise(Errc::dead_id, std::string(op) + " on erased id " + std::to_string(id.value));
    return cell;
  }

  std::uint32_t block_capacity_;
  std::vector<std::unique_ptr<std::vector<std::optional<T>>>> blocks_;
  std::set<std::uint32_t> free_slots_;
  std::uint32_t high_water_ = 0;
  std::uint32_t live_count_ = 0;
};

}  // namespace kmslam
