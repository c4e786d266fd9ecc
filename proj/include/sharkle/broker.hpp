// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sharkle/pool.hpp"

namespace sharkle {

// Retail memory broker: heap instances carved out of the pool's zones.
//
// A zone is owned by at most one heap generation at a time; ownership is
// claimed with a CAS on the zone's owner word. Inside a zone, allocations
// are extents (page multiples) recorded in a slot array at the zone start,
// or blocks inside slab extents for sub-page sizes. Every allocate/free
// commits through a single word store (an extent slot or a slab bitmap
// byte) so that a process dying mid-operation can at worst leak memory,
// never corrupt it. Leaks are reclaimed by destroy_heap.
//
// Zone metadata layout (at each zone's first pages, little-endian):
//   [0..8)   owner_generation (0 = unowned)
//   [8..16)  home_node
//   [16..)   extent slots, one u64 per zone page:
//              low 32 bits  start_page
//              high 32 bits length_pages, with bit 31 flagging a slab extent
//
// Slab extents are two pages: a header page (block_size u32 + allocation
// bitmap) and one payload page split into equal power-of-two blocks.

// Test hook: called at every metadata step boundary in allocate/free paths.
// Crash-injection tests kill the process inside the hook.
inline void (*g_metadata_step_hook)() = nullptr;

namespace detail {

inline void metadata_step() {
  if (g_metadata_step_hook != nullptr) g_metadata_step_hook();
}

inline constexpr uint64_t kZoneOwnerOff = 0;
inline constexpr uint64_t kZoneNodeOff = 8;
inline constexpr uint64_t kZoneSlotsOff = 16;
inline constexpr uint32_t kSlabFlag = 0x80000000u;
inline constexpr uint32_t kSlabPages = 2;  // header page + payload page
inline constexpr uint32_t kMinBlock = 8;

inline uint64_t make_slot(uint32_t start_page, uint32_t len_pages, bool slab) {
  uint64_t len = len_pages | (slab ? kSlabFlag : 0u);
  return static_cast<uint64_t>(start_page) | (len << 32);
}
inline uint32_t slot_start(uint64_t slot) {
  return static_cast<uint32_t>(slot & 0xffffffffu);
}
inline uint32_t slot_length(uint64_t slot) {
  return static_cast<uint32_t>(slot >> 32) & ~kSlabFlag;
}
inline bool slot_is_slab(uint64_t slot) {
  return (static_cast<uint32_t>(slot >> 32) & kSlabFlag) != 0;
}
inline bool slot_live(uint64_t slot) { return slot_length(slot) != 0; }

}  // namespace detail

// Read-only view of one zone's pool-resident metadata.
class ZoneView {
 public:
  ZoneView(const Pool& pool, uint32_t zone_id)
      : pool_(&pool), zone_id_(zone_id), base_(pool.zone_base(zone_id)) {}

  uint32_t id() const { return zone_id_; }
  uint64_t pages() const { return pool_->zone_size() / pool_->page_size(); }
  uint64_t slot_count() const { return pages(); }
  uint64_t metadata_bytes() const {
    return detail::kZoneSlotsOff + slot_count() * 8;
  }
  uint64_t metadata_pages() const {
    return (metadata_bytes() + pool_->page_size() - 1) / pool_->page_size();
  }

  std::atomic_ref<uint64_t> owner_word() const {
    return std::atomic_ref<uint64_t>(
        *reinterpret_cast<uint64_t*>(base_ + detail::kZoneOwnerOff));
  }
  uint64_t owner() const { return owner_word().load(std::memory_order_acquire); }
  uint64_t home_node() const { return load_u64(base_ + detail::kZoneNodeOff); }

  std::atomic_ref<uint64_t> slot_word(uint64_t i) const {
    return std::atomic_ref<uint64_t>(
        *reinterpret_cast<uint64_t*>(base_ + detail::kZoneSlotsOff + i * 8));
  }
  uint64_t slot(uint64_t i) const {
    return slot_word(i).load(std::memory_order_acquire);
  }

  std::byte* page_ptr(uint32_t page) const {
    return base_ + static_cast<uint64_t>(page) * pool_->page_size();
  }
  GlobalRef page_ref(uint32_t page) const {
    return GlobalRef{static_cast<uint64_t>(zone_id_) * pool_->zone_size() +
                     static_cast<uint64_t>(page) * pool_->page_size()};
  }

 private:
  const Pool* pool_;
  uint32_t zone_id_;
  std::byte* base_;
};

// Slab header accessors; the header occupies the first page of a slab extent.
class SlabView {
 public:
  SlabView(const Pool& pool, std::byte* header_page)
      : page_size_(static_cast<uint32_t>(pool.page_size())),
        header_(header_page) {}

  uint32_t block_size() const { return load_u32(header_); }
  void set_block_size(uint32_t s) { store_u32(header_, s); }
  uint32_t block_count() const { return page_size_ / block_size(); }
  uint32_t bitmap_bytes() const { return (block_count() + 7) / 8; }

  unsigned char* bitmap() const {
    return reinterpret_cast<unsigned char*>(header_) + 4;
  }
  bool bit(uint32_t i) const {
    return (bitmap()[i / 8] >> (i % 8)) & 1u;
  }
  // Single-byte commit writes; release ordering orders prior payload stores.
  void set_bit(uint32_t i) {
    auto b = std::atomic_ref<unsigned char>(bitmap()[i / 8]);
    b.store(static_cast<unsigned char>(b.load(std::memory_order_relaxed) |
                                       (1u << (i % 8))),
            std::memory_order_release);
  }
  void clear_bit(uint32_t i) {
    auto b = std::atomic_ref<unsigned char>(bitmap()[i / 8]);
    b.store(static_cast<unsigned char>(b.load(std::memory_order_relaxed) &
                                       ~(1u << (i % 8))),
            std::memory_order_release);
  }
  uint32_t popcount() const {
    uint32_t n = 0;
    for (uint32_t i = 0; i < bitmap_bytes(); ++i) {
      n += static_cast<uint32_t>(std::popcount(unsigned{bitmap()[i]}));
    }
    return n;
  }
  std::optional<uint32_t> first_clear() const {
    for (uint32_t i = 0; i < block_count(); ++i) {
      if (!bit(i)) return i;
    }
    return std::nullopt;
  }

 private:
  uint32_t page_size_;
  std::byte* header_;
};

// One heap instance. Single mutating owner; the pool-resident extent maps
// are the source of truth and everything here is a rebuildable cache.
class Heap {
 public:
  explicit Heap(Pool& pool)
      : pool_(&pool),
        generation_(pool.next_generation_word().fetch_add(
            1, std::memory_order_relaxed)) {}

  Heap(const Heap&) = delete;
  Heap& operator=(const Heap&) = delete;
  Heap(Heap&&) = default;
  Heap& operator=(Heap&&) = default;

  uint64_t generation() const { return generation_; }
  Pool& pool() const { return *pool_; }

  uint64_t max_alloc_size() const {
    ZoneView zv(*pool_, 0);
    return (zv.pages() - zv.metadata_pages()) * pool_->page_size();
  }

  GlobalRef allocate(uint64_t size, std::optional<uint32_t> node_hint = {}) {
    expect(size > 0, Errc::invalid_argument, "allocation size must be > 0");
    uint32_t hint = node_hint.value_or(0);
    uint64_t page = pool_->page_size();
    if (size <= page / 2) {
      uint32_t cls = static_cast<uint32_t>(
          std::bit_ceil(std::max<uint64_t>(size, detail::kMinBlock)));
      GlobalRef ref = slab_allocate(cls, hint);
      pool_->add_live_bytes(static_cast<int64_t>(cls));
      return ref;
    }
    uint64_t pages = (size + page - 1) / page;
    if (size > max_alloc_size()) {
      raise(Errc::size_too_large,
            "request of " + std::to_string(size) + " bytes exceeds max extent " +
                std::to_string(max_alloc_size()));
    }
    GlobalRef ref = extent_allocate(static_cast<uint32_t>(pages), hint, false);
    pool_->add_live_bytes(static_cast<int64_t>(pages * page));
    return ref;
  }

  void deallocate(GlobalRef ref) {
    pool_->resolve(ref);  // range check
    uint32_t zone_id = static_cast<uint32_t>(ref.offset / pool_->zone_size());
    ZoneView zv(*pool_, zone_id);
    uint64_t owner = zv.owner();
    if (owner != generation_) {
      raise(Errc::not_owner, "zone " + std::to_string(zone_id) +
                                 " owned by generation " + std::to_string(owner) +
                                 ", not " + std::to_string(generation_));
    }
    ZoneState& zs = zone_state(zone_id);
    uint64_t in_zone = ref.offset % pool_->zone_size();
    uint32_t page = static_cast<uint32_t>(in_zone / pool_->page_size());

    // Locate the live extent containing this page.
    auto it = zs.live.upper_bound(page);
    if (it == zs.live.begin()) {
      raise(Errc::double_free, "no live extent contains the address");
    }
    --it;
    const LiveExtent& ext = it->second;
    if (page >= it->first + ext.length) {
      raise(Errc::double_free, "no live extent contains the address");
    }

    if (ext.slab) {
      SlabView slab(*pool_, zv.page_ptr(it->first));
      uint64_t payload_off =
          static_cast<uint64_t>(it->first + 1) * pool_->page_size();
      if (in_zone < payload_off) {
        raise(Errc::double_free, "address is slab metadata, not an allocation");
      }
      uint64_t delta = in_zone - payload_off;
      uint32_t bs = slab.block_size();
      if (delta % bs != 0) {
        raise(Errc::double_free, "address is not a block boundary");
      }
      uint32_t block = static_cast<uint32_t>(delta / bs);
      if (!slab.bit(block)) {
        raise(Errc::double_free, "slab block already free");
      }
      detail::metadata_step();
      slab.clear_bit(block);  // commit
      detail::metadata_step();
      slab_cache_[bs].free_blocks_hint = true;
      pool_->add_live_bytes(-static_cast<int64_t>(bs));
      return;
    }

    if (in_zone % pool_->page_size() != 0 || page != it->first) {
      raise(Errc::double_free, "address is interior to an extent");
    }
    detail::metadata_step();
    zv.slot_word(ext.slot_index).store(0, std::memory_order_release);  // commit
    detail::metadata_step();
    release_pages(zs, it->first, ext.length);
    zs.free_slots.push_back(ext.slot_index);
    zs.live.erase(it);
    pool_->add_live_bytes(-static_cast<int64_t>(static_cast<uint64_t>(ext.length) *
                                                pool_->page_size()));
  }

  // Rounded size the allocator charges for a request (test oracle helper).
  uint64_t charged_size(uint64_t size) const {
    uint64_t page = pool_->page_size();
    if (size <= page / 2) {
      return std::bit_ceil(std::max<uint64_t>(size, detail::kMinBlock));
    }
    return (size + page - 1) / page * page;
  }

  const std::vector<uint32_t>& owned_zones() const { return owned_order_; }

 private:
  struct LiveExtent {
    uint32_t length = 0;
    uint64_t slot_index = 0;
    bool slab = false;
  };
  struct ZoneState {
    std::map<uint32_t, uint32_t> free_extents;  // start_page -> length_pages
    std::map<uint32_t, LiveExtent> live;        // start_page -> extent
    std::vector<uint64_t> free_slots;           // reusable slot indices
  };
  struct SlabEntry {
    uint32_t zone_id;
    uint32_t start_page;
  };
  struct SlabCache {
    std::vector<SlabEntry> slabs;
    bool free_blocks_hint = true;
  };

  ZoneState& zone_state(uint32_t zone_id) { return zones_.at(zone_id); }

  // Nodes ordered by |node - hint|, lower id first on ties.
  std::vector<uint32_t> node_order(uint32_t hint) const {
    std::vector<uint32_t> nodes(pool_->node_count());
    for (uint32_t n = 0; n < nodes.size(); ++n) nodes[n] = n;
    std::stable_sort(nodes.begin(), nodes.end(), [&](uint32_t a, uint32_t b) {
      uint64_t da = a > hint ? a - hint : hint - a;
      uint64_t db = b > hint ? b - hint : hint - b;
      return da != db ? da < db : a < b;
    });
    return nodes;
  }

  bool try_acquire_zone(uint32_t zone_id) {
    ZoneView zv(*pool_, zone_id);
    uint64_t expected = 0;
    detail::metadata_step();
    bool won = zv.owner_word().compare_exchange_strong(
        expected, generation_, std::memory_order_acq_rel);
    detail::metadata_step();
    if (!won) return false;
    ZoneState zs;
    uint32_t meta = static_cast<uint32_t>(zv.metadata_pages());
    uint32_t total = static_cast<uint32_t>(zv.pages());
    if (meta < total) zs.free_extents.emplace(meta, total - meta);
    zs.free_slots.reserve(zv.slot_count());
    for (uint64_t i = zv.slot_count(); i > 0; --i) zs.free_slots.push_back(i - 1);
    zones_.emplace(zone_id, std::move(zs));
    owned_order_.push_back(zone_id);
    return true;
  }

  // First fit by address within a zone.
  std::optional<uint32_t> take_pages(ZoneState& zs, uint32_t len) {
    for (auto it = zs.free_extents.begin(); it != zs.free_extents.end(); ++it) {
      if (it->second >= len) {
        uint32_t start = it->first;
        uint32_t rest = it->second - len;
        zs.free_extents.erase(it);
        if (rest > 0) zs.free_extents.emplace(start + len, rest);
        return start;
      }
    }
    return std::nullopt;
  }

  void release_pages(ZoneState& zs, uint32_t start, uint32_t len) {
    auto [it, _] = zs.free_extents.emplace(start, len);
    // Coalesce with the next and previous free runs when adjacent.
    auto next = std::next(it);
    if (next != zs.free_extents.end() && it->first + it->second == next->first) {
      it->second += next->second;
      zs.free_extents.erase(next);
    }
    if (it != zs.free_extents.begin()) {
      auto prev = std::prev(it);
      if (prev->first + prev->second == it->first) {
        prev->second += it->second;
        zs.free_extents.erase(it);
      }
    }
  }

  GlobalRef commit_extent(uint32_t zone_id, uint32_t start, uint32_t len,
                          bool slab) {
    ZoneView zv(*pool_, zone_id);
    // Guards against a heap used after destroy_heap reclaimed its zones.
    if (zv.owner() != generation_) {
      raise(Errc::not_owner, "heap generation " + std::to_string(generation_) +
                                 " no longer owns zone " +
                                 std::to_string(zone_id));
    }
    ZoneState& zs = zone_state(zone_id);
    uint64_t slot_index = zs.free_slots.back();
    zs.free_slots.pop_back();
    detail::metadata_step();
    zv.slot_word(slot_index)
        .store(detail::make_slot(start, len, slab), std::memory_order_release);
    detail::metadata_step();
    zs.live.emplace(start, LiveExtent{len, slot_index, slab});
    return zv.page_ref(start);
  }

  GlobalRef extent_allocate(uint32_t pages, uint32_t hint, bool slab) {
    for (uint32_t node : node_order(hint)) {
      // Owned zones on this node first, in acquisition order.
      for (uint32_t zone_id : owned_order_) {
        ZoneView zv(*pool_, zone_id);
        if (zv.home_node() != node) continue;
        ZoneState& zs = zone_state(zone_id);
        if (zs.free_slots.empty()) continue;
        if (auto start = take_pages(zs, pages)) {
          return finish_extent(zone_id, *start, pages, slab);
        }
      }
      // Then try to claim an unowned zone on this node.
      for (uint64_t zone_id = node; zone_id < pool_->zone_count();
           zone_id += pool_->node_count()) {
        ZoneView zv(*pool_, static_cast<uint32_t>(zone_id));
        if (zv.owner() != 0) continue;
        if (!try_acquire_zone(static_cast<uint32_t>(zone_id))) continue;
        ZoneState& zs = zone_state(static_cast<uint32_t>(zone_id));
        if (auto start = take_pages(zs, pages)) {
          return finish_extent(static_cast<uint32_t>(zone_id), *start, pages,
                               slab);
        }
      }
    }
    raise(Errc::pool_exhausted,
          "no zone can hold " + std::to_string(pages) + " pages");
  }

  GlobalRef finish_extent(uint32_t zone_id, uint32_t start, uint32_t pages,
                          bool slab) {
    if (!slab) return commit_extent(zone_id, start, pages, slab);
    // Format the slab header before the slot commit makes it reachable.
    ZoneView zv(*pool_, zone_id);
    SlabView sv(*pool_, zv.page_ptr(start));
    detail::metadata_step();
    sv.set_block_size(pending_slab_class_);
    std::memset(sv.bitmap(), 0, sv.bitmap_bytes());
    std::atomic_thread_fence(std::memory_order_release);
    detail::metadata_step();
    return commit_extent(zone_id, start, pages, slab);
  }

  GlobalRef slab_allocate(uint32_t cls, uint32_t hint) {
    SlabCache& cache = slab_cache_[cls];
    // Prefer a cached slab with room, nearest to the hinted node.
    if (cache.free_blocks_hint) {
      const SlabEntry* best = nullptr;
      uint64_t best_dist = ~0ull;
      std::optional<uint32_t> best_block;
      for (const SlabEntry& e : cache.slabs) {
        ZoneView zv(*pool_, e.zone_id);
        SlabView sv(*pool_, zv.page_ptr(e.start_page));
        auto blk = sv.first_clear();
        if (!blk) continue;
        uint64_t node = zv.home_node();
        uint64_t dist = node > hint ? node - hint : hint - node;
        if (dist < best_dist) {
          best_dist = dist;
          best = &e;
          best_block = blk;
          if (dist == 0) break;
        }
      }
      if (best != nullptr) {
        return slab_take(*best, cls, *best_block);
      }
      cache.free_blocks_hint = false;
    }
    // No room anywhere: carve a new slab extent near the hint.
    pending_slab_class_ = cls;
    GlobalRef slab_ref = extent_allocate(detail::kSlabPages, hint, true);
    uint32_t zone_id = static_cast<uint32_t>(slab_ref.offset / pool_->zone_size());
    uint32_t start = static_cast<uint32_t>((slab_ref.offset % pool_->zone_size()) /
                                           pool_->page_size());
    cache.slabs.push_back(SlabEntry{zone_id, start});
    cache.free_blocks_hint = true;
    return slab_take(cache.slabs.back(), cls, 0);
  }

  GlobalRef slab_take(const SlabEntry& e, uint32_t cls, uint32_t block) {
    ZoneView zv(*pool_, e.zone_id);
    if (zv.owner() != generation_) {
      raise(Errc::not_owner, "heap generation " + std::to_string(generation_) +
                                 " no longer owns zone " +
                                 std::to_string(e.zone_id));
    }
    SlabView sv(*pool_, zv.page_ptr(e.start_page));
    detail::metadata_step();
    sv.set_bit(block);  // commit
    detail::metadata_step();
    GlobalRef payload = zv.page_ref(e.start_page + 1);
    return GlobalRef{payload.offset + static_cast<uint64_t>(block) * cls};
  }

  Pool* pool_ = nullptr;
  uint64_t generation_ = 0;
  std::map<uint32_t, ZoneState> zones_;
  std::vector<uint32_t> owned_order_;
  std::map<uint32_t, SlabCache> slab_cache_;
  uint32_t pending_slab_class_ = 0;
};

inline Heap create_heap(Pool& pool) { return Heap(pool); }

// Bulk free: zero the metadata of every zone owned by `generation`.
// Idempotent; safe after the owning process died mid-operation.
inline uint64_t destroy_heap(Pool& pool, uint64_t generation) {
  expect(generation != 0, Errc::invalid_argument, "generation 0 is reserved");
  uint64_t reclaimed = 0;
  for (uint64_t z = 0; z < pool.zone_count(); ++z) {
    ZoneView zv(pool, static_cast<uint32_t>(z));
    if (zv.owner() != generation) continue;
    int64_t live = 0;
    for (uint64_t i = 0; i < zv.slot_count(); ++i) {
      uint64_t slot = zv.slot(i);
      if (!detail::slot_live(slot)) continue;
      if (detail::slot_is_slab(slot)) {
        SlabView sv(pool, zv.page_ptr(detail::slot_start(slot)));
        uint32_t bs = sv.block_size();
        if (bs >= detail::kMinBlock && std::has_single_bit(bs) &&
            bs <= pool.page_size() / 2) {
          live += static_cast<int64_t>(sv.popcount()) * bs;
        }
      } else {
        live += static_cast<int64_t>(detail::slot_length(slot)) *
                static_cast<int64_t>(pool.page_size());
      }
      zv.slot_word(i).store(0, std::memory_order_release);
    }
    // Owner cleared last so a partially-zeroed zone is still owned (and a
    // rerun finishes the job) rather than unowned with live slots.
    zv.owner_word().store(0, std::memory_order_release);
    pool.add_live_bytes(-live);
    ++reclaimed;
  }
  return reclaimed;
}

// --- consistency audit ---------------------------------------------------------

struct ZoneReport {
  uint32_t zone_id = 0;
  uint64_t owner = 0;
  uint64_t home_node = 0;
  uint64_t live_extents = 0;
  uint64_t live_bytes = 0;
};

struct PoolReport {
  std::vector<std::string> defects;
  std::vector<ZoneReport> zones;
  std::map<uint64_t, uint64_t> live_bytes_per_generation;
  uint64_t total_live_bytes = 0;

  bool clean() const { return defects.empty(); }
};

// Full structural audit of the pool. Requires external quiescence.
inline PoolReport verify_pool(const Pool& pool) {
  PoolReport report;
  for (uint64_t z = 0; z < pool.zone_count(); ++z) {
    ZoneView zv(pool, static_cast<uint32_t>(z));
    ZoneReport zr;
    zr.zone_id = static_cast<uint32_t>(z);
    zr.owner = zv.owner();
    zr.home_node = zv.home_node();
    if (zr.home_node != z % pool.node_count()) {
      report.defects.push_back("zone " + std::to_string(z) +
                               ": home_node mismatch");
    }

    std::vector<std::pair<uint32_t, uint64_t>> extents;  // start -> slot idx
    uint32_t meta = static_cast<uint32_t>(zv.metadata_pages());
    uint32_t total = static_cast<uint32_t>(zv.pages());
    for (uint64_t i = 0; i < zv.slot_count(); ++i) {
      uint64_t slot = zv.slot(i);
      if (!detail::slot_live(slot)) continue;
      uint32_t start = detail::slot_start(slot);
      uint32_t len = detail::slot_length(slot);
      if (zr.owner == 0) {
        report.defects.push_back("zone " + std::to_string(z) +
                                 ": unowned but slot " + std::to_string(i) +
                                 " is live");
        continue;
      }
      if (start < meta || start + len > total) {
        report.defects.push_back("zone " + std::to_string(z) + ": slot " +
                                 std::to_string(i) + " outside zone bounds");
        continue;
      }
      if (detail::slot_is_slab(slot)) {
        if (len != detail::kSlabPages) {
          report.defects.push_back("zone " + std::to_string(z) +
                                   ": slab extent with length " +
                                   std::to_string(len));
          continue;
        }
        SlabView sv(pool, zv.page_ptr(start));
        uint32_t bs = sv.block_size();
        if (bs < detail::kMinBlock || !std::has_single_bit(bs) ||
            bs > pool.page_size() / 2) {
          report.defects.push_back("zone " + std::to_string(z) +
                                   ": slab with invalid block size " +
                                   std::to_string(bs));
          continue;
        }
        // Bits past the block count must be clear.
        for (uint32_t b = sv.block_count(); b < sv.bitmap_bytes() * 8; ++b) {
          if (sv.bit(b)) {
            report.defects.push_back("zone " + std::to_string(z) +
                                     ": slab bitmap bit beyond capacity");
            break;
          }
        }
        zr.live_bytes += static_cast<uint64_t>(sv.popcount()) * bs;
      } else {
        zr.live_bytes += static_cast<uint64_t>(len) * pool.page_size();
      }
      ++zr.live_extents;
      extents.emplace_back(start, i);
    }

    std::sort(extents.begin(), extents.end());
    for (size_t i = 1; i < extents.size(); ++i) {
      uint64_t prev_slot = zv.slot(extents[i - 1].second);
      uint32_t prev_end =
          detail::slot_start(prev_slot) + detail::slot_length(prev_slot);
      if (extents[i].first < prev_end) {
        report.defects.push_back("zone " + std::to_string(z) +
                                 ": overlapping extents at page " +
                                 std::to_string(extents[i].first));
      }
    }

    if (zr.owner != 0) {
      report.live_bytes_per_generation[zr.owner] += zr.live_bytes;
      report.total_live_bytes += zr.live_bytes;
    }
    report.zones.push_back(zr);
  }
  return report;
}

}  // namespace sharkle
