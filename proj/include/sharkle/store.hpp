// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sharkle/broker.hpp"
#include "sharkle/pool.hpp"

namespace sharkle {

// Off-heap attribute store: per-partition sorted record arrays plus a hash
// index, both in pool memory, mapping 64-bit keys to fixed-width attribute
// payloads that are updated in place between stages.
//
// Record layout (contiguous array, one entry per key, keys strictly
// ascending):
//   key u64 | attr_0 .. attr_{k-1} | version u64
// The version word is bumped (release) after each in-place payload write;
// within the stage discipline readers never observe it mid-update, and the
// checkpointer uses it to detect contract-violating concurrent writers.
//
// Hash index: open addressing, linear probing, power-of-two capacity at
// load factor <= 0.7, laid out as a key array followed by a u32 slot array
// (0xffffffff = empty).
//
// Partition header (little-endian, packed):
//   partition_id u64 | entry_count u64 | attr_count u32 | widths u32 * k |
//   records_ref u64 | hash_ref u64 | hash_size u64

struct AttributeSchema {
  std::vector<uint32_t> widths;

  uint32_t payload_width() const {
    uint32_t w = 0;
    for (uint32_t x : widths) w += x;
    return w;
  }
  // key + payload: the bytes the paper's layout stores per entry.
  uint32_t raw_record_width() const { return 8 + payload_width(); }
  // key + payload + version word: the bytes the array actually holds.
  uint32_t stride() const { return raw_record_width() + 8; }
  uint32_t attr_offset(size_t i) const {
    uint32_t off = 8;
    for (size_t j = 0; j < i; ++j) off += widths[j];
    return off;
  }

  void validate() const {
    expect(!widths.empty(), Errc::invalid_config, "schema needs attributes");
    for (uint32_t w : widths) {
      expect(w > 0, Errc::invalid_config, "attribute width must be > 0");
    }
  }
};

namespace detail {

inline constexpr uint32_t kHashEmpty = 0xffffffffu;

inline uint64_t hash_capacity(uint64_t entries) {
  uint64_t min_slots = entries + (entries * 3 + 6) / 7;  // ceil(n / 0.7)
  return std::bit_ceil(std::max<uint64_t>(min_slots, 8));
}

struct PartitionHeaderView {
  uint64_t partition_id;
  uint64_t entry_count;
  std::vector<uint32_t> widths;
  GlobalRef records;
  GlobalRef hash;
  uint64_t hash_size;

  static PartitionHeaderView read(const Pool& pool, GlobalRef ref) {
    const std::byte* p = pool.resolve(ref);
    PartitionHeaderView h;
    h.partition_id = load_u64(p);
    h.entry_count = load_u64(p + 8);
    uint32_t attr_count = load_u32(p + 16);
    h.widths.resize(attr_count);
    for (uint32_t i = 0; i < attr_count; ++i) {
      h.widths[i] = load_u32(p + 20 + i * 4);
    }
    const std::byte* q = p + 20 + attr_count * 4;
    h.records = GlobalRef{load_u64(q)};
    h.hash = GlobalRef{load_u64(q + 8)};
    h.hash_size = load_u64(q + 16);
    return h;
  }

  static uint64_t bytes(uint32_t attr_count) {
    return 20 + attr_count * 4ull + 24;
  }

  void write(Pool& pool, GlobalRef ref) const {
    std::byte* p = pool.resolve(ref);
    store_u64(p, partition_id);
    store_u64(p + 8, entry_count);
    store_u32(p + 16, static_cast<uint32_t>(widths.size()));
    for (size_t i = 0; i < widths.size(); ++i) {
      store_u32(p + 20 + i * 4, widths[i]);
    }
    std::byte* q = p + 20 + widths.size() * 4;
    store_u64(q, records.offset);
    store_u64(q + 8, hash.offset);
    store_u64(q + 16, hash_size);
  }
};

}  // namespace detail

// Attached view over one partition; cheap to construct in any process.
class StorePartition {
 public:
  StorePartition() = default;
  StorePartition(Pool& pool, GlobalRef header)
      : pool_(&pool),
        header_ref_(header),
        h_(detail::PartitionHeaderView::read(pool, header)) {
    schema_.widths = h_.widths;
    records_ = pool.resolve(h_.records);
    hash_keys_ = reinterpret_cast<uint64_t*>(pool.resolve(h_.hash));
    hash_slots_ = reinterpret_cast<uint32_t*>(
        pool.resolve(h_.hash) + h_.hash_size * 8);
  }

  GlobalRef header_ref() const { return header_ref_; }
  uint64_t partition_id() const { return h_.partition_id; }
  uint64_t entry_count() const { return h_.entry_count; }
  const AttributeSchema& schema() const { return schema_; }

  std::span<const std::byte> record_array_bytes() const {
    return {records_, h_.entry_count * schema_.stride()};
  }

  // Hash-based point lookup; returns the full payload (all attributes).
  std::optional<std::span<const std::byte>> lookup(uint64_t key) const {
    int64_t idx = hash_find(key);
    if (idx < 0) return std::nullopt;
    return payload(static_cast<uint64_t>(idx));
  }

  std::optional<uint64_t> index_of(uint64_t key) const {
    int64_t idx = hash_find(key);
    if (idx < 0) return std::nullopt;
    return static_cast<uint64_t>(idx);
  }

  // Binary search over the sorted array; the differential twin of lookup.
  std::optional<uint64_t> index_of_sorted(uint64_t key) const {
    uint64_t lo = 0, hi = h_.entry_count;
    while (lo < hi) {
      uint64_t mid = (lo + hi) / 2;
      uint64_t k = key_at(mid);
      if (k < key) {
        lo = mid + 1;
      } else if (k > key) {
        hi = mid;
      } else {
        return mid;
      }
    }
    return std::nullopt;
  }

  uint64_t key_at(uint64_t idx) const {
    return load_u64(records_ + idx * schema_.stride());
  }
  std::span<const std::byte> payload(uint64_t idx) const {
    return {records_ + idx * schema_.stride() + 8, schema_.payload_width()};
  }
  std::span<const std::byte> attribute(uint64_t idx, size_t attr) const {
    return {records_ + idx * schema_.stride() + schema_.attr_offset(attr),
            schema_.widths[attr]};
  }
  uint64_t version_at(uint64_t idx) const {
    return std::atomic_ref<const uint64_t>(
               *reinterpret_cast<const uint64_t*>(
                   records_ + (idx + 1) * schema_.stride() - 8))
        .load(std::memory_order_acquire);
  }
  GlobalRef record_ref(uint64_t idx) const {
    return GlobalRef{h_.records.offset + idx * schema_.stride()};
  }

  // Ascending stream of records with key in [key_lo, key_hi].
  void scan(uint64_t key_lo, uint64_t key_hi,
            const std::function<void(uint64_t, std::span<const std::byte>)>& fn)
      const {
    expect(key_lo <= key_hi, Errc::invalid_argument, "scan range inverted");
    uint64_t lo = 0, hi = h_.entry_count;
    while (lo < hi) {  // lower bound
      uint64_t mid = (lo + hi) / 2;
      if (key_at(mid) < key_lo) {
        lo = mid + 1;
      } else {
        hi = mid;
      }
    }
    for (uint64_t i = lo; i < h_.entry_count && key_at(i) <= key_hi; ++i) {
      fn(key_at(i), payload(i));
    }
  }

  // Single-writer in-place attribute update; visible to readers after the
  // next stage barrier.
  void update_in_place(uint64_t key, size_t attr,
                       std::span<const std::byte> bytes) {
    expect(attr < schema_.widths.size(), Errc::invalid_argument,
           "attribute index");
    if (bytes.size() != schema_.widths[attr]) {
      raise(Errc::width_mismatch,
            "attribute " + std::to_string(attr) + " is " +
                std::to_string(schema_.widths[attr]) + " bytes, got " +
                std::to_string(bytes.size()));
    }
    int64_t idx = hash_find(key);
    if (idx < 0) {
      raise(Errc::key_absent, "key " + std::to_string(key));
    }
    std::byte* rec = records_ + static_cast<uint64_t>(idx) * schema_.stride();
    std::memcpy(rec + schema_.attr_offset(attr), bytes.data(), bytes.size());
    auto ver = std::atomic_ref<uint64_t>(
        *reinterpret_cast<uint64_t*>(rec + schema_.stride() - 8));
    ver.store(ver.load(std::memory_order_relaxed) + 1,
              std::memory_order_release);
  }

 private:
  int64_t hash_find(uint64_t key) const {
    if (h_.entry_count == 0) return -1;
    uint64_t mask = h_.hash_size - 1;
    uint64_t i = mix64(key) & mask;
    while (true) {
      uint32_t slot = hash_slots_[i];
      if (slot == detail::kHashEmpty) return -1;
      if (hash_keys_[i] == key) return static_cast<int64_t>(slot);
      i = (i + 1) & mask;
    }
  }

  Pool* pool_ = nullptr;
  GlobalRef header_ref_;
  detail::PartitionHeaderView h_;
  AttributeSchema schema_;
  std::byte* records_ = nullptr;
  uint64_t* hash_keys_ = nullptr;
  uint32_t* hash_slots_ = nullptr;
};

namespace detail {

inline void build_hash_index(Pool& pool, GlobalRef hash_ref, uint64_t hash_size,
                             const std::byte* records, uint64_t count,
                             uint32_t stride) {
  uint64_t* keys = reinterpret_cast<uint64_t*>(pool.resolve(hash_ref));
  uint32_t* slots =
      reinterpret_cast<uint32_t*>(pool.resolve(hash_ref) + hash_size * 8);
  std::fill(slots, slots + hash_size, kHashEmpty);
  uint64_t mask = hash_size - 1;
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t key = load_u64(records + i * stride);
    uint64_t slot = mix64(key) & mask;
    while (slots[slot] != kHashEmpty) slot = (slot + 1) & mask;
    keys[slot] = key;
    slots[slot] = static_cast<uint32_t>(i);
  }
}

}  // namespace detail

// Builds a partition from a key-sorted, duplicate-free record stream. The
// record array and hash index are carved from the same heap so they stay
// co-located with the owner's other partitions.
template <typename PayloadFn>
  requires std::invocable<PayloadFn&, uint64_t>
GlobalRef build_partition(Pool& pool, Heap& heap, uint64_t partition_id,
                          const AttributeSchema& schema,
                          std::span<const uint64_t> keys, PayloadFn&& payload_of,
                          std::optional<uint32_t> node_hint = {}) {
  schema.validate();
  uint64_t count = keys.size();
  uint32_t stride = schema.stride();
  uint64_t hash_size = detail::hash_capacity(count);

  GlobalRef header_ref = heap.allocate(
      detail::PartitionHeaderView::bytes(
          static_cast<uint32_t>(schema.widths.size())),
      node_hint);
  GlobalRef records_ref =
      heap.allocate(std::max<uint64_t>(count * stride, 1), node_hint);
  GlobalRef hash_ref = heap.allocate(hash_size * 12, node_hint);

  std::byte* records = pool.resolve(records_ref);
  uint64_t prev = 0;
  for (uint64_t i = 0; i < count; ++i) {
    if (i > 0) {
      if (keys[i] == prev) {
        raise(Errc::duplicate_key, "key " + std::to_string(keys[i]));
      }
      if (keys[i] < prev) {
        raise(Errc::unsorted_input, "key " + std::to_string(keys[i]) +
                                        " after " + std::to_string(prev));
      }
    }
    prev = keys[i];
    std::byte* rec = records + i * stride;
    store_u64(rec, keys[i]);
    std::span<const std::byte> payload = payload_of(i);
    expect(payload.size() == schema.payload_width(), Errc::width_mismatch,
           "payload width");
    std::memcpy(rec + 8, payload.data(), payload.size());
    store_u64(rec + stride - 8, 0);  // version word
  }
  detail::build_hash_index(pool, hash_ref, hash_size, records, count, stride);

  detail::PartitionHeaderView h;
  h.partition_id = partition_id;
  h.entry_count = count;
  h.widths = schema.widths;
  h.records = records_ref;
  h.hash = hash_ref;
  h.hash_size = hash_size;
  h.write(pool, header_ref);
  return header_ref;
}

inline GlobalRef build_partition(Pool& pool, Heap& heap, uint64_t partition_id,
                                 const AttributeSchema& schema,
                                 std::span<const uint64_t> keys,
                                 std::span<const std::byte> packed_payloads,
                                 std::optional<uint32_t> node_hint = {}) {
  uint32_t w = schema.payload_width();
  expect(packed_payloads.size() == keys.size() * w, Errc::width_mismatch,
         "packed payload size");
  return build_partition(
      pool, heap, partition_id, schema, keys,
      [&](uint64_t i) { return packed_payloads.subspan(i * w, w); }, node_hint);
}

// Rebuilds a partition from a raw record-array image (snapshot restore).
// The image bytes, version words included, are preserved exactly.
inline GlobalRef load_partition_image(Pool& pool, Heap& heap,
                                      uint64_t partition_id,
                                      const AttributeSchema& schema,
                                      std::span<const std::byte> image) {
  schema.validate();
  uint32_t stride = schema.stride();
  expect(image.size() % stride == 0, Errc::io_failure,
         "record image not a multiple of the record stride");
  uint64_t count = image.size() / stride;
  uint64_t hash_size = detail::hash_capacity(count);

  GlobalRef header_ref = heap.allocate(detail::PartitionHeaderView::bytes(
      static_cast<uint32_t>(schema.widths.size())));
  GlobalRef records_ref = heap.allocate(std::max<uint64_t>(image.size(), 1));
  GlobalRef hash_ref = heap.allocate(hash_size * 12);
  std::byte* records = pool.resolve(records_ref);
  std::memcpy(records, image.data(), image.size());
  detail::build_hash_index(pool, hash_ref, hash_size, records, count, stride);

  detail::PartitionHeaderView h;
  h.partition_id = partition_id;
  h.entry_count = count;
  h.widths = schema.widths;
  h.records = records_ref;
  h.hash = hash_ref;
  h.hash_size = hash_size;
  h.write(pool, header_ref);
  return header_ref;
}

// --- routing table --------------------------------------------------------------

// Dense pool-resident array: partition id -> partition header ref, readable
// from every process. Layout: count u64, then count refs.
class RoutingTable {
 public:
  RoutingTable() = default;
  RoutingTable(Pool& pool, GlobalRef table) : pool_(&pool), table_(table) {
    count_ = load_u64(pool.resolve(table));
  }

  GlobalRef table_ref() const { return table_; }
  uint64_t partition_count() const { return count_; }

  GlobalRef partition_ref(uint64_t pid) const {
    expect(pid < count_, Errc::invalid_argument, "partition id out of range");
    return GlobalRef{load_u64(pool_->resolve(table_) + 8 + pid * 8)};
  }

  StorePartition partition(uint64_t pid) const {
    return StorePartition(*pool_, partition_ref(pid));
  }

 private:
  Pool* pool_ = nullptr;
  GlobalRef table_;
  uint64_t count_ = 0;
};

inline RoutingTable build_routing_table(Pool& pool, Heap& heap,
                                        std::span<const GlobalRef> partitions) {
  GlobalRef table = heap.allocate(8 + partitions.size() * 8);
  std::byte* p = pool.resolve(table);
  store_u64(p, partitions.size());
  std::memset(p + 8, 0, partitions.size() * 8);
  for (GlobalRef ref : partitions) {
    uint64_t pid = detail::PartitionHeaderView::read(pool, ref).partition_id;
    expect(pid < partitions.size(), Errc::duplicate_partition_id,
           "partition id " + std::to_string(pid) + " outside dense range");
    if (load_u64(p + 8 + pid * 8) != 0) {
      raise(Errc::duplicate_partition_id, "partition " + std::to_string(pid));
    }
    store_u64(p + 8 + pid * 8, ref.offset);
  }
  for (uint64_t pid = 0; pid < partitions.size(); ++pid) {
    expect(load_u64(p + 8 + pid * 8) != 0, Errc::duplicate_partition_id,
           "partition " + std::to_string(pid) + " missing");
  }
  return RoutingTable(pool, table);
}

// --- address table ---------------------------------------------------------------

// Dense array of record refs aligned with a request stream: one global
// memory access per needed remote attribute, replacing a shuffle stage.
// Layout: count u64, then count record refs.
class AddressTable {
 public:
  AddressTable() = default;
  AddressTable(Pool& pool, GlobalRef table) : pool_(&pool), table_(table) {
    count_ = load_u64(pool.resolve(table));
  }

  GlobalRef table_ref() const { return table_; }
  uint64_t size() const { return count_; }

  GlobalRef entry(uint64_t i) const {
    return GlobalRef{load_u64(pool_->resolve(table_) + 8 + i * 8)};
  }

 private:
  Pool* pool_ = nullptr;
  GlobalRef table_;
  uint64_t count_ = 0;
};

// `partition_of_key` must match the partitioner that placed the keys.
template <typename PartitionOfKey>
AddressTable build_address_table(Pool& pool, Heap& heap,
                                 const RoutingTable& routing,
                                 std::span<const uint64_t> keys,
                                 PartitionOfKey&& partition_of_key) {
  GlobalRef table = heap.allocate(8 + keys.size() * 8);
  std::byte* out = pool.resolve(table);
  store_u64(out, keys.size());

  std::map<uint64_t, StorePartition> attached;
  for (size_t i = 0; i < keys.size(); ++i) {
    uint64_t pid = partition_of_key(keys[i]);
    auto it = attached.find(pid);
    if (it == attached.end()) {
      it = attached.emplace(pid, routing.partition(pid)).first;
    }
    auto idx = it->second.index_of(keys[i]);
    if (!idx) {
      raise(Errc::key_absent, "key " + std::to_string(keys[i]) +
                                  " absent from partition " +
                                  std::to_string(pid));
    }
    store_u64(out + 8 + i * 8, it->second.record_ref(*idx).offset);
  }
  return AddressTable(pool, table);
}

// Reads one attribute for every table entry, in request order.
template <typename Fn>
void gather(Pool& pool, const AddressTable& table, const AttributeSchema& schema,
            size_t attr, Fn&& fn) {
  uint32_t off = schema.attr_offset(attr);
  uint32_t width = schema.widths[attr];
  const std::byte* base = pool.resolve(table.table_ref());
  uint64_t n = table.size();
  for (uint64_t i = 0; i < n; ++i) {
    GlobalRef rec{load_u64(base + 8 + i * 8)};
    fn(i, std::span<const std::byte>(pool.resolve(rec) + off, width));
  }
}

// Default placement rule for store datasets: a key's partition is its
// multiplicative hash mod the partition count (the shuffle partitioner for
// int64 keys computes the same value).
inline uint64_t key_partition(uint64_t key, uint64_t num_partitions) {
  return mix64(key) % num_partitions;
}

}  // namespace sharkle
