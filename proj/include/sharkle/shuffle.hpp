// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "sharkle/broker.hpp"
#include "sharkle/pool.hpp"

namespace sharkle {

// Shared-memory shuffle: map tasks write per-reducer chains of data buckets
// into the pool and publish one index bucket each through a pool-resident
// registry; reduce tasks read the chains directly, merging per scheme.
//
// Record wire layout inside bucket payloads (little-endian):
//   key_kind u8 {0=int64, 1=float64, 2=bytes}
//   bytes keys: key_len u32 + key bytes; numeric keys: 8 bytes
//   value_len u32 + value bytes
//
// Index bucket: map_id u64, then num_reduces pairs of
// (first_bucket GlobalRef u64, total_entries u64).
//
// Registry (one row per map): index_ref u64, writer heap generation u64.
// The index word doubles as the publication flag; a reducer may start once
// every row is non-null.

enum class Scheme : uint8_t { sort_merge = 0, hash_merge = 1, pass_through = 2 };

enum class KeyKind : uint8_t { int64 = 0, float64 = 1, bytes = 2 };

class KVKey {
 public:
  KVKey() : v_(int64_t{0}) {}
  KVKey(int64_t x) : v_(x) {}
  KVKey(double x) : v_(x) {}
  KVKey(std::string x) : v_(std::move(x)) {}
  static KVKey raw(std::span<const std::byte> bytes) {
    return KVKey(std::string(reinterpret_cast<const char*>(bytes.data()),
                             bytes.size()));
  }

  KeyKind kind() const { return static_cast<KeyKind>(v_.index()); }
  int64_t as_int() const { return std::get<int64_t>(v_); }
  double as_float() const { return std::get<double>(v_); }
  const std::string& as_bytes() const { return std::get<std::string>(v_); }

  // Numeric keys compare numerically, byte keys lexicographically; mixed
  // kinds order by kind tag so the ordering stays total.
  friend bool operator<(const KVKey& a, const KVKey& b) {
    if (a.v_.index() != b.v_.index()) return a.v_.index() < b.v_.index();
    return a.v_ < b.v_;
  }
  friend bool operator==(const KVKey& a, const KVKey& b) { return a.v_ == b.v_; }

  uint64_t hash() const {
    switch (kind()) {
      case KeyKind::int64:
        return mix64(static_cast<uint64_t>(as_int()));
      case KeyKind::float64: {
        uint64_t bits;
        double d = as_float();
        std::memcpy(&bits, &d, 8);
        return mix64(bits);
      }
      case KeyKind::bytes:
        return hash_bytes(as_bytes().data(), as_bytes().size());
    }
    return 0;
  }

  // Canonical serialized form: kind byte + key payload.
  std::string canonical() const {
    std::string out;
    out.push_back(static_cast<char>(kind()));
    switch (kind()) {
      case KeyKind::int64: {
        uint64_t bits = static_cast<uint64_t>(as_int());
        out.append(reinterpret_cast<const char*>(&bits), 8);
        break;
      }
      case KeyKind::float64: {
        uint64_t bits;
        double d = as_float();
        std::memcpy(&bits, &d, 8);
        out.append(reinterpret_cast<const char*>(&bits), 8);
        break;
      }
      case KeyKind::bytes:
        out.append(as_bytes());
        break;
    }
    return out;
  }

 private:
  std::variant<int64_t, double, std::string> v_;
};

struct Record {
  KVKey key;
  std::string value;
};

struct RecordView {
  KVKey key;
  std::span<const std::byte> value;
};

struct Group {
  KVKey key;
  std::vector<std::span<const std::byte>> values;
};

namespace wire {

inline void append_key(std::vector<std::byte>& out, const KVKey& key) {
  out.push_back(static_cast<std::byte>(key.kind()));
  switch (key.kind()) {
    case KeyKind::int64: {
      uint64_t bits = static_cast<uint64_t>(key.as_int());
      const auto* p = reinterpret_cast<const std::byte*>(&bits);
      out.insert(out.end(), p, p + 8);
      break;
    }
    case KeyKind::float64: {
      uint64_t bits;
      double d = key.as_float();
      std::memcpy(&bits, &d, 8);
      const auto* p = reinterpret_cast<const std::byte*>(&bits);
      out.insert(out.end(), p, p + 8);
      break;
    }
    case KeyKind::bytes: {
      const std::string& s = key.as_bytes();
      uint32_t len = static_cast<uint32_t>(s.size());
      const auto* lp = reinterpret_cast<const std::byte*>(&len);
      out.insert(out.end(), lp, lp + 4);
      const auto* p = reinterpret_cast<const std::byte*>(s.data());
      out.insert(out.end(), p, p + s.size());
      break;
    }
  }
}

inline void append_record(std::vector<std::byte>& out, const KVKey& key,
                          std::span<const std::byte> value) {
  append_key(out, key);
  uint32_t vlen = static_cast<uint32_t>(value.size());
  const auto* lp = reinterpret_cast<const std::byte*>(&vlen);
  out.insert(out.end(), lp, lp + 4);
  out.insert(out.end(), value.begin(), value.end());
}

inline size_t encoded_size(const KVKey& key, size_t value_len) {
  size_t klen = key.kind() == KeyKind::bytes ? 4 + key.as_bytes().size() : 8;
  return 1 + klen + 4 + value_len;
}

// Decodes one record at p; returns the byte just past it.
inline const std::byte* decode_record(const std::byte* p, RecordView& out) {
  auto kind = static_cast<KeyKind>(*p);
  ++p;
  switch (kind) {
    case KeyKind::int64:
      out.key = KVKey(static_cast<int64_t>(load_u64(p)));
      p += 8;
      break;
    case KeyKind::float64: {
      double d;
      std::memcpy(&d, p, 8);
      out.key = KVKey(d);
      p += 8;
      break;
    }
    case KeyKind::bytes: {
      uint32_t len = load_u32(p);
      p += 4;
      out.key = KVKey(std::string(reinterpret_cast<const char*>(p), len));
      p += len;
      break;
    }
  }
  uint32_t vlen = load_u32(p);
  p += 4;
  out.value = std::span<const std::byte>(p, vlen);
  return p + vlen;
}

// Keys-only stream, used for range-partitioner splitters.
inline const std::byte* decode_key(const std::byte* p, KVKey& out) {
  auto kind = static_cast<KeyKind>(*p);
  ++p;
  switch (kind) {
    case KeyKind::int64:
      out = KVKey(static_cast<int64_t>(load_u64(p)));
      return p + 8;
    case KeyKind::float64: {
      double d;
      std::memcpy(&d, p, 8);
      out = KVKey(d);
      return p + 8;
    }
    case KeyKind::bytes: {
      uint32_t len = load_u32(p);
      p += 4;
      out = KVKey(std::string(reinterpret_cast<const char*>(p), len));
      return p + len;
    }
  }
  return p;
}

}  // namespace wire

// --- partitioning -------------------------------------------------------------

enum class PartitionerKind : uint8_t { hash = 0, range = 1 };

// Routes a key to a reducer. Range splitters live in the pool so every
// worker process sees the same boundaries; they are decoded once per task.
class LocalPartitioner {
 public:
  static LocalPartitioner hashed(uint32_t num_partitions) {
    LocalPartitioner p;
    p.num_partitions_ = num_partitions;
    return p;
  }
  static LocalPartitioner ranged(uint32_t num_partitions,
                                 std::vector<KVKey> splitters) {
    LocalPartitioner p;
    p.num_partitions_ = num_partitions;
    p.splitters_ = std::move(splitters);
    p.ranged_ = true;
    return p;
  }

  uint32_t num_partitions() const { return num_partitions_; }
  bool is_ranged() const { return ranged_; }
  const std::vector<KVKey>& splitters() const { return splitters_; }

  uint32_t operator()(const KVKey& key) const {
    if (!ranged_) return static_cast<uint32_t>(key.hash() % num_partitions_);
    auto it = std::upper_bound(splitters_.begin(), splitters_.end(), key);
    return static_cast<uint32_t>(it - splitters_.begin());
  }

 private:
  uint32_t num_partitions_ = 1;
  bool ranged_ = false;
  std::vector<KVKey> splitters_;
};

// --- session ------------------------------------------------------------------

// Plain-value session descriptor, shareable with worker processes.
struct ShuffleSession {
  uint64_t session_id = 0;
  Scheme scheme = Scheme::sort_merge;
  uint32_t num_maps = 0;
  uint32_t num_reduces = 0;
  GlobalRef registry;          // num_maps rows of (index_ref, generation)
  uint64_t creator_generation = 0;
  PartitionerKind partitioner = PartitionerKind::hash;
  GlobalRef splitters;         // encoded keys, when ranged
  uint32_t splitter_count = 0;
};

namespace detail {

inline std::atomic_ref<uint64_t> registry_index_word(const Pool& pool,
                                                     const ShuffleSession& s,
                                                     uint32_t map_id) {
  auto* row = pool.resolve(GlobalRef{s.registry.offset + map_id * 16ull});
  return std::atomic_ref<uint64_t>(*reinterpret_cast<uint64_t*>(row));
}
inline std::atomic_ref<uint64_t> registry_generation_word(
    const Pool& pool, const ShuffleSession& s, uint32_t map_id) {
  auto* row = pool.resolve(GlobalRef{s.registry.offset + map_id * 16ull + 8});
  return std::atomic_ref<uint64_t>(*reinterpret_cast<uint64_t*>(row));
}

inline constexpr uint64_t kBucketHeaderBytes = 32;
inline constexpr uint64_t kBucketPayloadBytes = 256 * 1024;

struct BucketHeader {
  uint64_t reducer_id;
  uint64_t entry_count;
  uint64_t next;
  uint64_t used_bytes;
};
static_assert(sizeof(BucketHeader) == kBucketHeaderBytes);

}  // namespace detail

inline ShuffleSession create_session(Pool& pool, Heap& heap, Scheme scheme,
                                     uint32_t num_maps, uint32_t num_reduces,
                                     const std::vector<KVKey>* splitters =
                                         nullptr) {
  expect(num_maps >= 1 && num_reduces >= 1, Errc::invalid_argument,
         "a session needs at least one map and one reducer");
  ShuffleSession s;
  s.scheme = scheme;
  s.num_maps = num_maps;
  s.num_reduces = num_reduces;
  s.creator_generation = heap.generation();
  s.registry = heap.allocate(num_maps * 16ull);
  std::memset(pool.resolve(s.registry), 0, num_maps * 16ull);
  if (splitters != nullptr) {
    expect(splitters->size() + 1 == num_reduces, Errc::invalid_argument,
           "range partitioner needs num_reduces - 1 splitters");
    s.partitioner = PartitionerKind::range;
    s.splitter_count = static_cast<uint32_t>(splitters->size());
    if (!splitters->empty()) {
      std::vector<std::byte> buf;
      for (const KVKey& k : *splitters) wire::append_key(buf, k);
      s.splitters = heap.allocate(std::max<uint64_t>(buf.size(), 1));
      std::memcpy(pool.resolve(s.splitters), buf.data(), buf.size());
    }
  }
  s.session_id = s.registry.offset;
  return s;
}

inline LocalPartitioner session_partitioner(const Pool& pool,
                                            const ShuffleSession& s) {
  if (s.partitioner == PartitionerKind::hash) {
    return LocalPartitioner::hashed(s.num_reduces);
  }
  std::vector<KVKey> keys(s.splitter_count);
  if (s.splitter_count > 0) {
    const std::byte* p = pool.resolve(s.splitters);
    for (uint32_t i = 0; i < s.splitter_count; ++i) {
      p = wire::decode_key(p, keys[i]);
    }
  }
  return LocalPartitioner::ranged(s.num_reduces, std::move(keys));
}

// --- map side -----------------------------------------------------------------

// One map task. Records are staged in process-local buffers (recycled via
// BufferPool across tasks), sorted per reducer when the scheme needs it,
// then written to bucket chains and published.
class MapTask {
 public:
  MapTask(Pool& pool, const ShuffleSession& session, Heap& heap,
          uint32_t map_id, std::optional<uint32_t> node_hint = {})
      : pool_(&pool),
        session_(session),
        heap_(&heap),
        map_id_(map_id),
        node_hint_(node_hint),
        partitioner_(session_partitioner(pool, session)) {
    expect(map_id < session.num_maps, Errc::invalid_argument, "map_id range");
    staged_.reserve(session.num_reduces);
    for (uint32_t r = 0; r < session.num_reduces; ++r) {
      staged_.emplace_back(64 * 1024);
    }
    offsets_.resize(session.num_reduces);
    keys_.resize(session.num_reduces);
  }

  void add(const KVKey& key, std::span<const std::byte> value) {
    uint32_t r = partitioner_(key);
    offsets_[r].push_back(static_cast<uint32_t>(staged_[r].bytes().size()));
    if (session_.scheme == Scheme::sort_merge) keys_[r].push_back(key);
    size_t before = staged_[r].bytes().capacity();
    wire::append_record(staged_[r].bytes(), key, value);
    BufferPool::instance().note_growth(before, staged_[r].bytes().capacity());
  }

  void add(const Record& rec) {
    add(rec.key, std::as_bytes(std::span(rec.value.data(), rec.value.size())));
  }

  // Writes all chains and publishes the index bucket. Call exactly once.
  GlobalRef finish() {
    uint64_t index_bytes = 8 + session_.num_reduces * 16ull;
    GlobalRef index_ref = heap_->allocate(index_bytes, node_hint_);
    std::byte* index = pool_->resolve(index_ref);
    store_u64(index, map_id_);

    for (uint32_t r = 0; r < session_.num_reduces; ++r) {
      std::vector<uint32_t> order(offsets_[r].size());
      std::iota(order.begin(), order.end(), 0u);
      if (session_.scheme == Scheme::sort_merge) {
        const auto& keys = keys_[r];
        std::stable_sort(order.begin(), order.end(),
                         [&](uint32_t a, uint32_t b) {
                           return keys[a] < keys[b];
                         });
      }
      auto [first, total] = write_chain(r, order);
      store_u64(index + 8 + r * 16ull, first.offset);
      store_u64(index + 8 + r * 16ull + 8, total);
    }

    // Publish: generation first, the index word is the release flag.
    detail::registry_generation_word(*pool_, session_, map_id_)
        .store(heap_->generation(), std::memory_order_relaxed);
    uint64_t expected = 0;
    if (!detail::registry_index_word(*pool_, session_, map_id_)
             .compare_exchange_strong(expected, index_ref.offset,
                                      std::memory_order_release,
                                      std::memory_order_acquire)) {
      raise(Errc::duplicate_map_write,
            "map " + std::to_string(map_id_) + " already published");
    }
    return index_ref;
  }

 private:
  std::pair<GlobalRef, uint64_t> write_chain(uint32_t reducer,
                                             const std::vector<uint32_t>& order) {
    const std::vector<std::byte>& bytes = staged_[reducer].bytes();
    const std::vector<uint32_t>& offs = offsets_[reducer];
    if (offs.empty()) return {kNullRef, 0};

    GlobalRef first = kNullRef;
    std::byte* cur_header = nullptr;
    std::byte* cur_payload = nullptr;
    uint64_t cur_used = 0;
    uint64_t cur_cap = 0;
    uint64_t cur_entries = 0;

    auto flush = [&]() {
      if (cur_header == nullptr) return;
      auto* h = reinterpret_cast<detail::BucketHeader*>(cur_header);
      h->entry_count = cur_entries;
      h->used_bytes = cur_used;
    };
    auto open_bucket = [&](uint64_t need) {
      uint64_t payload = std::max(detail::kBucketPayloadBytes, need);
      GlobalRef ref =
          heap_->allocate(detail::kBucketHeaderBytes + payload, node_hint_);
      std::byte* base = pool_->resolve(ref);
      auto* h = reinterpret_cast<detail::BucketHeader*>(base);
      h->reducer_id = reducer;
      h->entry_count = 0;
      h->next = 0;
      h->used_bytes = 0;
      if (cur_header != nullptr) {
        flush();
        reinterpret_cast<detail::BucketHeader*>(cur_header)->next = ref.offset;
      } else {
        first = ref;
      }
      cur_header = base;
      cur_payload = base + detail::kBucketHeaderBytes;
      cur_used = 0;
      cur_cap = payload;
      cur_entries = 0;
    };

    for (uint32_t idx : order) {
      uint32_t start = offs[idx];
      uint32_t end = idx + 1 < offs.size() ? offs[idx + 1]
                                           : static_cast<uint32_t>(bytes.size());
      // Ordering may be permuted; recompute the record span from its start.
      if (session_.scheme == Scheme::sort_merge) {
        RecordView v;
        const std::byte* next = wire::decode_record(bytes.data() + start, v);
        end = static_cast<uint32_t>(next - bytes.data());
      }
      uint64_t len = end - start;
      if (cur_header == nullptr || cur_used + len > cur_cap) open_bucket(len);
      std::memcpy(cur_payload + cur_used, bytes.data() + start, len);
      cur_used += len;
      ++cur_entries;
    }
    flush();
    return {first, offs.size()};
  }

  Pool* pool_;
  ShuffleSession session_;
  Heap* heap_;
  uint32_t map_id_;
  std::optional<uint32_t> node_hint_;
  LocalPartitioner partitioner_;
  std::vector<PooledBuffer> staged_;
  std::vector<std::vector<uint32_t>> offsets_;
  std::vector<std::vector<KVKey>> keys_;
};

inline GlobalRef map_write(Pool& pool, const ShuffleSession& session, Heap& heap,
                           uint32_t map_id, std::span<const Record> records,
                           std::optional<uint32_t> node_hint = {}) {
  MapTask task(pool, session, heap, map_id, node_hint);
  for (const Record& r : records) task.add(r);
  return task.finish();
}

// --- reduce side ----------------------------------------------------------------

namespace detail {

// Sequential reader over one map's bucket chain for one reducer.
class ChainCursor {
 public:
  ChainCursor() = default;
  ChainCursor(const Pool& pool, GlobalRef first) : pool_(&pool) {
    enter(first);
    advance();
  }

  bool valid() const { return valid_; }
  const KVKey& key() const { return view_.key; }
  std::span<const std::byte> value() const { return view_.value; }

  void advance() {
    while (bucket_ != nullptr && entry_ == entries_) {
      uint64_t next = reinterpret_cast<const BucketHeader*>(bucket_)->next;
      enter(GlobalRef{next});
    }
    if (bucket_ == nullptr) {
      valid_ = false;
      return;
    }
    pos_ = wire::decode_record(pos_, view_);
    ++entry_;
    valid_ = true;
  }

 private:
  void enter(GlobalRef ref) {
    if (ref.is_null()) {
      bucket_ = nullptr;
      return;
    }
    bucket_ = pool_->resolve(ref);
    const auto* h = reinterpret_cast<const BucketHeader*>(bucket_);
    entries_ = h->entry_count;
    entry_ = 0;
    pos_ = bucket_ + kBucketHeaderBytes;
  }

  const Pool* pool_ = nullptr;
  const std::byte* bucket_ = nullptr;
  const std::byte* pos_ = nullptr;
  uint64_t entries_ = 0;
  uint64_t entry_ = 0;
  RecordView view_;
  bool valid_ = false;
};

// Cursor over an owned record vector (baseline reduce side).
class VecCursor {
 public:
  VecCursor() = default;
  explicit VecCursor(const std::vector<Record>* records) : records_(records) {}

  bool valid() const { return records_ != nullptr && i_ < records_->size(); }
  const KVKey& key() const { return (*records_)[i_].key; }
  std::span<const std::byte> value() const {
    const std::string& v = (*records_)[i_].value;
    return std::as_bytes(std::span(v.data(), v.size()));
  }
  void advance() { ++i_; }

 private:
  const std::vector<Record>* records_ = nullptr;
  size_t i_ = 0;
};

}  // namespace detail

// K-way grouped merge over per-map sorted cursors. Groups equal keys; the
// values of a group arrive ordered by (map_id, intra-map input order).
template <class Cursor>
class MergeStream {
 public:
  explicit MergeStream(std::vector<Cursor> cursors)
      : cursors_(std::move(cursors)) {
    for (uint32_t m = 0; m < cursors_.size(); ++m) {
      if (cursors_[m].valid()) heap_.push_back(m);
    }
    std::make_heap(heap_.begin(), heap_.end(), HeapCmp{this});
  }

  std::optional<Group> next() {
    if (heap_.empty()) return std::nullopt;
    Group g;
    g.key = cursors_[heap_.front()].key();
    // Pop every cursor currently positioned at this key, in map order.
    std::vector<uint32_t> holders;
    while (!heap_.empty() && cursors_[heap_.front()].key() == g.key) {
      std::pop_heap(heap_.begin(), heap_.end(), HeapCmp{this});
      holders.push_back(heap_.back());
      heap_.pop_back();
    }
    std::sort(holders.begin(), holders.end());
    for (uint32_t m : holders) {
      Cursor& c = cursors_[m];
      while (c.valid() && c.key() == g.key) {
        g.values.push_back(c.value());
        c.advance();
      }
      if (c.valid()) {
        heap_.push_back(m);
        std::push_heap(heap_.begin(), heap_.end(), HeapCmp{this});
      }
    }
    return g;
  }

 private:
  struct HeapCmp {
    MergeStream* s;
    // std::*_heap is a max-heap; invert for (key, map_id) ascending.
    bool operator()(uint32_t a, uint32_t b) const {
      const KVKey& ka = s->cursors_[a].key();
      const KVKey& kb = s->cursors_[b].key();
      if (ka < kb) return false;
      if (kb < ka) return true;
      return a > b;
    }
  };

  std::vector<Cursor> cursors_;
  std::vector<uint32_t> heap_;
};

// Concatenation of per-map streams in ascending map order (pass-through).
template <class Cursor>
class ConcatStream {
 public:
  explicit ConcatStream(std::vector<Cursor> cursors)
      : cursors_(std::move(cursors)) {}

  std::optional<RecordView> next() {
    while (m_ < cursors_.size()) {
      if (cursors_[m_].valid()) {
        RecordView v{cursors_[m_].key(), cursors_[m_].value()};
        cursors_[m_].advance();
        return v;
      }
      ++m_;
    }
    return std::nullopt;
  }

 private:
  std::vector<Cursor> cursors_;
  size_t m_ = 0;
};

// Hash-merge: one group per distinct key, in first-seen order (walking maps
// in ascending id). Deterministic for a given input, though callers must
// not rely on any particular key order.
template <class Cursor>
std::vector<Group> hash_merge_groups(std::vector<Cursor> cursors) {
  std::vector<Group> groups;
  std::unordered_map<std::string, size_t> index;
  for (Cursor& c : cursors) {
    while (c.valid()) {
      std::string canon = c.key().canonical();
      auto [it, inserted] = index.emplace(std::move(canon), groups.size());
      if (inserted) {
        groups.push_back(Group{c.key(), {}});
      }
      groups[it->second].values.push_back(c.value());
      c.advance();
    }
  }
  return groups;
}

namespace detail {

inline std::vector<ChainCursor> reducer_cursors(const Pool& pool,
                                                const ShuffleSession& s,
                                                uint32_t reduce_id) {
  expect(reduce_id < s.num_reduces, Errc::bad_reducer_id,
         "reducer " + std::to_string(reduce_id) + " of " +
             std::to_string(s.num_reduces));
  // Stage barrier: every map must have published its index bucket.
  std::vector<uint64_t> index_offsets(s.num_maps);
  for (uint32_t m = 0; m < s.num_maps; ++m) {
    index_offsets[m] =
        registry_index_word(pool, s, m).load(std::memory_order_acquire);
    if (index_offsets[m] == 0) {
      raise(Errc::stage_incomplete,
            "map " + std::to_string(m) + " has not published");
    }
  }
  std::vector<ChainCursor> cursors;
  cursors.reserve(s.num_maps);
  for (uint32_t m = 0; m < s.num_maps; ++m) {
    const std::byte* index = pool.resolve(GlobalRef{index_offsets[m]});
    uint64_t first = load_u64(index + 8 + reduce_id * 16ull);
    cursors.emplace_back(pool, GlobalRef{first});
  }
  return cursors;
}

}  // namespace detail

inline MergeStream<detail::ChainCursor> reduce_read_sorted(
    const Pool& pool, const ShuffleSession& s, uint32_t reduce_id) {
  expect(s.scheme == Scheme::sort_merge, Errc::invalid_argument,
         "session scheme is not sort-merge");
  return MergeStream<detail::ChainCursor>(
      detail::reducer_cursors(pool, s, reduce_id));
}

inline std::vector<Group> reduce_read_hashed(const Pool& pool,
                                             const ShuffleSession& s,
                                             uint32_t reduce_id) {
  expect(s.scheme == Scheme::hash_merge, Errc::invalid_argument,
         "session scheme is not hash-merge");
  return hash_merge_groups(detail::reducer_cursors(pool, s, reduce_id));
}

inline ConcatStream<detail::ChainCursor> reduce_read_pass(
    const Pool& pool, const ShuffleSession& s, uint32_t reduce_id) {
  expect(s.scheme == Scheme::pass_through, Errc::invalid_argument,
         "session scheme is not pass-through");
  return ConcatStream<detail::ChainCursor>(
      detail::reducer_cursors(pool, s, reduce_id));
}

// Per-reducer entry total from the published index buckets.
inline uint64_t reducer_entry_count(const Pool& pool, const ShuffleSession& s,
                                    uint32_t reduce_id) {
  uint64_t total = 0;
  for (uint32_t m = 0; m < s.num_maps; ++m) {
    uint64_t off =
        detail::registry_index_word(pool, s, m).load(std::memory_order_acquire);
    expect(off != 0, Errc::stage_incomplete, "unpublished map");
    const std::byte* index = pool.resolve(GlobalRef{off});
    total += load_u64(index + 8 + reduce_id * 16ull + 8);
  }
  return total;
}

// Frees every bucket written for the session: all writer heaps plus the
// session creator's heap die together, registry rows zeroed first so a
// straggling reduce_read sees StageIncomplete rather than dangling refs.
inline void release_session(Pool& pool, ShuffleSession& session) {
  if (session.registry.is_null()) return;  // already released
  std::vector<uint64_t> generations;
  for (uint32_t m = 0; m < session.num_maps; ++m) {
    uint64_t gen = detail::registry_generation_word(pool, session, m)
                       .load(std::memory_order_acquire);
    if (gen != 0) generations.push_back(gen);
    detail::registry_generation_word(pool, session, m).store(0);
    detail::registry_index_word(pool, session, m)
        .store(0, std::memory_order_release);
  }
  generations.push_back(session.creator_generation);
  std::sort(generations.begin(), generations.end());
  generations.erase(std::unique(generations.begin(), generations.end()),
                    generations.end());
  for (uint64_t gen : generations) destroy_heap(pool, gen);
  session.registry = kNullRef;
}

// --- serialized-copy baseline ----------------------------------------------------

// Models the path the shared-memory engine replaces: every record is
// serialized into a per-(map, reduce) byte stream, copied through an
// in-process pipe, and deserialized into fresh owned records on the reduce
// side before merging.
class BaselineShuffle {
 public:
  BaselineShuffle(Scheme scheme, uint32_t num_maps, uint32_t num_reduces,
                  LocalPartitioner partitioner)
      : scheme_(scheme),
        num_maps_(num_maps),
        num_reduces_(num_reduces),
        partitioner_(std::move(partitioner)),
        sent_(num_maps),
        received_(num_reduces) {
    expect(num_maps >= 1 && num_reduces >= 1, Errc::invalid_argument,
           "a session needs at least one map and one reducer");
    for (auto& v : sent_) v.resize(num_reduces);
  }

  class MapTask {
   public:
    MapTask(BaselineShuffle& owner, uint32_t map_id)
        : owner_(&owner), map_id_(map_id) {
      staged_.reserve(owner.num_reduces_);
      for (uint32_t r = 0; r < owner.num_reduces_; ++r) {
        staged_.emplace_back(64 * 1024);
      }
      keys_.resize(owner.num_reduces_);
      offsets_.resize(owner.num_reduces_);
    }

    void add(const KVKey& key, std::span<const std::byte> value) {
      uint32_t r = owner_->partitioner_(key);
      offsets_[r].push_back(static_cast<uint32_t>(staged_[r].bytes().size()));
      if (owner_->scheme_ == Scheme::sort_merge) keys_[r].push_back(key);
      size_t before = staged_[r].bytes().capacity();
      wire::append_record(staged_[r].bytes(), key, value);
      BufferPool::instance().note_growth(before, staged_[r].bytes().capacity());
    }
    void add(const Record& rec) {
      add(rec.key,
          std::as_bytes(std::span(rec.value.data(), rec.value.size())));
    }

    void finish() {
      for (uint32_t r = 0; r < owner_->num_reduces_; ++r) {
        std::vector<std::byte>& out = owner_->sent_[map_id_][r];
        const std::vector<std::byte>& bytes = staged_[r].bytes();
        if (owner_->scheme_ != Scheme::sort_merge) {
          out = bytes;
          continue;
        }
        std::vector<uint32_t> order(offsets_[r].size());
        std::iota(order.begin(), order.end(), 0u);
        std::stable_sort(order.begin(), order.end(),
                         [&](uint32_t a, uint32_t b) {
                           return keys_[r][a] < keys_[r][b];
                         });
        out.reserve(bytes.size());
        for (uint32_t idx : order) {
          RecordView v;
          const std::byte* start = bytes.data() + offsets_[r][idx];
          const std::byte* end = wire::decode_record(start, v);
          out.insert(out.end(), start, end);
        }
      }
    }

   private:
    BaselineShuffle* owner_;
    uint32_t map_id_;
    std::vector<PooledBuffer> staged_;
    std::vector<std::vector<KVKey>> keys_;
    std::vector<std::vector<uint32_t>> offsets_;
  };

  MapTask map_task(uint32_t map_id) { return MapTask(*this, map_id); }

  void map_write(uint32_t map_id, std::span<const Record> records) {
    MapTask t = map_task(map_id);
    for (const Record& r : records) t.add(r);
    t.finish();
  }

  MergeStream<detail::VecCursor> sorted_stream(uint32_t reduce_id) {
    expect(scheme_ == Scheme::sort_merge, Errc::invalid_argument, "scheme");
    return MergeStream<detail::VecCursor>(cursors(reduce_id));
  }
  std::vector<Group> hashed_groups(uint32_t reduce_id) {
    expect(scheme_ == Scheme::hash_merge, Errc::invalid_argument, "scheme");
    return hash_merge_groups(cursors(reduce_id));
  }
  ConcatStream<detail::VecCursor> pass_stream(uint32_t reduce_id) {
    expect(scheme_ == Scheme::pass_through, Errc::invalid_argument, "scheme");
    return ConcatStream<detail::VecCursor>(cursors(reduce_id));
  }

 private:
  std::vector<detail::VecCursor> cursors(uint32_t reduce_id) {
    expect(reduce_id < num_reduces_, Errc::bad_reducer_id, "reducer id");
    deliver(reduce_id);
    std::vector<detail::VecCursor> out;
    out.reserve(num_maps_);
    for (uint32_t m = 0; m < num_maps_; ++m) {
      out.emplace_back(&received_[reduce_id][m]);
    }
    return out;
  }

  // Pump each map's serialized stream through a pipe, then deserialize.
  void deliver(uint32_t reduce_id) {
    if (!received_[reduce_id].empty()) return;
    received_[reduce_id].resize(num_maps_);
    for (uint32_t m = 0; m < num_maps_; ++m) {
      std::vector<std::byte> wire_copy;
      pipe_copy(sent_[m][reduce_id], wire_copy);
      std::vector<Record>& records = received_[reduce_id][m];
      const std::byte* p = wire_copy.data();
      const std::byte* end = p + wire_copy.size();
      while (p < end) {
        RecordView v;
        p = wire::decode_record(p, v);
        records.push_back(
            Record{v.key, std::string(reinterpret_cast<const char*>(
                                          v.value.data()),
                                      v.value.size())});
      }
    }
  }

  static void pipe_copy(const std::vector<std::byte>& src,
                        std::vector<std::byte>& dst) {
    dst.clear();
    dst.reserve(src.size());
    if (src.empty()) return;
    int fds[2];
    expect(::pipe(fds) == 0, Errc::io_failure, "pipe");
    constexpr size_t kChunk = 32 * 1024;  // stays under pipe capacity
    std::byte tmp[kChunk];
    size_t off = 0;
    while (off < src.size()) {
      size_t n = std::min(kChunk, src.size() - off);
      ssize_t w = ::write(fds[1], src.data() + off, n);
      expect(w == static_cast<ssize_t>(n), Errc::io_failure, "pipe write");
      size_t got = 0;
      while (got < n) {
        ssize_t r = ::read(fds[0], tmp + got, n - got);
        expect(r > 0, Errc::io_failure, "pipe read");
        got += static_cast<size_t>(r);
      }
      dst.insert(dst.end(), tmp, tmp + n);
      off += n;
    }
    ::close(fds[0]);
    ::close(fds[1]);
  }

  Scheme scheme_;
  uint32_t num_maps_;
  uint32_t num_reduces_;
  LocalPartitioner partitioner_;
  std::vector<std::vector<std::vector<std::byte>>> sent_;
  std::vector<std::vector<std::vector<Record>>> received_;
};

// Samples roughly 1% of the input (at least num_partitions samples) and
// picks evenly spaced splitters for a range partitioner.
inline std::vector<KVKey> sample_splitters(std::span<const Record> records,
                                           uint32_t num_partitions) {
  if (num_partitions <= 1) return {};
  size_t step = std::max<size_t>(1, records.size() / 100);
  std::vector<KVKey> sample;
  for (size_t i = 0; i < records.size(); i += step) {
    sample.push_back(records[i].key);
  }
  if (sample.empty()) sample.push_back(KVKey(int64_t{0}));
  std::sort(sample.begin(), sample.end());
  std::vector<KVKey> splitters;
  for (uint32_t r = 1; r < num_partitions; ++r) {
    size_t idx = r * sample.size() / num_partitions;
    splitters.push_back(sample[std::min(idx, sample.size() - 1)]);
  }
  return splitters;
}

}  // namespace sharkle
