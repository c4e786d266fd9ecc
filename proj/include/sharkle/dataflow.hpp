// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <linux/futex.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <climits>
#include <cstdio>
#include <functional>
#include <optional>
#include <thread>
#include <unordered_map>

#include "sharkle/checkpoint.hpp"
#include "sharkle/shuffle.hpp"
#include "sharkle/store.hpp"

namespace sharkle {

// Minimal BSP runner. A job launches W workers (OS processes sharing the
// pool by default, threads as a fallback) that all execute the same
// program in lockstep; the only cross-worker channels are the shuffle
// engine, the off-heap store, and a small coordination block of pool words
// (barrier, broadcast slots, per-worker and per-partition exchange slots).
// Partition p is owned by worker p mod W for the whole job, so datasets
// can stay worker-local between stages.

enum class Engine : uint8_t { shared_memory = 0, baseline = 1 };

struct JobConfig {
  uint32_t workers = 1;
  uint32_t partitions = 1;
  bool use_threads = false;
  Engine engine = Engine::shared_memory;
  uint64_t seed = 1;
};

namespace detail {

// Futex on a 32-bit cell inside the shared mapping; works across the
// processes mapping the pool (no FUTEX_PRIVATE_FLAG).
inline void futex_wait(uint32_t* addr, uint32_t expected) {
  timespec ts{0, 50'000'000};  // bounded: revalidate every 50 ms
  ::syscall(SYS_futex, addr, FUTEX_WAIT, expected, &ts, nullptr, 0);
}
inline void futex_wake_all(uint32_t* addr) {
  ::syscall(SYS_futex, addr, FUTEX_WAKE, INT_MAX, nullptr, nullptr, 0);
}

// Coordination block: all fields are u64 words in pool memory.
//   [0] barrier arrived   [1] barrier generation   [2] abort flag
//   [3] session ready     [4..13) session descriptor bytes (<= 80)
//   then 4 broadcast slots, W worker slots, W aux worker slots,
//   P partition slots.
struct CoordLayout {
  uint32_t workers;
  uint32_t partitions;

  static constexpr uint64_t kSessionWords = 10;
  uint64_t words() const {
    return 4 + kSessionWords + 4 + 2ull * workers + partitions;
  }
  uint64_t broadcast_off() const { return 4 + kSessionWords; }
  uint64_t worker_off() const { return broadcast_off() + 4; }
  uint64_t aux_off() const { return worker_off() + workers; }
  uint64_t partition_off() const { return aux_off() + workers; }
};
static_assert(sizeof(ShuffleSession) <= CoordLayout::kSessionWords * 8);

}  // namespace detail

class WorkerContext {
 public:
  WorkerContext(Pool& pool, const JobConfig& cfg, uint32_t worker_id,
                GlobalRef coord)
      : pool_(&pool),
        cfg_(cfg),
        worker_id_(worker_id),
        layout_{cfg.workers, cfg.partitions},
        coord_(reinterpret_cast<uint64_t*>(pool.resolve(coord))) {}

  Pool& pool() const { return *pool_; }
  uint32_t worker_id() const { return worker_id_; }
  uint32_t workers() const { return cfg_.workers; }
  uint32_t partitions() const { return cfg_.partitions; }
  Engine engine() const { return cfg_.engine; }
  uint64_t seed() const { return cfg_.seed; }

  bool owns(uint32_t pid) const { return pid % cfg_.workers == worker_id_; }
  std::vector<uint32_t> owned_partitions() const {
    std::vector<uint32_t> out;
    for (uint32_t p = worker_id_; p < cfg_.partitions; p += cfg_.workers) {
      out.push_back(p);
    }
    return out;
  }

  // Long-lived per-worker heap (store partitions, samples); survives the
  // job so the driver can read results, reclaimed with the pool.
  Heap& scratch_heap() {
    if (!scratch_) scratch_.emplace(*pool_);
    return *scratch_;
  }

  void abort_job() {
    word(2).store(1, std::memory_order_release);
    detail::futex_wake_all(generation_cell());
  }

  // Central sense barrier. Waiters block on a futex over the generation
  // cell, so an oversubscribed host pays wakeup latency, not polling.
  void barrier() {
    auto arrived = word(0);
    auto generation = std::atomic_ref<uint32_t>(*generation_cell());
    uint32_t gen = generation.load(std::memory_order_acquire);
    if (arrived.fetch_add(1, std::memory_order_acq_rel) + 1 == cfg_.workers) {
      arrived.store(0, std::memory_order_relaxed);
      generation.fetch_add(1, std::memory_order_release);
      detail::futex_wake_all(generation_cell());
      return;
    }
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::seconds(600);
    while (generation.load(std::memory_order_acquire) == gen) {
      if (word(2).load(std::memory_order_acquire) != 0) {
        raise(Errc::io_failure, "job aborted by another worker");
      }
      detail::futex_wait(generation_cell(), gen);
      if (std::chrono::steady_clock::now() > deadline) {
        raise(Errc::io_failure, "barrier timeout");
      }
    }
  }

  // --- broadcast / exchange slots (write, barrier, read) -------------------

  void put_broadcast(uint32_t slot, uint64_t value) {
    word(layout_.broadcast_off() + slot).store(value, std::memory_order_release);
  }
  uint64_t get_broadcast(uint32_t slot) const {
    return word(layout_.broadcast_off() + slot).load(std::memory_order_acquire);
  }

  void put_worker_slot(uint64_t value, bool aux = false) {
    uint64_t off = aux ? layout_.aux_off() : layout_.worker_off();
    word(off + worker_id_).store(value, std::memory_order_release);
  }
  uint64_t get_worker_slot(uint32_t w, bool aux = false) const {
    uint64_t off = aux ? layout_.aux_off() : layout_.worker_off();
    return word(off + w).load(std::memory_order_acquire);
  }

  void put_partition_slot(uint32_t pid, uint64_t value) {
    word(layout_.partition_off() + pid).store(value, std::memory_order_release);
  }
  uint64_t get_partition_slot(uint32_t pid) const {
    return word(layout_.partition_off() + pid).load(std::memory_order_acquire);
  }

  // --- synchronized reductions ---------------------------------------------
  // Deterministic: combined in worker order (max is exact; per-partition
  // sums should go through partition slots when bitwise stability across
  // different worker counts matters).

  double all_max(double x) {
    put_worker_slot(std::bit_cast<uint64_t>(x));
    barrier();
    double m = -std::numeric_limits<double>::infinity();
    for (uint32_t w = 0; w < cfg_.workers; ++w) {
      m = std::max(m, std::bit_cast<double>(get_worker_slot(w)));
    }
    barrier();
    return m;
  }

  double all_sum(double x) {
    put_worker_slot(std::bit_cast<uint64_t>(x));
    barrier();
    double s = 0;
    for (uint32_t w = 0; w < cfg_.workers; ++w) {
      s += std::bit_cast<double>(get_worker_slot(w));
    }
    barrier();
    return s;
  }

  uint64_t all_sum_u64(uint64_t x) {
    put_worker_slot(x);
    barrier();
    uint64_t s = 0;
    for (uint32_t w = 0; w < cfg_.workers; ++w) s += get_worker_slot(w);
    barrier();
    return s;
  }

  // Per-partition doubles exchanged through partition slots; every worker
  // returns the same pid-ordered sum regardless of the worker count.
  double exchange_sum_by_partition(
      const std::vector<std::pair<uint32_t, double>>& mine) {
    for (auto [pid, v] : mine) {
      put_partition_slot(pid, std::bit_cast<uint64_t>(v));
    }
    barrier();
    double s = 0;
    for (uint32_t p = 0; p < cfg_.partitions; ++p) {
      s += std::bit_cast<double>(get_partition_slot(p));
    }
    barrier();
    return s;
  }

  // --- session lifecycle ------------------------------------------------------

  ShuffleSession begin_session(Scheme scheme, uint32_t num_maps,
                               uint32_t num_reduces,
                               const std::vector<KVKey>* splitters = nullptr) {
    if (worker_id_ == 0) {
      Heap creator(*pool_);  // generation outlives the object; freed on release
      ShuffleSession s =
          create_session(*pool_, creator, scheme, num_maps, num_reduces,
                         splitters);
      std::memcpy(static_cast<void*>(coord_ + 4), static_cast<const void*>(&s), sizeof(s));
      word(3).store(1, std::memory_order_release);
    }
    barrier();
    ShuffleSession s;
    std::memcpy(static_cast<void*>(&s), static_cast<const void*>(coord_ + 4), sizeof(s));
    return s;
  }

  // Barrier, then worker 0 releases every heap the session used.
  void end_session(ShuffleSession& s) {
    barrier();
    if (worker_id_ == 0) release_session(*pool_, s);
    barrier();
  }

 private:
  std::atomic_ref<uint64_t> word(uint64_t i) const {
    return std::atomic_ref<uint64_t>(coord_[i]);
  }
  // Low half of coord word 1; futex cells must be 32-bit.
  uint32_t* generation_cell() const {
    return reinterpret_cast<uint32_t*>(coord_ + 1);
  }

  Pool* pool_;
  JobConfig cfg_;
  uint32_t worker_id_;
  detail::CoordLayout layout_;
  uint64_t* coord_;
  std::optional<Heap> scratch_;
};

struct JobOutput {
  double elapsed_ms = 0;
  std::array<uint64_t, 4> broadcasts{};  // slot 0 = result digest by convention
  uint64_t result_checksum = 0;
  uint64_t peak_pool_bytes = 0;
};

using JobProgram = std::function<void(WorkerContext&)>;

inline JobOutput run_job(Pool& pool, const JobConfig& cfg,
                         const JobProgram& program) {
  expect(cfg.workers >= 1 && cfg.partitions >= cfg.workers,
         Errc::invalid_config, "need partitions >= workers >= 1");
  expect(cfg.engine == Engine::shared_memory || cfg.workers == 1,
         Errc::invalid_config, "the baseline engine runs single-worker");

  Heap coord_heap(pool);
  detail::CoordLayout layout{cfg.workers, cfg.partitions};
  GlobalRef coord = coord_heap.allocate(layout.words() * 8);
  std::memset(pool.resolve(coord), 0, layout.words() * 8);

  auto start = std::chrono::steady_clock::now();
  JobOutput out;

  if (cfg.use_threads) {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(cfg.workers);
    for (uint32_t w = 0; w < cfg.workers; ++w) {
      threads.emplace_back([&, w]() {
        WorkerContext ctx(pool, cfg, w, coord);
        try {
          program(ctx);
        } catch (...) {
          errors[w] = std::current_exception();
          ctx.abort_job();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    std::vector<pid_t> kids;
    for (uint32_t w = 0; w < cfg.workers; ++w) {
      pid_t pid = ::fork();
      expect(pid >= 0, Errc::io_failure, "fork failed");
      if (pid == 0) {
        // Workers die with the driver.
        ::prctl(PR_SET_PDEATHSIG, SIGKILL);
        WorkerContext ctx(pool, cfg, w, coord);
        try {
          program(ctx);
          ::_exit(0);
        } catch (const std::exception& e) {
          std::fprintf(stderr, "worker %u failed: %s\n", w, e.what());
          ctx.abort_job();
          ::_exit(2);
        } catch (...) {
          ctx.abort_job();
          ::_exit(2);
        }
      }
      kids.push_back(pid);
    }
    bool failed = false;
    for (pid_t pid : kids) {
      int status = 0;
      ::waitpid(pid, &status, 0);
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
    }
    if (failed) {
      raise(Errc::io_failure, "one or more workers failed");
    }
  }

  out.elapsed_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - start)
                       .count();
  for (uint32_t i = 0; i < 4; ++i) {
    out.broadcasts[i] =
        load_u64(pool.resolve(coord) + (layout.broadcast_off() + i) * 8);
  }
  out.result_checksum = out.broadcasts[0];
  out.peak_pool_bytes = pool.peak_live_bytes();
  destroy_heap(pool, coord_heap.generation());
  return out;
}

// --- datasets and operators -------------------------------------------------------

// A worker's view of a partitioned dataset: only owned partitions are
// materialized, in this worker's memory.
struct Dataset {
  uint32_t num_partitions = 0;
  std::unordered_map<uint32_t, std::vector<Record>> owned;

  std::vector<Record>& partition(uint32_t pid) { return owned[pid]; }
};

using KeyFn = std::function<KVKey(const Record&)>;

inline KVKey record_key(const Record& r) { return r.key; }

// Order-insensitive per-partition digest; equal multisets give equal sums.
inline uint64_t partition_digest(const std::vector<Record>& records) {
  uint64_t sum = 0;
  for (const Record& r : records) {
    std::string canon = r.key.canonical();
    uint64_t h = fnv1a64(canon.data(), canon.size());
    h = fnv1a64(r.value.data(), r.value.size(), h);
    sum += h;
  }
  return sum;
}

// Combines per-partition digests in partition order into one job digest and
// stores it in broadcast slot 0; every worker returns the same value.
inline uint64_t publish_dataset_checksum(WorkerContext& ctx, const Dataset& ds) {
  for (auto& [pid, records] : ds.owned) {
    ctx.put_partition_slot(pid, partition_digest(records));
  }
  ctx.barrier();
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint32_t p = 0; p < ctx.partitions(); ++p) {
    uint64_t d = ctx.get_partition_slot(p);
    h = fnv1a64(&d, 8, h);
  }
  if (ctx.worker_id() == 0) ctx.put_broadcast(0, h);
  ctx.barrier();
  return h;
}

namespace detail {

// Shared/baseline switch for one all-to-all exchange. Map side feeds
// per-partition record streams keyed by key_fn; reduce side consumes
// scheme-shaped results per owned output partition.
template <typename MapFeed, typename ReduceConsume>
void exchange(WorkerContext& ctx, Scheme scheme, uint32_t num_maps,
              uint32_t num_reduces, const std::vector<KVKey>* splitters,
              MapFeed&& feed, ReduceConsume&& consume) {
  if (ctx.engine() == Engine::baseline) {
    LocalPartitioner part =
        splitters != nullptr
            ? LocalPartitioner::ranged(num_reduces, *splitters)
            : LocalPartitioner::hashed(num_reduces);
    BaselineShuffle shuffle(scheme, num_maps, num_reduces, part);
    for (uint32_t m = 0; m < num_maps; ++m) {
      auto task = shuffle.map_task(m);
      feed(m, [&](const KVKey& k, std::span<const std::byte> v) {
        task.add(k, v);
      });
      task.finish();
    }
    for (uint32_t r = 0; r < num_reduces; ++r) {
      consume(r, shuffle, true);
    }
    return;
  }

  ShuffleSession s = ctx.begin_session(scheme, num_maps, num_reduces, splitters);
  {
    Heap writer(ctx.pool());
    for (uint32_t m = 0; m < num_maps; ++m) {
      if (!ctx.owns(m)) continue;
      MapTask task(ctx.pool(), s, writer, m);
      feed(m, [&](const KVKey& k, std::span<const std::byte> v) {
        task.add(k, v);
      });
      task.finish();
    }
  }
  ctx.barrier();  // map stage complete
  for (uint32_t r = 0; r < num_reduces; ++r) {
    if (!ctx.owns(r)) continue;
    consume(r, s, false);
  }
  ctx.end_session(s);
}

inline std::span<const std::byte> value_bytes(const Record& r) {
  return std::as_bytes(std::span(r.value.data(), r.value.size()));
}

}  // namespace detail

// Fold signature for reduce_by: deterministic left fold over a key group's
// values in (map, input-order) sequence.
using FoldFn =
    std::function<std::string(const KVKey&,
                              const std::vector<std::span<const std::byte>>&)>;

inline Dataset reduce_by(WorkerContext& ctx, const Dataset& in,
                         const FoldFn& fold, const KeyFn& key_fn = record_key) {
  uint32_t P = in.num_partitions;
  Dataset out;
  out.num_partitions = P;
  auto feed = [&](uint32_t m, auto&& add) {
    auto it = in.owned.find(m);
    if (it == in.owned.end()) return;
    for (const Record& r : it->second) add(key_fn(r), detail::value_bytes(r));
  };
  auto consume = [&](uint32_t r, auto& source, bool is_baseline) {
    std::vector<Group> groups;
    if constexpr (std::is_same_v<std::decay_t<decltype(source)>,
                                 BaselineShuffle>) {
      groups = source.hashed_groups(r);
    } else {
      groups = reduce_read_hashed(ctx.pool(), source, r);
    }
    (void)is_baseline;
    auto& dest = out.owned[r];
    dest.reserve(groups.size());
    for (Group& g : groups) {
      dest.push_back(Record{g.key, fold(g.key, g.values)});
    }
  };
  detail::exchange(ctx, Scheme::hash_merge, P, P, nullptr, feed, consume);
  return out;
}

// group_by packs each key's values as count u32 + (len u32 + bytes) each.
inline Dataset group_by(WorkerContext& ctx, const Dataset& in,
                        const KeyFn& key_fn = record_key) {
  return reduce_by(
      ctx, in,
      [](const KVKey&, const std::vector<std::span<const std::byte>>& values) {
        std::string packed;
        uint32_t n = static_cast<uint32_t>(values.size());
        packed.append(reinterpret_cast<const char*>(&n), 4);
        for (auto v : values) {
          uint32_t len = static_cast<uint32_t>(v.size());
          packed.append(reinterpret_cast<const char*>(&len), 4);
          packed.append(reinterpret_cast<const char*>(v.data()), v.size());
        }
        return packed;
      },
      key_fn);
}

inline Dataset partition_by(WorkerContext& ctx, const Dataset& in,
                            const KeyFn& key_fn = record_key) {
  uint32_t P = in.num_partitions;
  Dataset out;
  out.num_partitions = P;
  auto feed = [&](uint32_t m, auto&& add) {
    auto it = in.owned.find(m);
    if (it == in.owned.end()) return;
    for (const Record& r : it->second) add(key_fn(r), detail::value_bytes(r));
  };
  auto consume = [&](uint32_t r, auto& source, bool) {
    auto& dest = out.owned[r];
    auto drain = [&](auto stream) {
      while (auto rec = stream.next()) {
        dest.push_back(Record{rec->key,
                              std::string(reinterpret_cast<const char*>(
                                              rec->value.data()),
                                          rec->value.size())});
      }
    };
    if constexpr (std::is_same_v<std::decay_t<decltype(source)>,
                                 BaselineShuffle>) {
      drain(source.pass_stream(r));
    } else {
      drain(reduce_read_pass(ctx.pool(), source, r));
    }
  };
  detail::exchange(ctx, Scheme::pass_through, P, P, nullptr, feed, consume);
  return out;
}

// Samples splitters across all workers, then range-partitions and merges.
// Output partition r holds its key range in sorted order; concatenating
// partitions 0..P-1 is a total sort.
inline Dataset sort_by(WorkerContext& ctx, const Dataset& in,
                       const KeyFn& key_fn = record_key) {
  uint32_t P = in.num_partitions;

  // Sample ~1% of owned records, publish through the pool, and let worker 0
  // pick the splitters all maps will share.
  std::vector<KVKey> sample;
  for (auto& [pid, records] : in.owned) {
    size_t step = std::max<size_t>(1, records.size() / 100);
    for (size_t i = 0; i < records.size(); i += step) {
      sample.push_back(key_fn(records[i]));
    }
  }
  std::vector<std::byte> encoded;
  uint64_t count = sample.size();
  for (const KVKey& k : sample) wire::append_key(encoded, k);
  GlobalRef mine = ctx.scratch_heap().allocate(
      std::max<uint64_t>(encoded.size(), 1));
  std::memcpy(ctx.pool().resolve(mine), encoded.data(), encoded.size());
  ctx.put_worker_slot(mine.offset);
  ctx.put_worker_slot(count, true);
  ctx.barrier();

  std::vector<KVKey> splitters;
  {
    std::vector<KVKey> all;
    for (uint32_t w = 0; w < ctx.workers(); ++w) {
      uint64_t off = ctx.get_worker_slot(w);
      uint64_t n = ctx.get_worker_slot(w, true);
      const std::byte* p = n > 0 ? ctx.pool().resolve(GlobalRef{off}) : nullptr;
      for (uint64_t i = 0; i < n; ++i) {
        KVKey k;
        p = wire::decode_key(p, k);
        all.push_back(std::move(k));
      }
    }
    std::sort(all.begin(), all.end());
    if (all.empty()) all.push_back(KVKey(int64_t{0}));
    for (uint32_t r = 1; r < P; ++r) {
      size_t idx = static_cast<size_t>(r) * all.size() / P;
      splitters.push_back(all[std::min(idx, all.size() - 1)]);
    }
  }
  ctx.barrier();

  Dataset out;
  out.num_partitions = P;
  auto feed = [&](uint32_t m, auto&& add) {
    auto it = in.owned.find(m);
    if (it == in.owned.end()) return;
    for (const Record& r : it->second) add(key_fn(r), detail::value_bytes(r));
  };
  auto consume = [&](uint32_t r, auto& source, bool) {
    auto& dest = out.owned[r];
    auto drain = [&](auto stream) {
      while (auto g = stream.next()) {
        for (auto v : g->values) {
          dest.push_back(Record{g->key,
                                std::string(reinterpret_cast<const char*>(
                                                v.data()),
                                            v.size())});
        }
      }
    };
    if constexpr (std::is_same_v<std::decay_t<decltype(source)>,
                                 BaselineShuffle>) {
      drain(source.sorted_stream(r));
    } else {
      drain(reduce_read_sorted(ctx.pool(), source, r));
    }
  };
  detail::exchange(ctx, Scheme::sort_merge, P, P, &splitters, feed, consume);
  return out;
}

// Inner hash join: output value = left len u32 + left bytes + right len u32
// + right bytes, one record per (left, right) pair of a key.
inline Dataset join(WorkerContext& ctx, const Dataset& left,
                    const Dataset& right) {
  expect(left.num_partitions == right.num_partitions, Errc::invalid_argument,
         "join inputs must share a partition count");
  uint32_t P = left.num_partitions;
  Dataset out;
  out.num_partitions = P;
  auto feed = [&](uint32_t m, auto&& add) {
    // Left records tagged 0, right tagged 1; tags survive the shuffle in
    // the value prefix.
    std::string tagged;
    auto emit = [&](const Record& r, char tag) {
      tagged.clear();
      tagged.push_back(tag);
      tagged.append(r.value);
      add(r.key, std::as_bytes(std::span(tagged.data(), tagged.size())));
    };
    if (auto it = left.owned.find(m); it != left.owned.end()) {
      for (const Record& r : it->second) emit(r, 0);
    }
    if (auto it = right.owned.find(m); it != right.owned.end()) {
      for (const Record& r : it->second) emit(r, 1);
    }
  };
  auto consume = [&](uint32_t r, auto& source, bool) {
    std::vector<Group> groups;
    if constexpr (std::is_same_v<std::decay_t<decltype(source)>,
                                 BaselineShuffle>) {
      groups = source.hashed_groups(r);
    } else {
      groups = reduce_read_hashed(ctx.pool(), source, r);
    }
    auto& dest = out.owned[r];
    for (Group& g : groups) {
      std::vector<std::span<const std::byte>> lhs, rhs;
      for (auto v : g.values) {
        if (v.empty()) continue;
        if (v[0] == std::byte{0}) {
          lhs.push_back(v.subspan(1));
        } else {
          rhs.push_back(v.subspan(1));
        }
      }
      for (auto l : lhs) {
        for (auto q : rhs) {
          std::string packed;
          uint32_t ll = static_cast<uint32_t>(l.size());
          uint32_t rl = static_cast<uint32_t>(q.size());
          packed.append(reinterpret_cast<const char*>(&ll), 4);
          packed.append(reinterpret_cast<const char*>(l.data()), l.size());
          packed.append(reinterpret_cast<const char*>(&rl), 4);
          packed.append(reinterpret_cast<const char*>(q.data()), q.size());
          dest.push_back(Record{g.key, std::move(packed)});
        }
      }
    }
  };
  detail::exchange(ctx, Scheme::hash_merge, P, P, nullptr, feed, consume);
  return out;
}

}  // namespace sharkle
