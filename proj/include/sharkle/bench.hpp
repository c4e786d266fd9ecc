// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iomanip>
#include <sstream>

#include "sharkle/graph.hpp"

namespace sharkle::bench {

// Benchmark drivers shared by the CLI and the acceptance suite. Every run
// creates a fresh pool file, runs the workload under one engine, and emits
// one CSV row:
//   workload,engine,workers,partitions,input_size,elapsed_ms,
//   peak_pool_bytes,result_checksum
// input_size is pairs for micro/sort, vertices for pagerank, edges for bp.

struct CsvRow {
  std::string workload;
  std::string engine;
  uint32_t workers = 0;
  uint32_t partitions = 0;
  uint64_t input_size = 0;
  double elapsed_ms = 0;
  uint64_t peak_pool_bytes = 0;
  uint64_t result_checksum = 0;
};

inline std::string csv_header() {
  return "workload,engine,workers,partitions,input_size,elapsed_ms,"
         "peak_pool_bytes,result_checksum";
}

inline std::string to_csv(const CsvRow& r) {
  std::ostringstream out;
  out << r.workload << ',' << r.engine << ',' << r.workers << ','
      << r.partitions << ',' << r.input_size << ',' << std::fixed
      << std::setprecision(3) << r.elapsed_ms << ',' << r.peak_pool_bytes << ','
      << r.result_checksum;
  return out.str();
}

inline const char* engine_name(Engine e) {
  return e == Engine::shared_memory ? "shared" : "baseline";
}

struct RunSpec {
  std::filesystem::path pool_dir = "/dev/shm";
  uint32_t workers = 2;
  uint32_t partitions = 4;
  bool use_threads = false;
  uint64_t seed = 1;
  uint64_t zone_size = 8 << 20;
  uint64_t zone_count = 256;
};

namespace detail {

struct ScopedPool {
  std::filesystem::path path;
  Pool pool;

  ScopedPool(const RunSpec& spec, const std::string& tag) {
    static std::atomic<uint64_t> counter{0};
    path = spec.pool_dir / ("sharkle." + tag + "." + std::to_string(::getpid()) +
                            "." + std::to_string(counter.fetch_add(1)) +
                            ".pool");
    std::filesystem::remove(path);
    PoolConfig cfg;
    cfg.path = path;
    cfg.zone_size = spec.zone_size;
    cfg.zone_count = spec.zone_count;
    pool = create_pool(cfg);
  }
  ~ScopedPool() {
    std::error_code ec;
    std::filesystem::remove(path, ec);
  }
};

inline JobConfig job_for(const RunSpec& spec, Engine engine) {
  JobConfig jc;
  jc.engine = engine;
  jc.workers = engine == Engine::baseline ? 1 : spec.workers;
  jc.partitions = spec.partitions;
  // The baseline is the in-process serialized path.
  jc.use_threads = engine == Engine::baseline ? true : spec.use_threads;
  jc.seed = spec.seed;
  return jc;
}

inline Dataset gen_pairs(WorkerContext& ctx, uint64_t total_pairs) {
  Dataset ds;
  ds.num_partitions = ctx.partitions();
  uint64_t per_part = total_pairs / ctx.partitions();
  for (uint32_t pid : ctx.owned_partitions()) {
    std::mt19937_64 rng(ctx.seed() * 0x9e3779b9ull + pid);
    auto& records = ds.partition(pid);
    records.reserve(per_part);
    for (uint64_t i = 0; i < per_part; ++i) {
      int64_t key = static_cast<int64_t>(rng());
      double value = static_cast<double>(rng() % 100000);
      std::string packed(8, '\0');
      std::memcpy(packed.data(), &value, 8);
      records.push_back(Record{KVKey(key), std::move(packed)});
    }
  }
  return ds;
}

inline FoldFn f64_sum_fold() {
  return [](const KVKey&, const std::vector<std::span<const std::byte>>& vs) {
    double acc = 0;
    for (auto v : vs) {
      double d;
      std::memcpy(&d, v.data(), 8);
      acc += d;
    }
    std::string out(8, '\0');
    std::memcpy(out.data(), &acc, 8);
    return out;
  };
}

}  // namespace detail

enum class MicroOp { groupby, reduceby, sortby, partitionby, join };

inline const char* micro_op_name(MicroOp op) {
  switch (op) {
    case MicroOp::groupby: return "groupby";
    case MicroOp::reduceby: return "reduceby";
    case MicroOp::sortby: return "sortby";
    case MicroOp::partitionby: return "partitionby";
    case MicroOp::join: return "join";
  }
  return "?";
}

inline std::optional<MicroOp> micro_op_from(const std::string& name) {
  for (MicroOp op : {MicroOp::groupby, MicroOp::reduceby, MicroOp::sortby,
                     MicroOp::partitionby, MicroOp::join}) {
    if (name == micro_op_name(op)) return op;
  }
  return std::nullopt;
}

inline CsvRow run_micro(MicroOp op, Engine engine, uint64_t pairs,
                        const RunSpec& spec) {
  detail::ScopedPool sp(spec, std::string("micro_") + micro_op_name(op));
  JobConfig jc = detail::job_for(spec, engine);
  JobOutput out = run_job(sp.pool, jc, [&](WorkerContext& ctx) {
    Dataset result;
    if (op == MicroOp::join) {
      Dataset left = detail::gen_pairs(ctx, pairs / 2);
      WorkerContext& c = ctx;
      Dataset right;
      right.num_partitions = c.partitions();
      uint64_t per_part = pairs / 2 / c.partitions();
      for (uint32_t pid : c.owned_partitions()) {
        std::mt19937_64 rng(c.seed() * 0x51ed270bull + pid);
        for (uint64_t i = 0; i < per_part; ++i) {
          int64_t key = static_cast<int64_t>(rng());
          right.partition(pid).push_back(Record{KVKey(key), "r"});
        }
      }
      result = join(ctx, left, right);
    } else {
      Dataset in = detail::gen_pairs(ctx, pairs);
      switch (op) {
        case MicroOp::groupby: result = group_by(ctx, in); break;
        case MicroOp::reduceby:
          result = reduce_by(ctx, in, detail::f64_sum_fold());
          break;
        case MicroOp::sortby: result = sort_by(ctx, in); break;
        case MicroOp::partitionby: result = partition_by(ctx, in); break;
        case MicroOp::join: break;
      }
    }
    publish_dataset_checksum(ctx, result);
  });
  return CsvRow{std::string("micro_") + micro_op_name(op), engine_name(engine),
                jc.workers, jc.partitions, pairs, out.elapsed_ms,
                out.peak_pool_bytes, out.result_checksum};
}

// TeraSort stand-in: 100-byte records with 10-byte keys, range-partitioned
// sort, global order verified inside the job (worker 0 checks partition
// boundaries; every worker checks its own partitions).
inline CsvRow run_sort(Engine engine, uint64_t records, const RunSpec& spec) {
  detail::ScopedPool sp(spec, "sort");
  JobConfig jc = detail::job_for(spec, engine);
  JobOutput out = run_job(sp.pool, jc, [&](WorkerContext& ctx) {
    Dataset in;
    in.num_partitions = ctx.partitions();
    uint64_t per_part = records / ctx.partitions();
    for (uint32_t pid : ctx.owned_partitions()) {
      std::mt19937_64 rng(ctx.seed() * 0x2545f491ull + pid);
      auto& dest = in.partition(pid);
      dest.reserve(per_part);
      for (uint64_t i = 0; i < per_part; ++i) {
        std::string key(10, '\0');
        for (char& c : key) c = static_cast<char>(rng() % 256);
        std::string value(90, '\0');
        uint64_t fill = rng();
        std::memcpy(value.data(), &fill, 8);
        dest.push_back(Record{KVKey(std::move(key)), std::move(value)});
      }
    }
    Dataset sorted = sort_by(ctx, in);

    // Local order plus per-partition boundary blocks for the global check.
    for (uint32_t pid : ctx.owned_partitions()) {
      auto& recs = sorted.owned[pid];
      for (size_t i = 1; i < recs.size(); ++i) {
        expect(!(recs[i].key < recs[i - 1].key), Errc::io_failure,
               "partition not locally sorted");
      }
      std::vector<std::byte> block;
      uint64_t count = recs.size();
      block.resize(8);
      store_u64(block.data(), count);
      if (count > 0) {
        wire::append_key(block, recs.front().key);
        wire::append_key(block, recs.back().key);
      }
      GlobalRef ref = ctx.scratch_heap().allocate(block.size());
      std::memcpy(ctx.pool().resolve(ref), block.data(), block.size());
      ctx.put_partition_slot(pid, ref.offset);
    }
    ctx.barrier();
    if (ctx.worker_id() == 0) {
      uint64_t total = 0;
      std::optional<KVKey> prev_last;
      bool ordered = true;
      for (uint32_t p = 0; p < ctx.partitions(); ++p) {
        const std::byte* block =
            ctx.pool().resolve(GlobalRef{ctx.get_partition_slot(p)});
        uint64_t count = load_u64(block);
        total += count;
        if (count == 0) continue;
        KVKey first, last;
        const std::byte* q = wire::decode_key(block + 8, first);
        wire::decode_key(q, last);
        if (prev_last && first < *prev_last) ordered = false;
        prev_last = last;
      }
      uint64_t expected = records / ctx.partitions() * ctx.partitions();
      ctx.put_broadcast(3, ordered && total == expected ? 1 : 0);
    }
    ctx.barrier();
    publish_dataset_checksum(ctx, sorted);
  });
  expect(out.broadcasts[3] == 1, Errc::io_failure,
         "sort output failed the global order check");
  return CsvRow{"sort", engine_name(engine), jc.workers, jc.partitions, records,
                out.elapsed_ms, out.peak_pool_bytes, out.result_checksum};
}

inline CsvRow run_pagerank_bench(Engine engine, const PageRankConfig& pr,
                                 const RunSpec& spec) {
  PageRankConfig cfg = pr;
  cfg.seed = spec.seed;
  detail::ScopedPool sp(spec, "pagerank");
  JobConfig jc = detail::job_for(spec, engine);
  PageRankResult r = run_pagerank(sp.pool, jc, cfg);
  return CsvRow{"pagerank", engine_name(engine), jc.workers, jc.partitions,
                cfg.vertices, r.job.elapsed_ms, r.job.peak_pool_bytes,
                r.job.result_checksum};
}

inline CsvRow run_bp_bench(Engine engine, const BPConfig& bp,
                           const RunSpec& spec, bool resume = false) {
  BPConfig cfg = bp;
  cfg.seed = spec.seed;
  std::string workload = cfg.checkpoint_every > 0 ? "bp_ckpt" : "bp";
  detail::ScopedPool sp(spec, "bp");
  JobConfig jc = detail::job_for(spec, engine);
  BPResult r = run_bp(sp.pool, jc, cfg, resume);
  return CsvRow{workload, engine_name(engine), jc.workers, jc.partitions,
                cfg.tree ? cfg.vertices - 1 : cfg.edges, r.job.elapsed_ms,
                r.job.peak_pool_bytes, r.job.result_checksum};
}

}  // namespace sharkle::bench
