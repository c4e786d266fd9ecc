// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

// Benchmark CLI. Workloads run under the shared-memory engine, the
// serialized-copy baseline, or both, and print one CSV row per run.
//
//   sharkle-bench micro <groupby|reduceby|sortby|partitionby|join> [options]
//   sharkle-bench sort      [options]
//   sharkle-bench pagerank  [options]
//   sharkle-bench bp        [options]
//   sharkle-bench ckpt      [options]   checkpoint-overhead comparison

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "sharkle/bench.hpp"

using namespace sharkle;

namespace {

struct CommonArgs {
  uint64_t pairs = 2'000'000;
  uint64_t vertices = 1000;
  uint64_t edges = 0;  // 0: derived from vertices
  uint32_t states = 3;
  uint32_t workers = 2;
  uint32_t partitions = 0;  // 0: workers * 2
  std::string engines = "shared";
  uint32_t iterations = 10;
  double tol = 1e-8;
  uint32_t checkpoint_every = 0;
  std::string pool_dir;
  uint64_t seed = 1;
  std::string csv_path;
  bool threads = false;
  bool resume = false;
  bool three_shuffle = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--pairs", args.pairs, "key/value pairs to shuffle");
  cmd->add_option("--vertices", args.vertices, "graph vertex count");
  cmd->add_option("--edges", args.edges, "graph edge count (default 3x vertices)");
  cmd->add_option("--states", args.states, "belief states per vertex");
  cmd->add_option("--workers", args.workers, "worker count");
  cmd->add_option("--partitions", args.partitions,
                  "partition count (default 2x workers)");
  cmd->add_option("--engines", args.engines, "shared|baseline|both")
      ->check(CLI::IsMember({"shared", "baseline", "both"}));
  cmd->add_option("--iterations", args.iterations, "iteration cap");
  cmd->add_option("--tol", args.tol, "convergence tolerance");
  cmd->add_option("--checkpoint-every", args.checkpoint_every,
                  "checkpoint after every N iterations (0 = off)");
  cmd->add_option("--pool", args.pool_dir,
                  "directory for pool files (default /dev/shm or TMPDIR)");
  cmd->add_option("--seed", args.seed, "input generator seed");
  cmd->add_option("--csv", args.csv_path, "also append CSV rows to this file");
  cmd->add_flag("--threads", args.threads,
                "run workers as threads instead of processes");
  cmd->add_flag("--resume", args.resume, "restore bp from its snapshots");
  cmd->add_flag("--three-shuffle", args.three_shuffle,
                "redistribute bp beliefs via a third shuffle, not gather");
}

std::vector<Engine> engines_of(const CommonArgs& args) {
  if (args.engines == "shared") return {Engine::shared_memory};
  if (args.engines == "baseline") return {Engine::baseline};
  return {Engine::shared_memory, Engine::baseline};
}

bench::RunSpec spec_of(const CommonArgs& args) {
  bench::RunSpec spec;
  if (!args.pool_dir.empty()) {
    spec.pool_dir = args.pool_dir;
  } else if (::access("/dev/shm", W_OK) == 0) {
    spec.pool_dir = "/dev/shm";
  } else {
    spec.pool_dir = std::filesystem::temp_directory_path();
  }
  spec.workers = args.workers;
  spec.partitions = args.partitions != 0 ? args.partitions : args.workers * 2;
  spec.use_threads = args.threads;
  spec.seed = args.seed;
  return spec;
}

class RowSink {
 public:
  explicit RowSink(const std::string& csv_path) {
    std::cout << bench::csv_header() << '\n';
    if (!csv_path.empty()) {
      bool fresh = !std::filesystem::exists(csv_path) ||
                   std::filesystem::file_size(csv_path) == 0;
      file_.open(csv_path, std::ios::app);
      if (fresh) file_ << bench::csv_header() << '\n';
    }
  }
  void operator()(const bench::CsvRow& row) {
    std::cout << bench::to_csv(row) << std::endl;
    if (file_.is_open()) file_ << bench::to_csv(row) << '\n';
  }

 private:
  std::ofstream file_;
};

BPConfig bp_config(const CommonArgs& args,
                   const std::filesystem::path& snapshot_dir) {
  BPConfig bp;
  bp.vertices = args.vertices;
  bp.edges = args.edges != 0 ? args.edges : args.vertices * 3;
  bp.states = args.states;
  bp.max_iterations = args.iterations;
  bp.tol = args.tol;
  bp.use_address_table = !args.three_shuffle;
  bp.checkpoint_every = args.checkpoint_every;
  bp.snapshot_dir = snapshot_dir;
  return bp;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sharkle shared-memory analytics benchmark"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string micro_op;
  CLI::App* micro = app.add_subcommand("micro", "shuffle operator benchmark");
  micro->add_option("op", micro_op, "groupby|reduceby|sortby|partitionby|join")
      ->required()
      ->check(CLI::IsMember(
          {"groupby", "reduceby", "sortby", "partitionby", "join"}));
  CLI::App* sort_cmd = app.add_subcommand("sort", "range-partitioned sort");
  CLI::App* pr_cmd = app.add_subcommand("pagerank", "iterative pagerank");
  CLI::App* bp_cmd = app.add_subcommand("bp", "belief propagation");
  CLI::App* ckpt_cmd =
      app.add_subcommand("ckpt", "bp checkpoint overhead comparison");
  for (CLI::App* cmd : {micro, sort_cmd, pr_cmd, bp_cmd, ckpt_cmd}) {
    add_common(cmd, args);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    bench::RunSpec spec = spec_of(args);
    RowSink emit(args.csv_path);

    if (micro->parsed()) {
      auto op = bench::micro_op_from(micro_op);
      for (Engine engine : engines_of(args)) {
        emit(bench::run_micro(*op, engine, args.pairs, spec));
      }
    } else if (sort_cmd->parsed()) {
      for (Engine engine : engines_of(args)) {
        emit(bench::run_sort(engine, args.pairs, spec));
      }
    } else if (pr_cmd->parsed()) {
      PageRankConfig pr;
      pr.vertices = args.vertices;
      pr.edges = args.edges != 0 ? args.edges : args.vertices * 5;
      pr.iterations = args.iterations;
      for (Engine engine : engines_of(args)) {
        emit(bench::run_pagerank_bench(engine, pr, spec));
      }
    } else if (bp_cmd->parsed()) {
      std::filesystem::path snap = spec.pool_dir / "sharkle.bp.snapshots";
      if (!args.resume && args.checkpoint_every > 0) {
        std::filesystem::remove_all(snap);
      }
      BPConfig bp = bp_config(args, snap);
      for (Engine engine : engines_of(args)) {
        emit(bench::run_bp_bench(engine, bp, spec, args.resume));
      }
    } else if (ckpt_cmd->parsed()) {
      // Same BP schedule with and without checkpoints; rows go to the CSV
      // sink, the overhead summary to stderr.
      std::filesystem::path snap = spec.pool_dir / "sharkle.ckpt.snapshots";
      std::filesystem::remove_all(snap);
      CommonArgs with = args;
      with.checkpoint_every =
          args.checkpoint_every != 0 ? args.checkpoint_every : 1;
      with.tol = 0;
      CommonArgs without = with;
      without.checkpoint_every = 0;
      bench::CsvRow off = bench::run_bp_bench(Engine::shared_memory,
                                              bp_config(without, snap), spec);
      bench::CsvRow on = bench::run_bp_bench(Engine::shared_memory,
                                             bp_config(with, snap), spec);
      emit(off);
      emit(on);
      std::cerr << "checkpoint overhead: "
                << (on.elapsed_ms / off.elapsed_ms - 1.0) * 100.0 << "%\n";
      std::filesystem::remove_all(snap);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
