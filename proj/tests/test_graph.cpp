// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sharkle/graph.hpp"
#include "test_util.hpp"

using namespace sharkle;
using sharkle::test::ScopedPath;
using sharkle::test::fresh_path;

namespace {

PoolConfig cfg(const std::filesystem::path& p, uint64_t zones = 128) {
  PoolConfig c;
  c.path = p;
  c.zone_size = 4 << 20;
  c.zone_count = zones;
  return c;
}

JobConfig threads_job(uint32_t workers, uint32_t partitions, uint64_t seed) {
  JobConfig jc;
  jc.workers = workers;
  jc.partitions = partitions;
  jc.use_threads = true;
  jc.seed = seed;
  return jc;
}

uint64_t bits(double d) { return std::bit_cast<uint64_t>(d); }

}  // namespace

TEST_CASE("graph generators are deterministic and well-formed") {
  EdgeList a = erdos_renyi(9, 100, 400);
  EdgeList b = erdos_renyi(9, 100, 400);
  CHECK(a.edges == b.edges);
  CHECK(a.edges.size() == 400);
  std::set<std::pair<uint64_t, uint64_t>> distinct(a.edges.begin(),
                                                   a.edges.end());
  CHECK(distinct.size() == 400);
  for (auto& [u, v] : a.edges) {
    CHECK(u != v);
    CHECK(u < 100);
    CHECK(v < 100);
  }

  EdgeList t = random_tree(4, 12);
  CHECK(t.edges.size() == 11);
  for (uint64_t v = 1; v < 12; ++v) {
    CHECK(t.edges[v - 1].second == v);
    CHECK(t.edges[v - 1].first < v);
  }
}

TEST_CASE("pagerank on a directed cycle is uniform") {
  ScopedPath path(fresh_path("pr_cycle"));
  Pool pool = create_pool(cfg(path));

  // erdos_renyi cannot make a cycle; drive the program pieces through a
  // custom oracle comparison instead: a 3-cycle has the uniform fixed point.
  EdgeList cycle;
  cycle.num_vertices = 3;
  cycle.edges = {{0, 1}, {1, 2}, {2, 0}};
  auto ranks = pagerank_oracle(cycle, 50, 0.85);
  for (double r : ranks) CHECK(r == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("pagerank matches the dense power-iteration oracle") {
  ScopedPath path(fresh_path("pr_oracle"));
  Pool pool = create_pool(cfg(path));
  PageRankConfig pr;
  pr.vertices = 1000;
  pr.edges = 5000;
  pr.iterations = 20;
  pr.seed = 77;
  PageRankResult result =
      run_pagerank(pool, threads_job(2, 4, pr.seed), pr);

  auto ranks = read_ranks(pool, result.routing, pr.vertices);
  auto expected = pagerank_oracle(erdos_renyi(pr.seed, pr.vertices, pr.edges),
                                  pr.iterations, pr.damping);
  double max_diff = 0;
  for (uint64_t v = 0; v < pr.vertices; ++v) {
    max_diff = std::max(max_diff, std::abs(ranks[v] - expected[v]));
  }
  CHECK(max_diff <= 1e-9);
  CHECK(result.max_sum_deviation <= 1e-12);
}

TEST_CASE("pagerank handles dangling vertices and conserves rank mass") {
  ScopedPath path(fresh_path("pr_dangling"));
  Pool pool = create_pool(cfg(path));
  // Sparse graph on many vertices: most have no out-edges.
  PageRankConfig pr;
  pr.vertices = 500;
  pr.edges = 120;
  pr.iterations = 15;
  pr.seed = 5;
  PageRankResult result = run_pagerank(pool, threads_job(2, 4, pr.seed), pr);
  CHECK(result.max_sum_deviation <= 1e-12);

  auto ranks = read_ranks(pool, result.routing, pr.vertices);
  auto expected = pagerank_oracle(erdos_renyi(pr.seed, pr.vertices, pr.edges),
                                  pr.iterations, pr.damping);
  for (uint64_t v = 0; v < pr.vertices; ++v) {
    CHECK(std::abs(ranks[v] - expected[v]) <= 1e-12);
  }
}

TEST_CASE("pagerank is engine- and worker-count-invariant bit for bit") {
  PageRankConfig pr;
  pr.vertices = 300;
  pr.edges = 900;
  pr.iterations = 8;
  pr.seed = 21;

  auto run_with = [&](uint32_t workers, Engine engine) {
    ScopedPath path(fresh_path("pr_invariant"));
    Pool pool = create_pool(cfg(path));
    JobConfig jc = threads_job(workers, 4, pr.seed);
    jc.engine = engine;
    PageRankResult r = run_pagerank(pool, jc, pr);
    return read_ranks(pool, r.routing, pr.vertices);
  };
  auto shared2 = run_with(2, Engine::shared_memory);
  auto shared4 = run_with(4, Engine::shared_memory);
  auto baseline = run_with(1, Engine::baseline);
  for (uint64_t v = 0; v < pr.vertices; ++v) {
    CHECK(bits(shared2[v]) == bits(shared4[v]));
    CHECK(bits(shared2[v]) == bits(baseline[v]));
  }
}

TEST_CASE("bp on a single vertex returns the normalized unary potential") {
  ScopedPath path(fresh_path("bp_single"));
  Pool pool = create_pool(cfg(path));
  BPConfig bp;
  bp.vertices = 1;
  bp.tree = true;
  bp.states = 4;
  bp.max_iterations = 10;
  bp.seed = 3;
  BPResult result = run_bp(pool, threads_job(1, 2, bp.seed), bp);
  CHECK(result.iterations == 1);  // no messages: converged immediately

  auto beliefs = read_beliefs(pool, result.routing, 1, 4);
  auto phi = unary_potential(bp.seed, 0, 4);
  double sum = 0;
  for (double p : phi) sum += p;
  for (uint32_t x = 0; x < 4; ++x) {
    CHECK(beliefs[0][x] == doctest::Approx(phi[x] / sum).epsilon(1e-15));
  }
}

TEST_CASE("bp on random trees matches exact enumeration") {
  for (uint64_t seed : {11ull, 12ull, 13ull}) {
    ScopedPath path(fresh_path("bp_tree"));
    Pool pool = create_pool(cfg(path));
    BPConfig bp;
    bp.vertices = 10 + seed % 3;  // n <= 12
    bp.tree = true;
    bp.states = 3;
    bp.max_iterations = static_cast<uint32_t>(bp.vertices);
    bp.tol = 1e-12;
    bp.seed = seed;
    BPResult result = run_bp(pool, threads_job(2, 4, seed), bp);
    CHECK(result.iterations <= bp.vertices);

    auto beliefs = read_beliefs(pool, result.routing, bp.vertices, bp.states);
    auto exact = bp_exact_marginals(random_tree(seed, bp.vertices), bp.states,
                                    seed);
    for (uint64_t v = 0; v < bp.vertices; ++v) {
      double sum = 0;
      for (uint32_t x = 0; x < bp.states; ++x) {
        CHECK(std::abs(beliefs[v][x] - exact[v][x]) <= 1e-6);
        sum += beliefs[v][x];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("bp converges to a fixed point: extra iterations change nothing") {
  BPConfig bp;
  bp.vertices = 12;
  bp.tree = true;
  bp.states = 3;
  bp.tol = 1e-12;
  bp.seed = 19;

  auto run_with = [&](uint32_t max_iter) {
    ScopedPath path(fresh_path("bp_fixed"));
    Pool pool = create_pool(cfg(path));
    bp.max_iterations = max_iter;
    BPResult r = run_bp(pool, threads_job(1, 2, bp.seed), bp);
    return std::make_pair(read_beliefs(pool, r.routing, bp.vertices, bp.states),
                          r.iterations);
  };
  auto [first, iters] = run_with(40);
  REQUIRE(iters < 40);  // converged by tolerance, not cap
  auto [second, iters2] = run_with(static_cast<uint32_t>(iters) + 1);
  CHECK(iters2 == iters);  // the extra headroom is not used
  for (uint64_t v = 0; v < bp.vertices; ++v) {
    for (uint32_t x = 0; x < bp.states; ++x) {
      CHECK(bits(first[v][x]) == bits(second[v][x]));
    }
  }
}

TEST_CASE("address-table gather and third-shuffle runs agree bit for bit") {
  BPConfig bp;
  bp.vertices = 200;
  bp.edges = 600;
  bp.states = 3;
  bp.max_iterations = 6;  // fixed schedule for the comparison
  bp.tol = 0;             // never converge early
  bp.seed = 23;

  auto run_mode = [&](bool use_addr, uint32_t workers) {
    ScopedPath path(fresh_path("bp_modes"));
    Pool pool = create_pool(cfg(path));
    bp.use_address_table = use_addr;
    BPResult r = run_bp(pool, threads_job(workers, 4, bp.seed), bp);
    return read_beliefs(pool, r.routing, bp.vertices, bp.states);
  };
  auto gathered = run_mode(true, 2);
  auto shuffled = run_mode(false, 2);
  auto gathered1 = run_mode(true, 1);
  for (uint64_t v = 0; v < bp.vertices; ++v) {
    for (uint32_t x = 0; x < bp.states; ++x) {
      CHECK(bits(gathered[v][x]) == bits(shuffled[v][x]));
      CHECK(bits(gathered[v][x]) == bits(gathered1[v][x]));
    }
  }
}

TEST_CASE("bp resumes from a checkpoint to bit-identical final beliefs") {
  ScopedPath snap(fresh_path("bp_snap"));
  BPConfig bp;
  bp.vertices = 150;
  bp.edges = 400;
  bp.states = 3;
  bp.max_iterations = 9;
  bp.tol = 0;
  bp.seed = 31;
  bp.checkpoint_every = 2;
  bp.snapshot_dir = snap.get();

  // Uninterrupted run.
  std::vector<std::vector<double>> full;
  {
    ScopedPath path(fresh_path("bp_resume_a"));
    Pool pool = create_pool(cfg(path));
    BPResult r = run_bp(pool, threads_job(2, 4, bp.seed), bp);
    CHECK(r.iterations == 9);
    full = read_beliefs(pool, r.routing, bp.vertices, bp.states);
  }

  // Interrupted: run only 5 iterations (checkpoints at 2 and 4), then
  // resume in a brand-new pool from the snapshot at iteration 4.
  std::filesystem::remove_all(snap.get());
  {
    ScopedPath path(fresh_path("bp_resume_b"));
    Pool pool = create_pool(cfg(path));
    BPConfig first = bp;
    first.max_iterations = 5;
    run_bp(pool, threads_job(2, 4, bp.seed), first);
  }
  {
    ScopedPath path(fresh_path("bp_resume_c"));
    Pool pool = create_pool(cfg(path));
    BPResult r = run_bp(pool, threads_job(2, 4, bp.seed), bp, /*resume=*/true);
    CHECK(r.iterations == 9);
    auto resumed = read_beliefs(pool, r.routing, bp.vertices, bp.states);
    for (uint64_t v = 0; v < bp.vertices; ++v) {
      for (uint32_t x = 0; x < bp.states; ++x) {
        CHECK(bits(resumed[v][x]) == bits(full[v][x]));
      }
    }
  }
}
