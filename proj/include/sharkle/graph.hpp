// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <random>
#include <set>
#include <unordered_map>

#include "sharkle/dataflow.hpp"

namespace sharkle {

// Graph workloads over the dataflow layer: PageRank redistributes rank
// contributions with a reduce-by shuffle every iteration; belief
// propagation keeps vertex beliefs and edge messages in the off-heap store,
// aggregates messages with one shuffle per iteration, and redistributes
// updated beliefs either through a second (pass-through) shuffle or through
// prebuilt address tables into the store.

struct EdgeList {
  uint64_t num_vertices = 0;
  std::vector<std::pair<uint64_t, uint64_t>> edges;
};

// m distinct directed pairs (u != v), deterministic in the seed.
inline EdgeList erdos_renyi(uint64_t seed, uint64_t n, uint64_t m) {
  expect(n >= 2, Errc::invalid_argument, "graph needs at least two vertices");
  EdgeList g;
  g.num_vertices = n;
  std::mt19937_64 rng(seed);
  std::set<std::pair<uint64_t, uint64_t>> seen;
  while (g.edges.size() < m) {
    uint64_t u = rng() % n;
    uint64_t v = rng() % n;
    if (u == v) continue;
    if (!seen.insert({u, v}).second) continue;
    g.edges.emplace_back(u, v);
  }
  return g;
}

// Uniform random recursive tree: vertex i attaches to a random predecessor.
inline EdgeList random_tree(uint64_t seed, uint64_t n) {
  EdgeList g;
  g.num_vertices = n;
  std::mt19937_64 rng(seed);
  for (uint64_t v = 1; v < n; ++v) {
    g.edges.emplace_back(rng() % v, v);
  }
  return g;
}

// --- PageRank -----------------------------------------------------------------

struct PageRankConfig {
  uint64_t vertices = 1000;
  uint64_t edges = 5000;
  uint32_t iterations = 20;
  double damping = 0.85;
  uint64_t seed = 1;
};

struct PageRankResult {
  JobOutput job;
  GlobalRef routing;          // vertex partitions: {rank f64, outdeg f64}
  double max_sum_deviation;   // max over iterations of |sum(ranks) - 1|
};

namespace detail {

// Digest of the logical content (keys and payloads); version words are
// bookkeeping and would differ between a run and its restored twin.
inline uint64_t store_digest(const StorePartition& part) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint64_t i = 0; i < part.entry_count(); ++i) {
    uint64_t key = part.key_at(i);
    h = fnv1a64(&key, 8, h);
    auto payload = part.payload(i);
    h = fnv1a64(payload.data(), payload.size(), h);
  }
  return h;
}

// Combines per-partition store digests (pid order) into broadcast slot 0.
inline uint64_t publish_store_checksum(WorkerContext& ctx,
                                       const RoutingTable& routing,
                                       uint32_t first_pid, uint32_t count) {
  for (uint32_t pid = first_pid; pid < first_pid + count; ++pid) {
    if (!ctx.owns(pid - first_pid)) continue;
    ctx.put_partition_slot(pid - first_pid,
                           store_digest(routing.partition(pid)));
  }
  ctx.barrier();
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint32_t p = 0; p < count; ++p) {
    uint64_t d = ctx.get_partition_slot(p);
    h = fnv1a64(&d, 8, h);
  }
  if (ctx.worker_id() == 0) ctx.put_broadcast(0, h);
  ctx.barrier();
  return h;
}

}  // namespace detail

inline void pagerank_program(WorkerContext& ctx, const PageRankConfig& cfg) {
  const uint32_t P = ctx.partitions();
  const uint64_t n = cfg.vertices;
  EdgeList graph = erdos_renyi(cfg.seed, n, cfg.edges);

  // Vertex partitions by hashed key; edges grouped by source partition so a
  // map task reads its own ranks.
  std::vector<uint64_t> outdeg(n, 0);
  for (auto& [u, v] : graph.edges) ++outdeg[u];

  AttributeSchema schema{{8, 8}};  // rank, outdeg
  std::vector<uint32_t> owned = ctx.owned_partitions();
  for (uint32_t pid : owned) {
    std::vector<uint64_t> keys;
    for (uint64_t v = 0; v < n; ++v) {
      if (key_partition(v, P) == pid) keys.push_back(v);
    }
    std::vector<std::byte> payload(keys.size() * 16);
    for (size_t i = 0; i < keys.size(); ++i) {
      double rank = 1.0 / static_cast<double>(n);
      double deg = static_cast<double>(outdeg[keys[i]]);
      std::memcpy(payload.data() + i * 16, &rank, 8);
      std::memcpy(payload.data() + i * 16 + 8, &deg, 8);
    }
    GlobalRef ref =
        build_partition(ctx.pool(), ctx.scratch_heap(), pid, schema, keys,
                        payload, ctx.worker_id() % ctx.pool().node_count());
    ctx.put_partition_slot(pid, ref.offset);
  }
  ctx.barrier();
  if (ctx.worker_id() == 0) {
    std::vector<GlobalRef> refs;
    for (uint32_t p = 0; p < P; ++p) refs.push_back(GlobalRef{ctx.get_partition_slot(p)});
    RoutingTable routing = build_routing_table(ctx.pool(), ctx.scratch_heap(), refs);
    ctx.put_broadcast(1, routing.table_ref().offset);
  }
  ctx.barrier();
  RoutingTable routing(ctx.pool(), GlobalRef{ctx.get_broadcast(1)});

  std::unordered_map<uint32_t, std::vector<std::pair<uint64_t, uint64_t>>> epart;
  for (uint32_t pid : owned) epart[pid] = {};
  for (auto& [u, v] : graph.edges) {
    uint32_t pid = static_cast<uint32_t>(key_partition(u, P));
    auto it = epart.find(pid);
    if (it != epart.end()) it->second.emplace_back(u, v);
  }

  double max_sum_dev = 0;
  for (uint32_t iter = 0; iter < cfg.iterations; ++iter) {
    // Dangling mass and the conservation check, combined in pid order so
    // the result is identical for any worker count.
    std::vector<std::pair<uint32_t, double>> dangling, totals;
    for (uint32_t pid : owned) {
      StorePartition part = routing.partition(pid);
      double d = 0, t = 0;
      for (uint64_t i = 0; i < part.entry_count(); ++i) {
        auto payload = part.payload(i);
        double rank, deg;
        std::memcpy(&rank, payload.data(), 8);
        std::memcpy(&deg, payload.data() + 8, 8);
        t += rank;
        if (deg == 0) d += rank;
      }
      dangling.emplace_back(pid, d);
      totals.emplace_back(pid, t);
    }
    double dangling_sum = ctx.exchange_sum_by_partition(dangling);
    double rank_sum = ctx.exchange_sum_by_partition(totals);
    max_sum_dev = std::max(max_sum_dev, std::abs(rank_sum - 1.0));

    auto feed = [&](uint32_t m, auto&& add) {
      auto it = epart.find(m);
      if (it == epart.end()) return;
      StorePartition part = routing.partition(m);
      for (auto& [u, v] : it->second) {
        auto payload = part.lookup(u);
        double rank, deg;
        std::memcpy(&rank, payload->data(), 8);
        std::memcpy(&deg, payload->data() + 8, 8);
        double contrib = rank / deg;  // deg >= 1: u has an out-edge
        add(KVKey(static_cast<int64_t>(v)),
            std::as_bytes(std::span(&contrib, 1)));
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
      std::unordered_map<uint64_t, double> sums;
      for (Group& g : groups) {
        double s = 0;
        for (auto v : g.values) {
          double c;
          std::memcpy(&c, v.data(), 8);
          s += c;
        }
        sums[static_cast<uint64_t>(g.key.as_int())] = s;
      }
      StorePartition part = routing.partition(r);
      double base = (1.0 - cfg.damping) / static_cast<double>(n);
      double shared_dangling =
          cfg.damping * dangling_sum / static_cast<double>(n);
      std::vector<uint64_t> keys;
      keys.reserve(part.entry_count());
      for (uint64_t i = 0; i < part.entry_count(); ++i) keys.push_back(part.key_at(i));
      for (uint64_t key : keys) {
        auto it = sums.find(key);
        double in_sum = it == sums.end() ? 0.0 : it->second;
        double rank = base + cfg.damping * in_sum + shared_dangling;
        part.update_in_place(key, 0, std::as_bytes(std::span(&rank, 1)));
      }
    };
    detail::exchange(ctx, Scheme::hash_merge, P, P, nullptr, feed, consume);
  }

  // Final conservation check and result digest.
  std::vector<std::pair<uint32_t, double>> totals;
  for (uint32_t pid : owned) {
    StorePartition part = routing.partition(pid);
    double t = 0;
    for (uint64_t i = 0; i < part.entry_count(); ++i) {
      double rank;
      std::memcpy(&rank, part.payload(i).data(), 8);
      t += rank;
    }
    totals.emplace_back(pid, t);
  }
  double rank_sum = ctx.exchange_sum_by_partition(totals);
  max_sum_dev = std::max(max_sum_dev, std::abs(rank_sum - 1.0));
  if (ctx.worker_id() == 0) {
    ctx.put_broadcast(2, std::bit_cast<uint64_t>(max_sum_dev));
  }
  detail::publish_store_checksum(ctx, routing, 0, P);
}

inline PageRankResult run_pagerank(Pool& pool, const JobConfig& jc,
                                   const PageRankConfig& cfg) {
  JobOutput out = run_job(pool, jc, [&](WorkerContext& ctx) {
    pagerank_program(ctx, cfg);
  });
  PageRankResult result;
  result.job = out;
  result.routing = GlobalRef{out.broadcasts[1]};
  result.max_sum_deviation = std::bit_cast<double>(out.broadcasts[2]);
  return result;
}

// Reads the final rank vector through the routing table.
inline std::vector<double> read_ranks(Pool& pool, GlobalRef routing_ref,
                                      uint64_t n) {
  RoutingTable routing(pool, routing_ref);
  std::vector<double> ranks(n, 0.0);
  for (uint64_t v = 0; v < n; ++v) {
    StorePartition part =
        routing.partition(key_partition(v, routing.partition_count()));
    auto payload = part.lookup(v);
    expect(payload.has_value(), Errc::key_absent, "vertex missing");
    std::memcpy(&ranks[v], payload->data(), 8);
  }
  return ranks;
}

// Dense power-iteration oracle with the same dangling redistribution.
inline std::vector<double> pagerank_oracle(const EdgeList& g,
                                           uint32_t iterations,
                                           double damping) {
  uint64_t n = g.num_vertices;
  std::vector<double> rank(n, 1.0 / static_cast<double>(n));
  std::vector<uint64_t> outdeg(n, 0);
  for (auto& [u, v] : g.edges) ++outdeg[u];
  for (uint32_t it = 0; it < iterations; ++it) {
    std::vector<double> next(n, 0.0);
    double dangling = 0;
    for (uint64_t v = 0; v < n; ++v) {
      if (outdeg[v] == 0) dangling += rank[v];
    }
    for (auto& [u, v] : g.edges) {
      next[v] += rank[u] / static_cast<double>(outdeg[u]);
    }
    double base = (1.0 - damping) / static_cast<double>(n);
    for (uint64_t v = 0; v < n; ++v) {
      rank[v] = base + damping * (next[v] + dangling / static_cast<double>(n));
    }
  }
  return rank;
}

// --- belief propagation ------------------------------------------------------------

struct BPConfig {
  uint64_t vertices = 1000;
  uint64_t edges = 3000;       // ignored when tree = true
  bool tree = false;
  uint32_t states = 3;
  uint32_t max_iterations = 50;
  double tol = 1e-10;
  uint64_t seed = 1;
  bool use_address_table = true;  // consolidated redistribution (gather)
  uint32_t checkpoint_every = 0;  // checkpoint after every N iterations
  std::filesystem::path snapshot_dir;
  uint64_t dataset_id = 1;
};

struct BPResult {
  JobOutput job;
  uint64_t iterations = 0;
  double final_delta = 0;
  GlobalRef routing;  // 2P partitions: [0,P) beliefs, [P,2P) messages
};

inline std::vector<double> unary_potential(uint64_t seed, uint64_t v,
                                           uint32_t k) {
  std::mt19937_64 rng(mix64(seed * 1000003 + v));
  std::uniform_real_distribution<double> dist(0.2, 1.2);
  std::vector<double> phi(k);
  for (uint32_t x = 0; x < k; ++x) phi[x] = dist(rng);
  return phi;
}

// Row-major psi[x_u * k + x_v] > 0, shared by every edge.
inline std::vector<double> pairwise_potential(uint64_t seed, uint32_t k) {
  std::mt19937_64 rng(mix64(seed * 7777 + 13));
  std::uniform_real_distribution<double> dist(0.2, 1.2);
  std::vector<double> psi(k * k);
  for (auto& x : psi) x = dist(rng);
  return psi;
}

namespace detail {

inline void normalize(std::span<double> v) {
  double s = 0;
  for (double x : v) s += x;
  for (double& x : v) x /= s;
}

struct BPRuntime {
  bool resumed = false;
  GlobalRef routing;
  uint64_t start_iteration = 0;
};

inline EdgeList bp_graph(const BPConfig& cfg) {
  return cfg.tree ? random_tree(cfg.seed, cfg.vertices)
                  : erdos_renyi(cfg.seed, cfg.vertices, cfg.edges);
}

inline AttributeSchema bp_schema_of(uint64_t pid, uint32_t P, uint32_t k) {
  if (pid < P) return AttributeSchema{{k * 8u}};            // beliefs
  if (pid < 2ull * P) return AttributeSchema{{2u * k * 8u}};  // messages
  return AttributeSchema{{8}};                              // meta (pid 2P)
}

}  // namespace detail

// One synchronous sum-product iteration structure:
//   stage 1 (edge partitions): recompute both directed messages per edge
//   from current endpoint beliefs and previous messages, update the message
//   store in place, and shuffle new messages to their destination vertices;
//   stage 2 (vertex partitions): fold incoming messages, update beliefs in
//   place, and max-reduce the belief delta for the convergence test;
//   stage 3: redistribute updated beliefs to edge partitions, either by a
//   pass-through shuffle or by address-table gather from the store.
inline void bp_program(WorkerContext& ctx, const BPConfig& cfg,
                       const detail::BPRuntime& rt) {
  const uint32_t P = ctx.partitions();
  const uint32_t k = cfg.states;
  const uint64_t n = cfg.vertices;
  EdgeList graph = detail::bp_graph(cfg);
  const std::vector<double> psi = pairwise_potential(cfg.seed, k);
  const AttributeSchema belief_schema{{k * 8u}};
  const AttributeSchema message_schema{{2u * k * 8u}};
  const AttributeSchema meta_schema{{8}};
  std::vector<uint32_t> owned = ctx.owned_partitions();

  // Static layout, regenerated identically on every (re)start: vertex keys
  // per belief partition, edge ids per message partition, and which edge
  // partitions need each owned vertex's belief.
  std::vector<std::vector<uint64_t>> vkeys(P);
  for (uint64_t v = 0; v < n; ++v) {
    vkeys[key_partition(v, P)].push_back(v);
  }
  std::unordered_map<uint32_t, std::vector<uint64_t>> eids;  // owned epid -> edge ids
  for (uint32_t pid : owned) eids[pid] = {};
  for (uint64_t e = 0; e < graph.edges.size(); ++e) {
    uint32_t epid = static_cast<uint32_t>(e % P);
    auto it = eids.find(epid);
    if (it != eids.end()) it->second.push_back(e);
  }
  std::unordered_map<uint64_t, std::vector<uint32_t>> needs;  // owned v -> epids
  for (uint64_t e = 0; e < graph.edges.size(); ++e) {
    auto [u, v] = graph.edges[e];
    uint32_t epid = static_cast<uint32_t>(e % P);
    for (uint64_t w : {u, v}) {
      if (ctx.owns(static_cast<uint32_t>(key_partition(w, P)))) {
        needs[w].push_back(epid);
      }
    }
  }
  for (auto& [v, list] : needs) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }

  // Unary potentials of owned vertices, computed once.
  std::unordered_map<uint64_t, std::vector<double>> phi_cache;
  for (uint32_t pid : owned) {
    for (uint64_t v : vkeys[pid]) {
      phi_cache.emplace(v, unary_potential(cfg.seed, v, k));
    }
  }

  RoutingTable routing;
  if (rt.resumed) {
    routing = RoutingTable(ctx.pool(), rt.routing);
  } else {
    // Build belief, message, and meta partitions, then one routing table.
    for (uint32_t pid : owned) {
      std::vector<std::byte> payload(vkeys[pid].size() * k * 8);
      for (size_t i = 0; i < vkeys[pid].size(); ++i) {
        std::vector<double> phi = phi_cache.at(vkeys[pid][i]);
        detail::normalize(phi);
        std::memcpy(payload.data() + i * k * 8, phi.data(), k * 8);
      }
      GlobalRef ref = build_partition(ctx.pool(), ctx.scratch_heap(), pid,
                                      belief_schema, vkeys[pid], payload);
      ctx.put_partition_slot(pid, ref.offset);
    }
    ctx.barrier();
    std::vector<GlobalRef> all_refs(2 * P + 1);
    for (uint32_t p = 0; p < P; ++p) {
      all_refs[p] = GlobalRef{ctx.get_partition_slot(p)};
    }
    ctx.barrier();
    for (uint32_t pid : owned) {
      const auto& ids = eids[pid];
      std::vector<std::byte> payload(ids.size() * 2 * k * 8);
      std::vector<double> uniform(2 * k, 1.0 / static_cast<double>(k));
      for (size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(payload.data() + i * 2 * k * 8, uniform.data(), 2 * k * 8);
      }
      GlobalRef ref = build_partition(ctx.pool(), ctx.scratch_heap(), P + pid,
                                      message_schema, ids, payload);
      ctx.put_partition_slot(pid, ref.offset);
    }
    ctx.barrier();
    for (uint32_t p = 0; p < P; ++p) {
      all_refs[P + p] = GlobalRef{ctx.get_partition_slot(p)};
    }
    ctx.barrier();
    if (ctx.worker_id() == 0) {
      // Meta partition: one record holding the completed-iteration count.
      std::vector<uint64_t> meta_keys{0};
      std::vector<std::byte> meta_payload(8, std::byte{0});
      all_refs[2 * P] = build_partition(ctx.pool(), ctx.scratch_heap(), 2 * P,
                                        meta_schema, meta_keys, meta_payload);
      for (uint32_t p = 0; p < 2 * P; ++p) {
        expect(!all_refs[p].is_null(), Errc::io_failure, "missing partition");
      }
      RoutingTable built =
          build_routing_table(ctx.pool(), ctx.scratch_heap(), all_refs);
      ctx.put_broadcast(1, built.table_ref().offset);
    }
    ctx.barrier();
    routing = RoutingTable(ctx.pool(), GlobalRef{ctx.get_broadcast(1)});
  }

  // Mode A: worker-local belief cache per owned edge partition, primed from
  // the store (equal to what stage 3 of the previous iteration shipped).
  // Mode B: address tables over endpoint requests, in edge order.
  std::unordered_map<uint64_t, std::vector<double>> belief_cache;
  std::unordered_map<uint32_t, AddressTable> addr;
  auto prime_cache = [&]() {
    for (uint32_t pid : owned) {
      for (uint64_t e : eids[pid]) {
        auto [u, v] = graph.edges[e];
        for (uint64_t w : {u, v}) {
          if (belief_cache.contains(w)) continue;
          StorePartition part =
              routing.partition(key_partition(w, P));
          auto payload = part.lookup(w);
          std::vector<double> b(k);
          std::memcpy(b.data(), payload->data(), k * 8);
          belief_cache.emplace(w, std::move(b));
        }
      }
    }
  };
  if (cfg.use_address_table) {
    for (uint32_t pid : owned) {
      std::vector<uint64_t> requests;
      requests.reserve(eids[pid].size() * 2);
      for (uint64_t e : eids[pid]) {
        requests.push_back(graph.edges[e].first);
        requests.push_back(graph.edges[e].second);
      }
      addr.emplace(pid, build_address_table(
                            ctx.pool(), ctx.scratch_heap(), routing, requests,
                            [&](uint64_t key) { return key_partition(key, P); }));
    }
  } else {
    prime_cache();
  }

  std::optional<CheckpointManager> mgr;
  if (cfg.checkpoint_every > 0) {
    mgr.emplace(ctx.pool(), SnapshotStore{cfg.snapshot_dir}, cfg.dataset_id);
  }

  uint64_t iterations_run = rt.start_iteration;
  double final_delta = std::numeric_limits<double>::infinity();
  std::vector<double> scratch_msgs(2 * k);
  for (uint64_t iter = rt.start_iteration; iter < cfg.max_iterations; ++iter) {
    // Stage 1 feed: per owned edge partition, recompute messages.
    auto feed = [&](uint32_t m, auto&& add) {
      auto it = eids.find(m);
      if (it == eids.end() || it->second.empty()) return;
      StorePartition msgs = routing.partition(P + m);
      // Endpoint beliefs, in edge order.
      std::vector<const double*> endpoint_beliefs(2 * it->second.size());
      std::vector<std::vector<double>> gathered;
      if (cfg.use_address_table) {
        gathered.resize(2 * it->second.size(), std::vector<double>(k));
        gather(ctx.pool(), addr.at(m), belief_schema, 0,
               [&](uint64_t i, std::span<const std::byte> bytes) {
                 std::memcpy(gathered[i].data(), bytes.data(), k * 8);
               });
        for (size_t i = 0; i < gathered.size(); ++i) {
          endpoint_beliefs[i] = gathered[i].data();
        }
      } else {
        for (size_t i = 0; i < it->second.size(); ++i) {
          auto [u, v] = graph.edges[it->second[i]];
          endpoint_beliefs[2 * i] = belief_cache.at(u).data();
          endpoint_beliefs[2 * i + 1] = belief_cache.at(v).data();
        }
      }
      for (size_t i = 0; i < it->second.size(); ++i) {
        uint64_t e = it->second[i];
        auto [u, v] = graph.edges[e];
        const double* b_u = endpoint_beliefs[2 * i];
        const double* b_v = endpoint_beliefs[2 * i + 1];
        auto old_payload = msgs.lookup(e);
        const double* m_uv = reinterpret_cast<const double*>(old_payload->data());
        const double* m_vu = m_uv + k;
        double* new_uv = scratch_msgs.data();
        double* new_vu = scratch_msgs.data() + k;
        for (uint32_t xv = 0; xv < k; ++xv) {
          double s = 0;
          for (uint32_t xu = 0; xu < k; ++xu) {
            s += psi[xu * k + xv] * (b_u[xu] / m_vu[xu]);
          }
          new_uv[xv] = s;
        }
        for (uint32_t xu = 0; xu < k; ++xu) {
          double s = 0;
          for (uint32_t xv = 0; xv < k; ++xv) {
            s += psi[xu * k + xv] * (b_v[xv] / m_uv[xv]);
          }
          new_vu[xu] = s;
        }
        detail::normalize(std::span(new_uv, k));
        detail::normalize(std::span(new_vu, k));
        msgs.update_in_place(e, 0,
                             std::as_bytes(std::span(scratch_msgs.data(), 2 * k)));
        add(KVKey(static_cast<int64_t>(v)),
            std::as_bytes(std::span(new_uv, k)));
        add(KVKey(static_cast<int64_t>(u)),
            std::as_bytes(std::span(new_vu, k)));
      }
    };
    // Stage 2 consume: fold messages per vertex, update beliefs, track delta.
    double local_delta = 0;
    auto consume = [&](uint32_t r, auto& source, bool) {
      std::vector<Group> groups;
      if constexpr (std::is_same_v<std::decay_t<decltype(source)>,
                                   BaselineShuffle>) {
        groups = source.hashed_groups(r);
      } else {
        groups = reduce_read_hashed(ctx.pool(), source, r);
      }
      StorePartition part = routing.partition(r);
      std::vector<double> belief(k), incoming(k);
      for (Group& g : groups) {
        uint64_t v = static_cast<uint64_t>(g.key.as_int());
        std::fill(incoming.begin(), incoming.end(), 1.0);
        for (auto bytes : g.values) {
          const double* m = reinterpret_cast<const double*>(bytes.data());
          for (uint32_t x = 0; x < k; ++x) incoming[x] *= m[x];
        }
        const std::vector<double>& phi = phi_cache.at(v);
        for (uint32_t x = 0; x < k; ++x) belief[x] = phi[x] * incoming[x];
        detail::normalize(belief);
        auto old_payload = part.lookup(v);
        const double* old_b = reinterpret_cast<const double*>(old_payload->data());
        double delta = 0;
        for (uint32_t x = 0; x < k; ++x) {
          delta = std::max(delta, std::abs(belief[x] - old_b[x]));
        }
        local_delta = std::max(local_delta, delta);
        part.update_in_place(v, 0, std::as_bytes(std::span(belief)));
      }
    };
    detail::exchange(ctx, Scheme::hash_merge, P, P, nullptr, feed, consume);

    final_delta = ctx.all_max(local_delta);
    iterations_run = iter + 1;
    bool stop = final_delta < cfg.tol || iterations_run >= cfg.max_iterations;

    if (mgr && (iter + 1) % cfg.checkpoint_every == 0) {
      // Beliefs are derivable from the messages and potentials, so only the
      // message partitions (plus the iteration counter) are persisted;
      // restore replays the belief update from the restored messages.
      std::vector<GlobalRef> mine;
      for (uint32_t pid : owned) {
        mine.push_back(routing.partition_ref(P + pid));
      }
      if (ctx.worker_id() == 0) {
        StorePartition meta = routing.partition(2 * P);
        uint64_t done = iter + 1;
        meta.update_in_place(0, 0, std::as_bytes(std::span(&done, 1)));
        mine.push_back(routing.partition_ref(2 * P));
      }
      mgr->checkpoint_partitions(mine);
    }

    if (stop) break;

    // Stage 3 (shuffle mode): ship updated beliefs to the edge partitions
    // that need them; reducer epid receives (vertex, belief) records.
    if (!cfg.use_address_table) {
      std::vector<KVKey> splitters;
      for (uint32_t r = 1; r < P; ++r) {
        splitters.push_back(KVKey(static_cast<int64_t>(r)));
      }
      auto feed3 = [&](uint32_t m, auto&& add) {
        StorePartition part = routing.partition(m);
        std::string buf;
        for (uint64_t v : vkeys[m]) {
          auto it = needs.find(v);
          if (it == needs.end()) continue;
          auto payload = part.lookup(v);
          buf.assign(reinterpret_cast<const char*>(&v), 8);
          buf.append(reinterpret_cast<const char*>(payload->data()), k * 8);
          for (uint32_t epid : it->second) {
            add(KVKey(static_cast<int64_t>(epid)),
                std::as_bytes(std::span(buf.data(), buf.size())));
          }
        }
      };
      auto consume3 = [&](uint32_t r, auto& source, bool) {
        auto drain = [&](auto stream) {
          while (auto rec = stream.next()) {
            uint64_t v = load_u64(rec->value.data());
            auto& b = belief_cache[v];
            b.resize(k);
            std::memcpy(b.data(), rec->value.data() + 8, k * 8);
          }
        };
        if constexpr (std::is_same_v<std::decay_t<decltype(source)>,
                                     BaselineShuffle>) {
          drain(source.pass_stream(r));
        } else {
          drain(reduce_read_pass(ctx.pool(), source, r));
        }
      };
      detail::exchange(ctx, Scheme::pass_through, P, P, &splitters, feed3,
                       consume3);
    }
  }

  if (ctx.worker_id() == 0) {
    ctx.put_broadcast(1, routing.table_ref().offset);
    ctx.put_broadcast(2, iterations_run);
    ctx.put_broadcast(3, std::bit_cast<uint64_t>(final_delta));
  }
  detail::publish_store_checksum(ctx, routing, 0, P);
}

// Replays the stage-2 belief update from restored messages, multiplying each
// vertex's incoming messages in the exact order the shuffle delivered them,
// so resumed beliefs are bit-identical to the pre-crash live state.
inline std::vector<GlobalRef> replay_beliefs(
    Pool& pool, Heap& heap, const BPConfig& cfg, uint32_t P,
    const std::map<uint64_t, GlobalRef>& restored) {
  const uint32_t k = cfg.states;
  EdgeList graph = detail::bp_graph(cfg);
  std::unordered_map<uint64_t, std::vector<double>> incoming;
  for (uint32_t epid = 0; epid < P; ++epid) {
    StorePartition msgs(pool, restored.at(P + epid));
    for (uint64_t e = epid; e < graph.edges.size(); e += P) {
      auto [u, v] = graph.edges[e];
      auto payload = msgs.lookup(e);
      const double* m_uv = reinterpret_cast<const double*>(payload->data());
      const double* m_vu = m_uv + k;
      // Same per-edge emission order as the map side: to v, then to u.
      auto fold = [&](uint64_t w, const double* m) {
        auto it = incoming.try_emplace(w, std::vector<double>(k, 1.0)).first;
        for (uint32_t x = 0; x < k; ++x) it->second[x] *= m[x];
      };
      fold(v, m_uv);
      fold(u, m_vu);
    }
  }

  std::vector<GlobalRef> beliefs(P);
  for (uint32_t pid = 0; pid < P; ++pid) {
    std::vector<uint64_t> keys;
    for (uint64_t v = 0; v < cfg.vertices; ++v) {
      if (key_partition(v, P) == pid) keys.push_back(v);
    }
    std::vector<std::byte> payload(keys.size() * k * 8);
    std::vector<double> belief(k);
    for (size_t i = 0; i < keys.size(); ++i) {
      std::vector<double> phi = unary_potential(cfg.seed, keys[i], k);
      auto it = incoming.find(keys[i]);
      if (it == incoming.end()) {
        detail::normalize(phi);
        std::memcpy(payload.data() + i * k * 8, phi.data(), k * 8);
        continue;
      }
      for (uint32_t x = 0; x < k; ++x) belief[x] = phi[x] * it->second[x];
      detail::normalize(belief);
      std::memcpy(payload.data() + i * k * 8, belief.data(), k * 8);
    }
    AttributeSchema schema{{k * 8u}};
    beliefs[pid] = build_partition(pool, heap, pid, schema, keys, payload);
  }
  return beliefs;
}

inline BPResult run_bp(Pool& pool, const JobConfig& jc, const BPConfig& cfg,
                       bool resume = false) {
  detail::BPRuntime rt;
  std::optional<Heap> restore_heap;
  if (resume) {
    expect(cfg.checkpoint_every > 0, Errc::invalid_argument,
           "resume needs snapshots");
    restore_heap.emplace(pool);
    uint32_t P = jc.partitions;
    RestoreResult restored =
        restore(pool, *restore_heap, SnapshotStore{cfg.snapshot_dir},
                cfg.dataset_id, [&](uint64_t pid) {
                  return detail::bp_schema_of(pid, P, cfg.states);
                });
    StorePartition meta(pool, restored.by_id.at(2 * P));
    uint64_t done = load_u64(meta.lookup(0)->data());

    std::vector<GlobalRef> beliefs =
        replay_beliefs(pool, *restore_heap, cfg, P, restored.by_id);
    std::vector<GlobalRef> all_refs(2 * P + 1);
    for (uint32_t pid = 0; pid < P; ++pid) {
      all_refs[pid] = beliefs[pid];
      all_refs[P + pid] = restored.by_id.at(P + pid);
    }
    all_refs[2 * P] = restored.by_id.at(2 * P);
    RoutingTable routing = build_routing_table(pool, *restore_heap, all_refs);

    rt.resumed = true;
    rt.routing = routing.table_ref();
    rt.start_iteration = done;
  }

  BPResult result;
  JobOutput out = run_job(pool, jc, [&, rt](WorkerContext& ctx) {
    bp_program(ctx, cfg, rt);
  });
  result.job = out;
  result.routing = GlobalRef{out.broadcasts[1]};
  result.iterations = out.broadcasts[2];
  result.final_delta = std::bit_cast<double>(out.broadcasts[3]);
  return result;
}

// Driver-side read of the final beliefs, by vertex id.
inline std::vector<std::vector<double>> read_beliefs(Pool& pool,
                                                     GlobalRef routing_ref,
                                                     uint64_t n, uint32_t k) {
  RoutingTable routing(pool, routing_ref);
  uint32_t P = static_cast<uint32_t>(routing.partition_count() / 2);
  std::vector<std::vector<double>> beliefs(n, std::vector<double>(k));
  for (uint64_t v = 0; v < n; ++v) {
    StorePartition part = routing.partition(key_partition(v, P));
    auto payload = part.lookup(v);
    expect(payload.has_value(), Errc::key_absent, "vertex missing");
    std::memcpy(beliefs[v].data(), payload->data(), k * 8);
  }
  return beliefs;
}

// Exact marginals by enumeration over k^n assignments; BP on a tree must
// match these.
inline std::vector<std::vector<double>> bp_exact_marginals(const EdgeList& g,
                                                           uint32_t k,
                                                           uint64_t seed) {
  uint64_t n = g.num_vertices;
  std::vector<std::vector<double>> phi(n);
  for (uint64_t v = 0; v < n; ++v) phi[v] = unary_potential(seed, v, k);
  std::vector<double> psi = pairwise_potential(seed, k);

  std::vector<std::vector<double>> marginal(n, std::vector<double>(k, 0.0));
  std::vector<uint32_t> x(n, 0);
  while (true) {
    double w = 1.0;
    for (uint64_t v = 0; v < n; ++v) w *= phi[v][x[v]];
    for (auto& [u, v] : g.edges) w *= psi[x[u] * k + x[v]];
    for (uint64_t v = 0; v < n; ++v) marginal[v][x[v]] += w;
    uint64_t i = 0;
    while (i < n && ++x[i] == k) {
      x[i] = 0;
      ++i;
    }
    if (i == n) break;
  }
  for (uint64_t v = 0; v < n; ++v) detail::normalize(marginal[v]);
  return marginal;
}

}  // namespace sharkle
