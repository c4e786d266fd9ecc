// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include "sharkle/shuffle.hpp"
#include "test_util.hpp"

using namespace sharkle;
using sharkle::test::ScopedPath;
using sharkle::test::fresh_path;

namespace {

PoolConfig cfg(const std::filesystem::path& p) {
  PoolConfig c;
  c.path = p;
  c.zone_size = 4 << 20;
  c.zone_count = 64;
  return c;
}

[[maybe_unused]] std::span<const std::byte> bytes_of(const std::string& s) {
  return std::as_bytes(std::span(s.data(), s.size()));
}

std::string to_string(std::span<const std::byte> v) {
  return std::string(reinterpret_cast<const char*>(v.data()), v.size());
}

std::vector<Record> random_records(uint64_t seed, size_t n,
                                   uint64_t key_space = ~0ull) {
  std::mt19937_64 rng(seed);
  std::vector<Record> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    int64_t key = static_cast<int64_t>(rng() % key_space);
    std::string value(8, '\0');
    uint64_t v = rng();
    std::memcpy(value.data(), &v, 8);
    out.push_back(Record{KVKey(key), std::move(value)});
  }
  return out;
}

// Multiset of (canonical key, value) pairs; the ground truth for
// multiset-preservation checks.
std::map<std::pair<std::string, std::string>, int> multiset_of(
    std::span<const Record> records) {
  std::map<std::pair<std::string, std::string>, int> m;
  for (const Record& r : records) {
    ++m[{r.key.canonical(), r.value}];
  }
  return m;
}

std::vector<std::vector<Record>> split_by_map(std::vector<Record> all,
                                              uint32_t num_maps) {
  std::vector<std::vector<Record>> per_map(num_maps);
  for (size_t i = 0; i < all.size(); ++i) {
    per_map[i % num_maps].push_back(std::move(all[i]));
  }
  return per_map;
}

}  // namespace

TEST_CASE("create_session zeroes the registry; bad shapes are rejected") {
  ScopedPath path(fresh_path("shuffle_create"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::sort_merge, 8, 8);
  for (uint32_t m = 0; m < 8; ++m) {
    CHECK(load_u64(pool.resolve(GlobalRef{s.registry.offset + m * 16})) == 0);
  }
  ShuffleSession tiny = create_session(pool, heap, Scheme::pass_through, 1, 1);
  CHECK(tiny.num_reduces == 1);
  CHECK_THROWS_AS(create_session(pool, heap, Scheme::sort_merge, 1, 0), Error);
}

TEST_CASE("range partitioner routes records to forced reducers") {
  ScopedPath path(fresh_path("shuffle_route"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  std::vector<KVKey> splitters{KVKey(int64_t{3})};
  ShuffleSession s =
      create_session(pool, heap, Scheme::pass_through, 1, 2, &splitters);

  Heap writer = create_heap(pool);
  std::vector<Record> recs;
  for (int64_t k : {1, 2, 3, 4}) recs.push_back(Record{KVKey(k), "v"});
  map_write(pool, s, writer, 0, recs);

  auto keys_of = [&](uint32_t r) {
    std::vector<int64_t> keys;
    auto stream = reduce_read_pass(pool, s, r);
    while (auto rec = stream.next()) keys.push_back(rec->key.as_int());
    return keys;
  };
  CHECK(keys_of(0) == std::vector<int64_t>{1, 2});
  CHECK(keys_of(1) == std::vector<int64_t>{3, 4});
}

TEST_CASE("hash partitioner sends each key to exactly one reducer") {
  ScopedPath path(fresh_path("shuffle_hash"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::pass_through, 2, 4);
  auto part = session_partitioner(pool, s);

  auto per_map = split_by_map(random_records(11, 2000, 500), 2);
  for (uint32_t m = 0; m < 2; ++m) {
    Heap writer = create_heap(pool);
    map_write(pool, s, writer, m, per_map[m]);
  }
  for (uint32_t r = 0; r < 4; ++r) {
    auto stream = reduce_read_pass(pool, s, r);
    while (auto rec = stream.next()) {
      CHECK(part(rec->key) == r);
    }
  }
}

TEST_CASE("empty map publishes an index bucket with all-null chains") {
  ScopedPath path(fresh_path("shuffle_empty"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::sort_merge, 1, 3);
  GlobalRef index = map_write(pool, s, heap, 0, {});
  const std::byte* p = pool.resolve(index);
  CHECK(load_u64(p) == 0);  // map_id
  for (uint32_t r = 0; r < 3; ++r) {
    CHECK(load_u64(p + 8 + r * 16) == 0);
    CHECK(load_u64(p + 8 + r * 16 + 8) == 0);
    auto stream = reduce_read_sorted(pool, s, r);
    CHECK(!stream.next().has_value());
  }
}

TEST_CASE("duplicate map_write and early reduce_read are rejected") {
  ScopedPath path(fresh_path("shuffle_dup"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::sort_merge, 2, 2);
  std::vector<Record> recs{{KVKey(int64_t{1}), "x"}};
  map_write(pool, s, heap, 0, recs);
  try {
    map_write(pool, s, heap, 0, recs);
    FAIL("expected DuplicateMapWrite");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::duplicate_map_write);
  }
  // Map 1 has not written: stage incomplete.
  try {
    reduce_read_sorted(pool, s, 0);
    FAIL("expected StageIncomplete");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::stage_incomplete);
  }
  try {
    reduce_read_sorted(pool, s, 7);
    FAIL("expected BadReducerId");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::bad_reducer_id);
  }
}

TEST_CASE("sort-merge yields global key order with (map, input) tie-break") {
  ScopedPath path(fresh_path("shuffle_merge"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::sort_merge, 2, 1);
  std::vector<Record> m0{{KVKey(int64_t{3}), "a"}, {KVKey(int64_t{1}), "b"}};
  std::vector<Record> m1{{KVKey(int64_t{2}), "c"}, {KVKey(int64_t{1}), "d"}};
  map_write(pool, s, heap, 0, m0);
  map_write(pool, s, heap, 1, m1);

  auto stream = reduce_read_sorted(pool, s, 0);
  auto g1 = stream.next();
  REQUIRE(g1.has_value());
  CHECK(g1->key.as_int() == 1);
  REQUIRE(g1->values.size() == 2);
  CHECK(to_string(g1->values[0]) == "b");  // map 0 before map 1
  CHECK(to_string(g1->values[1]) == "d");
  auto g2 = stream.next();
  REQUIRE(g2.has_value());
  CHECK(g2->key.as_int() == 2);
  auto g3 = stream.next();
  REQUIRE(g3.has_value());
  CHECK(g3->key.as_int() == 3);
  CHECK(!stream.next().has_value());
}

TEST_CASE("pass-through concatenates maps in order, preserving input order") {
  ScopedPath path(fresh_path("shuffle_pass"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::pass_through, 2, 1);
  std::vector<Record> m0{{KVKey(int64_t{9}), "a"},
                         {KVKey(int64_t{5}), "b"},
                         {KVKey(int64_t{7}), "c"}};
  std::vector<Record> m1{{KVKey(int64_t{2}), "d"},
                         {KVKey(int64_t{8}), "e"},
                         {KVKey(int64_t{1}), "f"}};
  map_write(pool, s, heap, 0, m0);
  map_write(pool, s, heap, 1, m1);
  auto stream = reduce_read_pass(pool, s, 0);
  std::string order;
  while (auto rec = stream.next()) order += to_string(rec->value);
  CHECK(order == "abcdef");
}

TEST_CASE("hash-merge produces one group per distinct key, multisets equal") {
  ScopedPath path(fresh_path("shuffle_hashmerge"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::hash_merge, 4, 4);

  auto all = random_records(77, 10000, 100);  // exactly 100 distinct keys
  auto truth = multiset_of(all);
  std::set<std::string> distinct;
  for (const Record& r : all) distinct.insert(r.key.canonical());

  auto per_map = split_by_map(all, 4);
  for (uint32_t m = 0; m < 4; ++m) map_write(pool, s, heap, m, per_map[m]);

  size_t group_count = 0;
  std::map<std::pair<std::string, std::string>, int> seen;
  for (uint32_t r = 0; r < 4; ++r) {
    for (const Group& g : reduce_read_hashed(pool, s, r)) {
      ++group_count;
      for (auto v : g.values) ++seen[{g.key.canonical(), to_string(v)}];
    }
  }
  CHECK(group_count == distinct.size());
  CHECK(seen == truth);
}

TEST_CASE("multiset preservation over bucket-chain boundaries") {
  ScopedPath path(fresh_path("shuffle_multiset"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  // Large values force multiple buckets per chain.
  std::mt19937_64 rng(5);
  std::vector<Record> all;
  for (int i = 0; i < 2000; ++i) {
    std::string value(1024, static_cast<char>('a' + (i % 26)));
    all.push_back(Record{KVKey(static_cast<int64_t>(rng() % 4000)), value});
  }
  auto truth = multiset_of(all);

  ShuffleSession s = create_session(pool, heap, Scheme::sort_merge, 2, 2);
  auto per_map = split_by_map(all, 2);
  for (uint32_t m = 0; m < 2; ++m) map_write(pool, s, heap, m, per_map[m]);

  std::map<std::pair<std::string, std::string>, int> seen;
  int64_t prev_key = INT64_MIN;
  for (uint32_t r = 0; r < 2; ++r) {
    auto stream = reduce_read_sorted(pool, s, r);
    prev_key = INT64_MIN;
    while (auto g = stream.next()) {
      CHECK(g->key.as_int() >= prev_key);
      prev_key = g->key.as_int();
      for (auto v : g->values) ++seen[{g->key.canonical(), to_string(v)}];
    }
  }
  CHECK(seen == truth);
}

TEST_CASE("oversized records get their own buckets and survive intact") {
  ScopedPath path(fresh_path("shuffle_big"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::pass_through, 1, 1);
  std::string big(600 * 1024, 'Z');
  std::vector<Record> recs{{KVKey(int64_t{1}), "small"},
                           {KVKey(int64_t{2}), big},
                           {KVKey(int64_t{3}), "tail"}};
  map_write(pool, s, heap, 0, recs);
  auto stream = reduce_read_pass(pool, s, 0);
  auto a = stream.next();
  auto b = stream.next();
  auto c = stream.next();
  REQUIRE((a && b && c));
  CHECK(to_string(a->value) == "small");
  CHECK(to_string(b->value) == big);
  CHECK(to_string(c->value) == "tail");
  CHECK(!stream.next().has_value());
}

TEST_CASE("release_session returns pool usage to the pre-session level") {
  ScopedPath path(fresh_path("shuffle_release"));
  Pool pool = create_pool(cfg(path));
  Heap session_heap = create_heap(pool);
  uint64_t before = verify_pool(pool).total_live_bytes;

  ShuffleSession s = create_session(pool, session_heap, Scheme::sort_merge, 2, 2);
  {
    Heap w0 = create_heap(pool);
    Heap w1 = create_heap(pool);
    map_write(pool, s, w0, 0, random_records(3, 500, 100));
    map_write(pool, s, w1, 1, random_records(4, 500, 100));
  }
  CHECK(verify_pool(pool).total_live_bytes > before);

  release_session(pool, s);
  CHECK(verify_pool(pool).total_live_bytes == before);
  release_session(pool, s);  // no-op
  CHECK(verify_pool(pool).total_live_bytes == before);
}

TEST_CASE("reduce_read after release sees an incomplete stage") {
  ScopedPath path(fresh_path("shuffle_after_rel"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  ShuffleSession s = create_session(pool, heap, Scheme::sort_merge, 1, 1);
  ShuffleSession copy = s;  // what a straggling reducer process would hold
  map_write(pool, s, heap, 0, random_records(9, 10, 10));
  release_session(pool, s);
  try {
    reduce_read_sorted(pool, copy, 0);
    FAIL("expected StageIncomplete");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::stage_incomplete);
  }
}

TEST_CASE("baseline shuffle is stream-equivalent to the shared-memory path") {
  ScopedPath path(fresh_path("shuffle_diff"));
  Pool pool = create_pool(cfg(path));

  auto all = random_records(123, 5000, 700);
  const uint32_t M = 3, R = 4;
  auto per_map = split_by_map(all, M);

  for (Scheme scheme :
       {Scheme::sort_merge, Scheme::hash_merge, Scheme::pass_through}) {
    Heap heap = create_heap(pool);  // released with the session below
    ShuffleSession s = create_session(pool, heap, scheme, M, R);
    BaselineShuffle base(scheme, M, R, session_partitioner(pool, s));
    for (uint32_t m = 0; m < M; ++m) {
      Heap writer = create_heap(pool);
      map_write(pool, s, writer, m, per_map[m]);
      base.map_write(m, per_map[m]);
    }
    for (uint32_t r = 0; r < R; ++r) {
      if (scheme == Scheme::sort_merge) {
        auto sm = reduce_read_sorted(pool, s, r);
        auto bs = base.sorted_stream(r);
        while (true) {
          auto a = sm.next();
          auto b = bs.next();
          CHECK(a.has_value() == b.has_value());
          if (!a || !b) break;
          CHECK(a->key == b->key);
          REQUIRE(a->values.size() == b->values.size());
          for (size_t i = 0; i < a->values.size(); ++i) {
            CHECK(to_string(a->values[i]) == to_string(b->values[i]));
          }
        }
      } else if (scheme == Scheme::hash_merge) {
        auto ga = reduce_read_hashed(pool, s, r);
        auto gb = base.hashed_groups(r);
        REQUIRE(ga.size() == gb.size());
        for (size_t i = 0; i < ga.size(); ++i) {
          CHECK(ga[i].key == gb[i].key);
          REQUIRE(ga[i].values.size() == gb[i].values.size());
          for (size_t j = 0; j < ga[i].values.size(); ++j) {
            CHECK(to_string(ga[i].values[j]) == to_string(gb[i].values[j]));
          }
        }
      } else {
        auto sa = reduce_read_pass(pool, s, r);
        auto sb = base.pass_stream(r);
        while (true) {
          auto a = sa.next();
          auto b = sb.next();
          CHECK(a.has_value() == b.has_value());
          if (!a || !b) break;
          CHECK(a->key == b->key);
          CHECK(to_string(a->value) == to_string(b->value));
        }
      }
    }
    release_session(pool, s);
  }
}

TEST_CASE("baseline shuffle on empty input yields empty output") {
  BaselineShuffle base(Scheme::sort_merge, 2, 2,
                       LocalPartitioner::hashed(2));
  base.map_write(0, {});
  base.map_write(1, {});
  for (uint32_t r = 0; r < 2; ++r) {
    auto s = base.sorted_stream(r);
    CHECK(!s.next().has_value());
  }
}

TEST_CASE("range-partitioned sort yields a totally sorted concatenation") {
  ScopedPath path(fresh_path("shuffle_tera"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);

  auto all = random_records(55, 20000);
  const uint32_t M = 4, R = 4;
  auto splitters = sample_splitters(all, R);
  ShuffleSession s =
      create_session(pool, heap, Scheme::sort_merge, M, R, &splitters);
  auto per_map = split_by_map(all, M);
  for (uint32_t m = 0; m < M; ++m) map_write(pool, s, heap, m, per_map[m]);

  size_t total = 0;
  bool first = true;
  int64_t prev = 0;
  for (uint32_t r = 0; r < R; ++r) {
    auto stream = reduce_read_sorted(pool, s, r);
    while (auto g = stream.next()) {
      if (!first) CHECK(g->key.as_int() >= prev);
      prev = g->key.as_int();
      first = false;
      total += g->values.size();
    }
  }
  CHECK(total == all.size());
}

TEST_CASE("key/value staging buffers are pooled across sequential tasks") {
  ScopedPath path(fresh_path("shuffle_pooling"));
  Pool pool = create_pool(cfg(path));
  Heap heap = create_heap(pool);
  auto records = random_records(21, 5000, 1000);

  BufferPool::instance().reset();
  ShuffleSession s1 = create_session(pool, heap, Scheme::sort_merge, 8, 4);
  map_write(pool, s1, heap, 0, records);
  uint64_t after_first = BufferPool::instance().os_allocated_bytes();
  CHECK(after_first > 0);
  for (uint32_t m = 1; m < 8; ++m) {
    map_write(pool, s1, heap, m, records);
  }
  // Identical tasks reuse the first task's buffers: no further growth.
  CHECK(BufferPool::instance().os_allocated_bytes() == after_first);
}
