// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstring>
#include <fstream>
#include <random>

#include "sharkle/pool.hpp"
#include "test_util.hpp"

using namespace sharkle;
using sharkle::test::ScopedPath;
using sharkle::test::fresh_path;

namespace {

PoolConfig small_config(const std::filesystem::path& p) {
  PoolConfig cfg;
  cfg.path = p;
  cfg.zone_size = 1 << 20;
  cfg.zone_count = 64;
  cfg.page_size = 4096;
  cfg.node_count = 1;
  return cfg;
}

}  // namespace

TEST_CASE("create_pool sizes the file and zeroes zone ownership") {
  ScopedPath path(fresh_path("pool_create"));
  Pool pool = create_pool(small_config(path));
  CHECK(pool.region_size() == 64ull << 20);
  CHECK(pool.zone_count() == 64);
  CHECK(std::filesystem::file_size(path.get()) ==
        4096 + (64ull << 20));
  // All zones unowned.
  for (uint64_t z = 0; z < pool.zone_count(); ++z) {
    CHECK(load_u64(pool.zone_base(z)) == 0);
  }
}

TEST_CASE("create_pool accepts a minimal one-zone pool") {
  ScopedPath path(fresh_path("pool_min"));
  PoolConfig cfg;
  cfg.path = path;
  cfg.zone_size = 4096;
  cfg.zone_count = 1;
  Pool pool = create_pool(cfg);
  CHECK(pool.region_size() == 4096);
}

TEST_CASE("create_pool rejects invalid configs") {
  PoolConfig cfg;
  cfg.path = fresh_path("pool_bad");
  cfg.zone_size = 3000;  // not a power of two
  CHECK_THROWS_AS(create_pool(cfg), Error);
  try {
    create_pool(cfg);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::invalid_config);
  }
  cfg.zone_size = 1 << 20;
  cfg.zone_count = 0;
  CHECK_THROWS_AS(create_pool(cfg), Error);
}

TEST_CASE("open_pool round-trips the header config") {
  ScopedPath path(fresh_path("pool_open"));
  PoolConfig cfg = small_config(path);
  cfg.node_count = 4;
  { Pool pool = create_pool(cfg); }
  Pool pool = open_pool(path);
  CHECK(pool.zone_size() == cfg.zone_size);
  CHECK(pool.zone_count() == cfg.zone_count);
  CHECK(pool.page_size() == cfg.page_size);
  CHECK(pool.node_count() == cfg.node_count);
  // Round-robin node stamps.
  for (uint64_t z = 0; z < pool.zone_count(); ++z) {
    CHECK(load_u64(pool.zone_base(z) + 8) == z % 4);
  }
}

TEST_CASE("open_pool rejects garbage and truncated files") {
  ScopedPath path(fresh_path("pool_garbage"));
  {
    std::ofstream f(path.get(), std::ios::binary);
    f << "this is not a pool file at all";
  }
  CHECK_THROWS_AS(open_pool(path), Error);

  ScopedPath tpath(fresh_path("pool_trunc"));
  { Pool pool = create_pool(small_config(tpath)); }
  std::filesystem::resize_file(tpath.get(), 8192);
  try {
    open_pool(tpath);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK((e.code() == Errc::bad_magic || e.code() == Errc::io_failure));
  }
}

TEST_CASE("open_pool rejects a wrong format version") {
  ScopedPath path(fresh_path("pool_version"));
  { Pool pool = create_pool(small_config(path)); }
  {
    std::fstream f(path.get(), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    uint64_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  try {
    open_pool(path);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::version_mismatch);
  }
}

TEST_CASE("resolve and to_ref are inverse over random refs") {
  ScopedPath path(fresh_path("pool_roundtrip"));
  Pool pool = create_pool(small_config(path));
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<uint64_t> dist(1, pool.region_size() - 1);
  for (int i = 0; i < 1000; ++i) {
    GlobalRef ref{dist(rng)};
    CHECK(pool.to_ref(pool.resolve(ref)) == ref);
  }
  // Boundaries: smallest valid offset and last byte of the last zone.
  CHECK(pool.to_ref(pool.resolve(GlobalRef{1})) == GlobalRef{1});
  GlobalRef last{pool.region_size() - 1};
  CHECK(pool.to_ref(pool.resolve(last)) == last);
}

TEST_CASE("resolve rejects NULL and out-of-range refs") {
  ScopedPath path(fresh_path("pool_null"));
  Pool pool = create_pool(small_config(path));
  CHECK_THROWS_AS(pool.resolve(kNullRef), Error);
  CHECK_THROWS_AS(pool.resolve(GlobalRef{pool.region_size()}), Error);
  try {
    pool.resolve(kNullRef);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::out_of_range);
  }
}

TEST_CASE("to_ref rejects addresses outside the pool") {
  ScopedPath path(fresh_path("pool_outside"));
  Pool pool = create_pool(small_config(path));
  int local = 0;
  try {
    pool.to_ref(&local);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::not_in_pool);
  }
}

TEST_CASE("bytes written through one process are visible in another") {
  ScopedPath path(fresh_path("pool_xproc"));
  Pool pool = create_pool(small_config(path));
  GlobalRef ref{4096};
  const char msg[] = "written by parent";
  std::memcpy(pool.resolve(ref), msg, sizeof(msg));

  pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    // Fresh mapping in the child, not the inherited one.
    try {
      Pool other = open_pool(path);
      const std::byte* p = other.resolve(ref);
      bool same = std::memcmp(p, msg, sizeof(msg)) == 0;
      const char reply[] = "child says hi";
      std::memcpy(other.resolve(GlobalRef{8192}), reply, sizeof(reply));
      _exit(same ? 0 : 1);
    } catch (...) {
      _exit(2);
    }
  }
  int status = 0;
  waitpid(pid, &status, 0);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(std::memcmp(pool.resolve(GlobalRef{8192}), "child says hi", 14) == 0);
}
