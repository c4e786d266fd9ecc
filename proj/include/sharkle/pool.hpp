// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>

#include "sharkle/common.hpp"

namespace sharkle {

// A file-backed memory pool mapped by any number of processes. Data is
// addressed by 64-bit offsets from the data-region base so references stay
// valid across processes that map the file at different virtual addresses.
//
// File layout:
//   [0..8)    magic "SHKLPOOL"
//   [8..16)   format_version = 1, little-endian
//   [16..56)  zone_size, zone_count, page_size, node_count, next_generation
//             (64-bit little-endian each)
//   header padded to one page; data region of zone_size * zone_count bytes
//   follows, split into zones.
//
// Bytes [56..72) of the header page are runtime scratch (live/peak byte
// counters), not part of the persistent format.

struct GlobalRef {
  uint64_t offset = 0;

  constexpr bool is_null() const { return offset == 0; }
  explicit constexpr operator bool() const { return offset != 0; }
  friend constexpr bool operator==(GlobalRef, GlobalRef) = default;
  friend constexpr auto operator<=>(GlobalRef, GlobalRef) = default;
};

inline constexpr GlobalRef kNullRef{};

struct PoolConfig {
  std::filesystem::path path;
  uint64_t zone_size = 64ull << 20;
  uint64_t zone_count = 16;
  uint64_t page_size = 4096;
  uint64_t node_count = 1;  // emulated NUMA nodes; zones assigned round-robin
};

namespace detail {
inline constexpr char kPoolMagic[8] = {'S', 'H', 'K', 'L', 'P', 'O', 'O', 'L'};
inline constexpr uint64_t kPoolFormatVersion = 1;
inline constexpr uint64_t kOffMagic = 0;
inline constexpr uint64_t kOffVersion = 8;
inline constexpr uint64_t kOffZoneSize = 16;
inline constexpr uint64_t kOffZoneCount = 24;
inline constexpr uint64_t kOffPageSize = 32;
inline constexpr uint64_t kOffNodeCount = 40;
inline constexpr uint64_t kOffNextGeneration = 48;
inline constexpr uint64_t kOffLiveBytes = 56;   // scratch
inline constexpr uint64_t kOffPeakBytes = 64;   // scratch
}  // namespace detail

class Pool {
 public:
  Pool() = default;
  Pool(const Pool&) = delete;
  Pool& operator=(const Pool&) = delete;
  Pool(Pool&& other) noexcept { *this = std::move(other); }
  Pool& operator=(Pool&& other) noexcept {
    if (this != &other) {
      unmap();
      base_ = std::exchange(other.base_, nullptr);
      file_size_ = std::exchange(other.file_size_, 0);
      cfg_ = other.cfg_;
    }
    return *this;
  }
  ~Pool() { unmap(); }

  static Pool create(const PoolConfig& cfg) {
    validate(cfg);
    std::error_code ec;
    if (std::filesystem::exists(cfg.path, ec) &&
        std::filesystem::file_size(cfg.path, ec) > 0) {
      raise(Errc::io_failure,
            "pool file already exists and is not empty: " + cfg.path.string());
    }
    uint64_t total = cfg.page_size + cfg.zone_size * cfg.zone_count;
    int fd = ::open(cfg.path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd < 0) raise(Errc::io_failure, "open: " + std::string(strerror(errno)));
    if (::ftruncate(fd, static_cast<off_t>(total)) != 0) {
      int e = errno;
      ::close(fd);
      raise(Errc::io_failure, "ftruncate: " + std::string(strerror(e)));
    }
    Pool pool = map(fd, total);
    ::close(fd);
    pool.cfg_ = cfg;

    std::byte* h = pool.base_;
    std::memcpy(h + detail::kOffMagic, detail::kPoolMagic, 8);
    store_u64(h + detail::kOffVersion, detail::kPoolFormatVersion);
    store_u64(h + detail::kOffZoneSize, cfg.zone_size);
    store_u64(h + detail::kOffZoneCount, cfg.zone_count);
    store_u64(h + detail::kOffPageSize, cfg.page_size);
    store_u64(h + detail::kOffNodeCount, cfg.node_count);
    store_u64(h + detail::kOffNextGeneration, 1);  // generation 0 = unowned
    // Zone metadata starts zeroed (fresh file). Stamp each zone's home node.
    for (uint64_t z = 0; z < cfg.zone_count; ++z) {
      store_u64(pool.zone_base(z) + 8, z % cfg.node_count);
    }
    return pool;
  }

  static Pool open(const std::filesystem::path& path) {
    int fd = ::open(path.c_str(), O_RDWR);
    if (fd < 0) raise(Errc::io_failure, "open: " + std::string(strerror(errno)));
    struct stat st{};
    if (::fstat(fd, &st) != 0 || st.st_size < 56) {
      ::close(fd);
      raise(Errc::bad_magic, "file too short to be a pool: " + path.string());
    }
    Pool pool = map(fd, static_cast<uint64_t>(st.st_size));
    ::close(fd);

    const std::byte* h = pool.base_;
    if (std::memcmp(h + detail::kOffMagic, detail::kPoolMagic, 8) != 0) {
      raise(Errc::bad_magic, "not a sharkle pool: " + path.string());
    }
    uint64_t version = load_u64(h + detail::kOffVersion);
    if (version != detail::kPoolFormatVersion) {
      raise(Errc::version_mismatch,
            "pool format version " + std::to_string(version));
    }
    PoolConfig cfg;
    cfg.path = path;
    cfg.zone_size = load_u64(h + detail::kOffZoneSize);
    cfg.zone_count = load_u64(h + detail::kOffZoneCount);
    cfg.page_size = load_u64(h + detail::kOffPageSize);
    cfg.node_count = load_u64(h + detail::kOffNodeCount);
    validate(cfg);
    uint64_t expected = cfg.page_size + cfg.zone_size * cfg.zone_count;
    if (pool.file_size_ != expected) {
      raise(Errc::io_failure, "pool file truncated: have " +
                                  std::to_string(pool.file_size_) + " want " +
                                  std::to_string(expected));
    }
    pool.cfg_ = cfg;
    return pool;
  }

  const PoolConfig& config() const { return cfg_; }
  uint64_t zone_size() const { return cfg_.zone_size; }
  uint64_t zone_count() const { return cfg_.zone_count; }
  uint64_t page_size() const { return cfg_.page_size; }
  uint64_t node_count() const { return cfg_.node_count; }
  uint64_t region_size() const { return cfg_.zone_size * cfg_.zone_count; }

  std::byte* data_base() const { return base_ + cfg_.page_size; }
  std::byte* zone_base(uint64_t zone) const {
    return data_base() + zone * cfg_.zone_size;
  }

  // Offset -> address. NULL and anything outside the data region is refused.
  std::byte* resolve(GlobalRef ref) const {
    if (ref.is_null() || ref.offset >= region_size()) {
      raise(Errc::out_of_range,
            "ref offset " + std::to_string(ref.offset) + " outside data region");
    }
    return data_base() + ref.offset;
  }

  // Address -> offset, stable across processes.
  GlobalRef to_ref(const void* p) const {
    const auto* b = static_cast<const std::byte*>(p);
    if (b < data_base() || b >= data_base() + region_size()) {
      raise(Errc::not_in_pool, "address not inside pool data region");
    }
    return GlobalRef{static_cast<uint64_t>(b - data_base())};
  }

  template <typename T>
  T* as(GlobalRef ref) const {
    return reinterpret_cast<T*>(resolve(ref));
  }

  std::atomic_ref<uint64_t> next_generation_word() const {
    return std::atomic_ref<uint64_t>(
        *reinterpret_cast<uint64_t*>(base_ + detail::kOffNextGeneration));
  }

  // Runtime allocation stats, shared by all processes mapping the pool.
  void add_live_bytes(int64_t delta) const {
    auto live = std::atomic_ref<uint64_t>(
        *reinterpret_cast<uint64_t*>(base_ + detail::kOffLiveBytes));
    uint64_t now = live.fetch_add(static_cast<uint64_t>(delta),
                                  std::memory_order_relaxed) +
                   static_cast<uint64_t>(delta);
    auto peak = std::atomic_ref<uint64_t>(
        *reinterpret_cast<uint64_t*>(base_ + detail::kOffPeakBytes));
    uint64_t seen = peak.load(std::memory_order_relaxed);
    while (now > seen &&
           !peak.compare_exchange_weak(seen, now, std::memory_order_relaxed)) {
    }
  }
  uint64_t live_bytes() const {
    return std::atomic_ref<uint64_t>(
               *reinterpret_cast<uint64_t*>(base_ + detail::kOffLiveBytes))
        .load(std::memory_order_relaxed);
  }
  uint64_t peak_live_bytes() const {
    return std::atomic_ref<uint64_t>(
               *reinterpret_cast<uint64_t*>(base_ + detail::kOffPeakBytes))
        .load(std::memory_order_relaxed);
  }

  bool is_open() const { return base_ != nullptr; }

 private:
  static void validate(const PoolConfig& cfg) {
    expect(cfg.page_size >= 512 && std::has_single_bit(cfg.page_size),
           Errc::invalid_config, "page_size must be a power of two >= 512");
    expect(cfg.zone_size > 0 && std::has_single_bit(cfg.zone_size),
           Errc::invalid_config, "zone_size must be a power of two");
    expect(cfg.zone_size % cfg.page_size == 0, Errc::invalid_config,
           "zone_size must be a multiple of page_size");
    expect(cfg.zone_count > 0, Errc::invalid_config, "zone_count must be > 0");
    expect(cfg.node_count >= 1, Errc::invalid_config, "node_count must be >= 1");
  }

  static Pool map(int fd, uint64_t size) {
    void* base =
        ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    if (base == MAP_FAILED) {
      raise(Errc::io_failure, "mmap: " + std::string(strerror(errno)));
    }
    Pool pool;
    pool.base_ = static_cast<std::byte*>(base);
    pool.file_size_ = size;
    return pool;
  }

  void unmap() {
    if (base_ != nullptr) {
      ::munmap(base_, file_size_);
      base_ = nullptr;
      file_size_ = 0;
    }
  }

  std::byte* base_ = nullptr;
  uint64_t file_size_ = 0;
  PoolConfig cfg_;
};

inline Pool create_pool(const PoolConfig& cfg) { return Pool::create(cfg); }
inline Pool open_pool(const std::filesystem::path& path) {
  return Pool::open(path);
}

}  // namespace sharkle
