// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sharkle {

// Pool file and bucket layouts are little-endian on disk and in shared
// memory; native stores must match so atomics and the wire format agree.
static_assert(std::endian::native == std::endian::little,
              "sharkle requires a little-endian platform");

enum class Errc {
  invalid_config,
  invalid_argument,
  io_failure,
  bad_magic,
  version_mismatch,
  out_of_range,
  not_in_pool,
  pool_exhausted,
  size_too_large,
  not_owner,
  double_free,
  duplicate_map_write,
  stage_incomplete,
  bad_reducer_id,
  unsorted_input,
  duplicate_key,
  key_absent,
  width_mismatch,
  duplicate_partition_id,
  disk_full,
  concurrent_writer,
  unknown_version,
  no_common_version,
  checksum_mismatch,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_config: return "invalid_config";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::io_failure: return "io_failure";
    case Errc::bad_magic: return "bad_magic";
    case Errc::version_mismatch: return "version_mismatch";
    case Errc::out_of_range: return "out_of_range";
    case Errc::not_in_pool: return "not_in_pool";
    case Errc::pool_exhausted: return "pool_exhausted";
    case Errc::size_too_large: return "size_too_large";
    case Errc::not_owner: return "not_owner";
    case Errc::double_free: return "double_free";
    case Errc::duplicate_map_write: return "duplicate_map_write";
    case Errc::stage_incomplete: return "stage_incomplete";
    case Errc::bad_reducer_id: return "bad_reducer_id";
    case Errc::unsorted_input: return "unsorted_input";
    case Errc::duplicate_key: return "duplicate_key";
    case Errc::key_absent: return "key_absent";
    case Errc::width_mismatch: return "width_mismatch";
    case Errc::duplicate_partition_id: return "duplicate_partition_id";
    case Errc::disk_full: return "disk_full";
    case Errc::concurrent_writer: return "concurrent_writer";
    case Errc::unknown_version: return "unknown_version";
    case Errc::no_common_version: return "no_common_version";
    case Errc::checksum_mismatch: return "checksum_mismatch";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) {
  throw Error(code, what);
}

inline void expect(bool ok, Errc code, const std::string& what) {
  if (!ok) raise(code, what);
}

// --- unaligned little-endian field access -----------------------------------

inline void store_u64(void* p, uint64_t v) { std::memcpy(p, &v, 8); }
inline void store_u32(void* p, uint32_t v) { std::memcpy(p, &v, 4); }
inline uint64_t load_u64(const void* p) {
  uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}
inline uint32_t load_u32(const void* p) {
  uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

// --- hashing -----------------------------------------------------------------

// FNV-1a, 64-bit. Used for snapshot checksums and result digests.
inline uint64_t fnv1a64(const void* data, size_t len,
                        uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// 64-bit multiplicative hash (Fibonacci constant, xor-folded). Drives the
// default shuffle partitioner and the store's hash index, so any change is
// a format change.
inline uint64_t mix64(uint64_t x) {
  x *= 0x9e3779b97f4a7c15ull;
  x ^= x >> 32;
  x *= 0x9e3779b97f4a7c15ull;
  x ^= x >> 29;
  return x;
}

inline uint64_t hash_bytes(const void* data, size_t len) {
  return mix64(fnv1a64(data, len));
}

// --- process-local reusable buffers ------------------------------------------

// Map and baseline tasks stage records in local buffers before touching the
// pool; tasks run back to back, so buffers are recycled instead of returned
// to the OS. os_allocated_bytes counts capacity ever requested from the
// process heap, which stays flat once the first task has warmed the pool.
class BufferPool {
 public:
  // One pool per thread: worker threads stage and recycle independently.
  static BufferPool& instance() {
    static thread_local BufferPool p;
    return p;
  }

  std::vector<std::byte> acquire(size_t min_capacity) {
    for (size_t i = 0; i < free_.size(); ++i) {
      if (free_[i].capacity() >= min_capacity) {
        std::vector<std::byte> out = std::move(free_[i]);
        free_.erase(free_.begin() + static_cast<ptrdiff_t>(i));
        out.clear();
        return out;
      }
    }
    std::vector<std::byte> out;
    out.reserve(min_capacity);
    os_allocated_bytes_ += out.capacity();
    return out;
  }

  void release(std::vector<std::byte>&& buf) {
    if (buf.capacity() == 0) return;
    // Grown buffers return more capacity than they took out.
    free_.push_back(std::move(buf));
    free_.back().clear();
  }

  void note_growth(size_t before_cap, size_t after_cap) {
    if (after_cap > before_cap) os_allocated_bytes_ += after_cap - before_cap;
  }

  uint64_t os_allocated_bytes() const { return os_allocated_bytes_; }

  void reset() {
    free_.clear();
    os_allocated_bytes_ = 0;
  }

 private:
  std::vector<std::vector<std::byte>> free_;
  uint64_t os_allocated_bytes_ = 0;
};

// RAII lease on a pooled buffer.
class PooledBuffer {
 public:
  explicit PooledBuffer(size_t min_capacity)
      : buf_(BufferPool::instance().acquire(min_capacity)) {}
  ~PooledBuffer() { BufferPool::instance().release(std::move(buf_)); }
  PooledBuffer(const PooledBuffer&) = delete;
  PooledBuffer& operator=(const PooledBuffer&) = delete;
  PooledBuffer(PooledBuffer&& other) noexcept : buf_(std::move(other.buf_)) {
    other.buf_ = {};
  }
  PooledBuffer& operator=(PooledBuffer&& other) noexcept {
    if (this != &other) {
      BufferPool::instance().release(std::move(buf_));
      buf_ = std::move(other.buf_);
      other.buf_ = {};
    }
    return *this;
  }

  std::vector<std::byte>& bytes() { return buf_; }

  void append(const void* data, size_t len) {
    size_t before = buf_.capacity();
    const auto* p = static_cast<const std::byte*>(data);
    buf_.insert(buf_.end(), p, p + len);
    BufferPool::instance().note_growth(before, buf_.capacity());
  }

 private:
  std::vector<std::byte> buf_;
};

}  // namespace sharkle
