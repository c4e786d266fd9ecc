// Copyright (c) the Sharkle authors.
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <condition_variable>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "sharkle/store.hpp"

namespace sharkle {

// Versioned snapshots of store partitions. checkpoint_partitions copies the
// record arrays synchronously (the caller sits at a stage barrier), then a
// background writer persists the copies so block I/O stays off the critical
// path. Restart picks the most recent version that every partition of the
// dataset has a complete, checksum-valid snapshot for.
//
// On-disk naming: <root>/<dataset>/<partition>/<version>.payload and
// .manifest. Payload = raw record-array bytes. Manifest (little-endian):
// magic "SHKLSNAP", dataset_id, partition_id, version, payload_length,
// fnv1a64 checksum, 64-bit each. A manifest is renamed into place only
// after its payload is durable; its presence marks the snapshot complete.

// Test hook: invoked between durability-protocol steps in the background
// writer so crash tests can kill the process at a precise point. Stages:
// "payload_tmp", "payload_renamed", "manifest_tmp", "manifest_renamed".
inline void (*g_snapshot_step_hook)(const char* stage) = nullptr;

// Test hook: runs between the snapshot memcpy and the concurrent-writer
// check, letting tests violate the barrier contract deterministically.
inline void (*g_snapshot_copy_hook)(uint64_t partition_id) = nullptr;

namespace detail {
inline void snapshot_step(const char* stage) {
  if (g_snapshot_step_hook != nullptr) g_snapshot_step_hook(stage);
}
inline constexpr char kSnapMagic[8] = {'S', 'H', 'K', 'L', 'S', 'N', 'A', 'P'};
}  // namespace detail

struct SnapshotStore {
  std::filesystem::path root;

  std::filesystem::path dataset_dir(uint64_t dataset) const {
    return root / std::to_string(dataset);
  }
  std::filesystem::path partition_dir(uint64_t dataset, uint64_t pid) const {
    return dataset_dir(dataset) / std::to_string(pid);
  }
  std::filesystem::path payload_path(uint64_t dataset, uint64_t pid,
                                     uint64_t version) const {
    return partition_dir(dataset, pid) / (std::to_string(version) + ".payload");
  }
  std::filesystem::path manifest_path(uint64_t dataset, uint64_t pid,
                                      uint64_t version) const {
    return partition_dir(dataset, pid) / (std::to_string(version) + ".manifest");
  }
};

struct SnapshotManifest {
  uint64_t dataset_id = 0;
  uint64_t partition_id = 0;
  uint64_t version = 0;
  uint64_t payload_length = 0;
  uint64_t checksum = 0;
};

namespace detail {

inline void write_file_durable(const std::filesystem::path& path,
                               std::span<const std::byte> bytes) {
  int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) {
    Errc code = errno == ENOSPC ? Errc::disk_full : Errc::io_failure;
    raise(code, "open " + path.string() + ": " + strerror(errno));
  }
  size_t off = 0;
  while (off < bytes.size()) {
    ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n < 0) {
      int e = errno;
      ::close(fd);
      raise(e == ENOSPC ? Errc::disk_full : Errc::io_failure,
            "write " + path.string() + ": " + strerror(e));
    }
    off += static_cast<size_t>(n);
  }
  if (::fsync(fd) != 0) {
    int e = errno;
    ::close(fd);
    raise(Errc::io_failure, "fsync " + path.string() + ": " + strerror(e));
  }
  ::close(fd);
}

// Commit step. A rename is immediately visible to any process scanning the
// store, which is the failure model here (worker/driver death, not power
// loss); the payload itself was fsynced before the rename.
inline void rename_into_place(const std::filesystem::path& from,
                              const std::filesystem::path& to) {
  if (::rename(from.c_str(), to.c_str()) != 0) {
    raise(Errc::io_failure,
          "rename " + from.string() + " -> " + to.string() + ": " +
              strerror(errno));
  }
}

inline std::vector<std::byte> encode_manifest(const SnapshotManifest& m) {
  std::vector<std::byte> out(48);
  std::memcpy(out.data(), kSnapMagic, 8);
  store_u64(out.data() + 8, m.dataset_id);
  store_u64(out.data() + 16, m.partition_id);
  store_u64(out.data() + 24, m.version);
  store_u64(out.data() + 32, m.payload_length);
  store_u64(out.data() + 40, m.checksum);
  return out;
}

inline bool decode_manifest(const std::filesystem::path& path,
                            SnapshotManifest& out) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) return false;
  unsigned char buf[48];
  size_t n = std::fread(buf, 1, sizeof(buf), f);
  std::fclose(f);
  if (n != sizeof(buf)) return false;
  if (std::memcmp(buf, kSnapMagic, 8) != 0) return false;
  out.dataset_id = load_u64(buf + 8);
  out.partition_id = load_u64(buf + 16);
  out.version = load_u64(buf + 24);
  out.payload_length = load_u64(buf + 32);
  out.checksum = load_u64(buf + 40);
  return true;
}

}  // namespace detail

// Drives checkpoints for the partitions a worker owns. Construct once per
// worker before the first checkpoint; versions continue from whatever is
// already on disk for the dataset.
class CheckpointManager {
 public:
  CheckpointManager(Pool& pool, SnapshotStore store, uint64_t dataset_id)
      : pool_(&pool), store_(std::move(store)), dataset_id_(dataset_id) {
    next_version_ = 1 + max_version_on_disk();
  }

  ~CheckpointManager() {
    if (writer_.joinable()) writer_.join();
  }
  CheckpointManager(const CheckpointManager&) = delete;
  CheckpointManager& operator=(const CheckpointManager&) = delete;

  uint64_t dataset_id() const { return dataset_id_; }
  const SnapshotStore& store() const { return store_; }

  // Synchronously copies each partition's record array, hands the copies to
  // a background writer, and returns the version they will persist under.
  // The copy goes straight into a mapping of the payload tmp file (one pass
  // over the bytes; the writer only syncs and renames); when the tmp file
  // cannot be set up, a memory buffer stands in and the writer surfaces the
  // error at await_durable. Caller contract: no writer is active on these
  // partitions, checked by re-reading every record's version word after the
  // copy.
  uint64_t checkpoint_partitions(std::span<const GlobalRef> partitions) {
    wait_for_writer();  // at most one outstanding checkpoint

    uint64_t version = next_version_++;
    std::vector<PartitionCopy> copies;
    copies.reserve(partitions.size());
    for (GlobalRef ref : partitions) {
      StorePartition part(*pool_, ref);
      auto live = part.record_array_bytes();
      PartitionCopy copy;
      copy.partition_id = part.partition_id();
      copy.length = live.size();
      map_tmp_payload(copy, version);
      std::byte* dest = copy.map;
      if (dest != nullptr) {
        std::memcpy(dest, live.data(), live.size());
      } else {
        if (!spare_buffers_.empty()) {
          copy.bytes = std::move(spare_buffers_.back());
          spare_buffers_.pop_back();
        }
        copy.bytes.assign(live.begin(), live.end());
        dest = copy.bytes.data();
      }
      if (g_snapshot_copy_hook != nullptr) g_snapshot_copy_hook(copy.partition_id);
      uint32_t stride = part.schema().stride();
      for (uint64_t i = 0; i < part.entry_count(); ++i) {
        uint64_t copied = load_u64(dest + (i + 1) * stride - 8);
        if (part.version_at(i) != copied) {
          copy.close();
          raise(Errc::concurrent_writer,
                "partition " + std::to_string(copy.partition_id) +
                    " changed during the snapshot copy");
        }
      }
      copies.push_back(std::move(copy));
    }

    {
      std::lock_guard lock(mu_);
      last_assigned_ = version;
    }
    writer_ = std::thread([this, version, copies = std::move(copies)]() mutable {
      persist(version, std::move(copies));
    });
    return version;
  }

  // Blocks until `version` is durable; surfaces asynchronous write errors.
  void await_durable(uint64_t version) {
    {
      std::lock_guard lock(mu_);
      if (version == 0 || version > last_assigned_) {
        raise(Errc::unknown_version,
              "version " + std::to_string(version) + " was never assigned");
      }
    }
    wait_for_writer();
    std::lock_guard lock(mu_);
    auto it = errors_.find(version);
    if (it != errors_.end()) std::rethrow_exception(it->second);
    if (!completed_.contains(version)) {
      raise(Errc::io_failure,
            "version " + std::to_string(version) + " did not complete");
    }
  }

 private:
  struct PartitionCopy {
    uint64_t partition_id = 0;
    uint64_t length = 0;
    std::vector<std::byte> bytes;    // fallback buffer when not mapped
    std::filesystem::path tmp_path;  // set when mapped
    int fd = -1;
    std::byte* map = nullptr;

    PartitionCopy() = default;
    PartitionCopy(PartitionCopy&& o) noexcept { *this = std::move(o); }
    PartitionCopy& operator=(PartitionCopy&& o) noexcept {
      if (this != &o) {
        close();
        partition_id = o.partition_id;
        length = o.length;
        bytes = std::move(o.bytes);
        tmp_path = std::move(o.tmp_path);
        fd = std::exchange(o.fd, -1);
        map = std::exchange(o.map, nullptr);
      }
      return *this;
    }
    PartitionCopy(const PartitionCopy&) = delete;
    PartitionCopy& operator=(const PartitionCopy&) = delete;
    ~PartitionCopy() { close(); }

    void close() {
      if (map != nullptr) {
        ::munmap(map, length);
        map = nullptr;
      }
      if (fd >= 0) {
        ::close(fd);
        fd = -1;
      }
    }
  };

  // Best effort: create and map <payload>.tmp so the snapshot memcpy lands
  // in the file directly. Failure leaves the copy unmapped.
  void map_tmp_payload(PartitionCopy& copy, uint64_t version) {
    if (copy.length == 0) return;
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::path dir = store_.partition_dir(dataset_id_, copy.partition_id);
    fs::create_directories(dir, ec);
    if (ec) return;
    fs::path tmp = store_.payload_path(dataset_id_, copy.partition_id, version);
    tmp += ".tmp";
    int fd = ::open(tmp.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) return;
    if (::ftruncate(fd, static_cast<off_t>(copy.length)) != 0) {
      ::close(fd);
      ::unlink(tmp.c_str());
      return;
    }
    void* map = ::mmap(nullptr, copy.length, PROT_READ | PROT_WRITE, MAP_SHARED,
                       fd, 0);
    if (map == MAP_FAILED) {
      ::close(fd);
      ::unlink(tmp.c_str());
      return;
    }
    copy.tmp_path = std::move(tmp);
    copy.fd = fd;
    copy.map = static_cast<std::byte*>(map);
  }

  void wait_for_writer() {
    if (writer_.joinable()) writer_.join();
  }

  uint64_t max_version_on_disk() const {
    namespace fs = std::filesystem;
    uint64_t max_version = 0;
    std::error_code ec;
    fs::path dir = store_.dataset_dir(dataset_id_);
    if (!fs::is_directory(dir, ec)) return 0;
    for (const auto& part : fs::directory_iterator(dir, ec)) {
      for (const auto& entry : fs::directory_iterator(part.path(), ec)) {
        if (entry.path().extension() != ".manifest") continue;
        SnapshotManifest m;
        if (detail::decode_manifest(entry.path(), m)) {
          max_version = std::max(max_version, m.version);
        }
      }
    }
    return max_version;
  }

  void persist(uint64_t version, std::vector<PartitionCopy> copies) {
    try {
      for (PartitionCopy& copy : copies) {
        namespace fs = std::filesystem;
        fs::path payload = store_.payload_path(dataset_id_, copy.partition_id,
                                               version);
        uint64_t checksum = 0;
        if (copy.map != nullptr) {
          checksum = fnv1a64(copy.map, copy.length);
          if (::fsync(copy.fd) != 0) {
            int e = errno;
            raise(e == ENOSPC ? Errc::disk_full : Errc::io_failure,
                  "fsync " + copy.tmp_path.string() + ": " + strerror(e));
          }
          detail::snapshot_step("payload_tmp");
          copy.close();
          detail::rename_into_place(copy.tmp_path, payload);
        } else {
          std::error_code ec;
          fs::path dir = store_.partition_dir(dataset_id_, copy.partition_id);
          fs::create_directories(dir, ec);
          if (ec) {
            raise(Errc::io_failure,
                  "create " + dir.string() + ": " + ec.message());
          }
          checksum = fnv1a64(copy.bytes.data(), copy.bytes.size());
          fs::path payload_tmp = payload;
          payload_tmp += ".tmp";
          detail::write_file_durable(payload_tmp, copy.bytes);
          detail::snapshot_step("payload_tmp");
          detail::rename_into_place(payload_tmp, payload);
        }
        detail::snapshot_step("payload_renamed");

        SnapshotManifest m;
        m.dataset_id = dataset_id_;
        m.partition_id = copy.partition_id;
        m.version = version;
        m.payload_length = copy.length;
        m.checksum = checksum;
        fs::path manifest = store_.manifest_path(dataset_id_, copy.partition_id,
                                                 version);
        fs::path manifest_tmp = manifest;
        manifest_tmp += ".tmp";
        detail::write_file_durable(manifest_tmp, detail::encode_manifest(m));
        detail::snapshot_step("manifest_tmp");
        detail::rename_into_place(manifest_tmp, manifest);
        detail::snapshot_step("manifest_renamed");
      }
      std::lock_guard lock(mu_);
      completed_.insert(version);
      for (PartitionCopy& copy : copies) {
        if (copy.bytes.capacity() > 0) {
          spare_buffers_.push_back(std::move(copy.bytes));
        }
      }
    } catch (...) {
      std::lock_guard lock(mu_);
      errors_[version] = std::current_exception();
    }
  }

  Pool* pool_;
  SnapshotStore store_;
  uint64_t dataset_id_;
  uint64_t next_version_ = 1;
  std::thread writer_;
  std::mutex mu_;
  uint64_t last_assigned_ = 0;
  std::set<uint64_t> completed_;
  std::map<uint64_t, std::exception_ptr> errors_;
  // Copy buffers recycled between checkpoints (touched once per call after
  // wait_for_writer, so no lock is needed on the take side).
  std::vector<std::vector<std::byte>> spare_buffers_;
};

struct RestoreResult {
  std::vector<GlobalRef> partitions;     // by id, when ids are dense from 0
  std::map<uint64_t, GlobalRef> by_id;   // always populated
  RoutingTable routing;                  // built only for dense id sets
  uint64_t version = 0;
};

// Loads the most recent snapshot version complete and checksum-valid for
// every partition of the dataset, rebuilds the partitions in the pool, and
// rebuilds the routing table. Corrupt versions are skipped, not fatal.
// `schema_of` supplies each partition's schema (datasets may mix layouts).
template <typename SchemaOf>
  requires std::invocable<SchemaOf&, uint64_t>
RestoreResult restore(Pool& pool, Heap& heap, const SnapshotStore& store,
                      uint64_t dataset_id, SchemaOf&& schema_of) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::path dir = store.dataset_dir(dataset_id);
  if (!fs::is_directory(dir, ec)) {
    raise(Errc::no_common_version,
          "no snapshots for dataset " + std::to_string(dataset_id));
  }

  // Enumerate (partition -> complete versions) from the manifests.
  std::map<uint64_t, std::set<uint64_t>> versions_by_partition;
  for (const auto& part : fs::directory_iterator(dir, ec)) {
    uint64_t pid = 0;
    try {
      pid = std::stoull(part.path().filename().string());
    } catch (...) {
      continue;
    }
    auto& versions = versions_by_partition[pid];
    for (const auto& entry : fs::directory_iterator(part.path(), ec)) {
      if (entry.path().extension() != ".manifest") continue;
      SnapshotManifest m;
      if (detail::decode_manifest(entry.path(), m) &&
          m.dataset_id == dataset_id && m.partition_id == pid) {
        versions.insert(m.version);
      }
    }
  }
  if (versions_by_partition.empty()) {
    raise(Errc::no_common_version,
          "no snapshots for dataset " + std::to_string(dataset_id));
  }

  // Candidate versions: present for every partition, newest first.
  std::set<uint64_t> common = versions_by_partition.begin()->second;
  for (const auto& [pid, versions] : versions_by_partition) {
    std::set<uint64_t> kept;
    std::set_intersection(common.begin(), common.end(), versions.begin(),
                          versions.end(), std::inserter(kept, kept.begin()));
    common = std::move(kept);
  }

  for (auto it = common.rbegin(); it != common.rend(); ++it) {
    uint64_t version = *it;
    std::vector<std::pair<uint64_t, std::vector<std::byte>>> images;
    bool valid = true;
    for (const auto& [pid, _] : versions_by_partition) {
      SnapshotManifest m;
      if (!detail::decode_manifest(store.manifest_path(dataset_id, pid, version),
                                   m)) {
        valid = false;
        break;
      }
      std::FILE* f =
          std::fopen(store.payload_path(dataset_id, pid, version).c_str(), "rb");
      if (f == nullptr) {
        valid = false;
        break;
      }
      std::vector<std::byte> bytes(m.payload_length);
      size_t n = std::fread(bytes.data(), 1, bytes.size(), f);
      bool eof = std::fgetc(f) == EOF;
      std::fclose(f);
      if (n != bytes.size() || !eof ||
          fnv1a64(bytes.data(), bytes.size()) != m.checksum) {
        valid = false;  // ChecksumMismatch: exclude this version, try older
        break;
      }
      images.emplace_back(pid, std::move(bytes));
    }
    if (!valid) continue;

    RestoreResult result;
    result.version = version;
    bool dense = true;
    for (auto& [pid, bytes] : images) {
      result.by_id[pid] = load_partition_image(pool, heap, pid, schema_of(pid), bytes);
      if (pid >= images.size()) dense = false;
    }
    if (dense) {
      result.partitions.resize(images.size());
      for (auto& [pid, ref] : result.by_id) result.partitions[pid] = ref;
      result.routing = build_routing_table(pool, heap, result.partitions);
    }
    return result;
  }
  raise(Errc::no_common_version,
        "no version is complete for all " +
            std::to_string(versions_by_partition.size()) + " partitions");
}

inline RestoreResult restore(Pool& pool, Heap& heap, const SnapshotStore& store,
                             uint64_t dataset_id,
                             const AttributeSchema& schema) {
  return restore(pool, heap, store, dataset_id,
                 [&](uint64_t) { return schema; });
}

}  // namespace sharkle
