#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hicl/tensor.hpp"

namespace hicl {

/// Flat parameter archive.
///
/// Layout, all integers little-endian:
///   "HICLCKPT"            8-byte magic
///   u32 version           currently 1
///   u64 header_len, bytes free-form header (JSON config record)
///   u64 record_count
///   per record: u32 name_len, name bytes, u32 rank, u64 dims[rank],
///               f64 payload[product(dims)] as IEEE-754 little-endian
struct CheckpointRecord {
  std::string name;
  Tensor tensor;

  bool operator==(const CheckpointRecord&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string header;
  std::vector<CheckpointRecord> records;

  const Tensor& find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hicl
