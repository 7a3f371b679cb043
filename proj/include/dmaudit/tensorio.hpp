#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dmaudit/numerics.hpp"

namespace dmaudit {

// Self-describing binary tensor container used for model checkpoints, LoRA
// deltas and rendered image packs. Layout (all integers little-endian):
//
//   magic "DMTC0001" (8 bytes)
//   u64 header length, then that many bytes of UTF-8 JSON
//   u64 tensor count
//   per tensor: u64 name length + name bytes
//               u64 rank, rank * u64 dims
//               prod(dims) * f64 raw values
//
// Values are written as raw IEEE-754 bit patterns, so save/load round-trips
// bit-exactly.
struct TensorFile {
  std::string header_json;  // canonical serialized header
  std::vector<std::pair<std::string, Matrix>> tensors;

  nlohmann::json header() const;
};

inline constexpr int kTensorFormatVersion = 1;

void save_tensor_file(const std::string& path, const nlohmann::json& header,
                      const std::vector<std::pair<std::string, Matrix>>& tensors);

// Throws FormatError on bad magic, truncation or version mismatch. Either
// returns a fully parsed file or throws; no partial state.
TensorFile load_tensor_file(const std::string& path);

// FNV-1a over a file's bytes; used for cache keys and manifest hashes.
std::uint64_t hash_file(const std::string& path);
std::uint64_t hash_bytes(const void* data, std::size_t len, std::uint64_t seed = 14695981039346656037ull);
std::string hash_hex(std::uint64_t h);

}  // namespace dmaudit
