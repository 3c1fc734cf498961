#pragma once

// Single-file model checkpoint (layout in docs/checkpoint_format.md):
//   "BVTC" | u16 version | u32 config length | config JSON
//   u32 tensor count | per tensor: u16 name length, name, u8 rank, u32 dims[rank], f32 values
//   u32 substrate count | per substrate: u16 name length, name, u32 byte length, packed substrate
// All integers little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "bvit/vit.hpp"

namespace bvit {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Malformed file, unsupported version, or a config that does not match.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(ViTModel<T>& model);

// Builds a model from the embedded config and restores every tensor.
template <typename T>
ViTModel<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes);

// Restores into an existing model; its config must equal the stored one.
template <typename T>
void restore_checkpoint(std::span<const std::uint8_t> bytes, ViTModel<T>& model);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ViTModel<T>& model);

template <typename T>
ViTModel<T> load_checkpoint(const std::filesystem::path& path);

ViTConfig checkpoint_config(std::span<const std::uint8_t> bytes);

}  // namespace bvit
