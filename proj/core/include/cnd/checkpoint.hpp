#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace cnd::io {

/// Current checkpoint container version. Bumped on any layout change.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// In-memory view of a checkpoint: free-form metadata plus named tensors.
///
/// On disk the container is
///   8 bytes  magic "CNDCKPT\0"
///   4 bytes  little-endian uint32 version
///   8 bytes  little-endian uint64 header length H
///   H bytes  UTF-8 JSON header {kind, version, meta, tensors: [{name, dtype, shape, offset, nbytes}]}
///   ...      tensor payloads, little-endian, row-major, at the listed offsets
/// See docs/formats.md.
struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  NamedTensors tensors;

  [[nodiscard]] const torch::Tensor& at(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
  /// All tensors whose names start with `prefix`, with the prefix stripped.
  [[nodiscard]] NamedTensors with_prefix(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
[[nodiscard]] Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters followed by buffers, in registration order, detached copies.
[[nodiscard]] NamedTensors module_state(const torch::nn::Module& module,
                                        const std::string& prefix = "");

/// Copies tensors into a module's parameters and buffers by name.
/// Every parameter and buffer must be present with a matching shape.
void load_module_state(torch::nn::Module& module, const NamedTensors& state);

/// Serialized bytes of a tensor list in checkpoint payload order.
[[nodiscard]] std::vector<std::uint8_t> serialize_tensors(const NamedTensors& tensors);

/// Hex SHA-256 of a byte range / file / module state.
[[nodiscard]] std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
[[nodiscard]] std::string sha256_file(const std::filesystem::path& path);
[[nodiscard]] std::string state_hash(const torch::nn::Module& module);

/// Endianness helpers shared by every binary blob writer.
void write_f32_le(std::ostream& out, const float* data, std::size_t count);
void read_f32_le(std::istream& in, float* data, std::size_t count);

}  // namespace cnd::io
