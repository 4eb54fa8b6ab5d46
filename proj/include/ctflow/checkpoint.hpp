#pragma once

// INNC checkpoint container.
//
//   bytes 0..3   magic "INNC"
//   bytes 4..7   format version, u32 little-endian
//   bytes 8..11  header length in bytes, u32 little-endian
//   header       UTF-8 JSON object; "tensor_index" lists {name, shape, dtype,
//                byte_offset} sorted by name, offsets relative to the payload
//   payload      little-endian f32 data of every tensor, in index order
//
// The header also records the payload size and its FNV-1a 64 checksum so a
// damaged payload is rejected on load.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "ctflow/binary_io.hpp"
#include "ctflow/model.hpp"
#include "json.hpp"

namespace ctflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;
};

std::string encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Architecture fields (arch, channels, blocks, r, s_max, ...) plus every parameter.
CheckpointData model_to_checkpoint(const ModelBundle<float>& model);
/// Rebuilds the bundle described by the header and loads its parameters.
ModelBundle<float> model_from_checkpoint(const CheckpointData& data);

}  // namespace ctflow
