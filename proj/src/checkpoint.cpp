#include "ctflow/checkpoint.hpp"

#include <iomanip>
#include <sstream>

namespace ctflow {

namespace {

constexpr std::string_view kMagic = "INNC";

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

std::string encode_checkpoint(const CheckpointData& data) {
  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, tensor] : data.tensors) {  // std::map iterates sorted by name
    index.push_back({{"name", name}, {"shape", tensor.shape()}, {"dtype", "f32"}, {"byte_offset", payload.size()}});
    payload.reserve(payload.size() + 4 * tensor.numel());
    for (float v : tensor.data()) binary::put_f32(payload, v);
  }
  nlohmann::json header = data.meta;
  header["tensor_index"] = std::move(index);
  header["payload_bytes"] = payload.size();
  header["payload_checksum"] = hex64(fnv1a64(payload));
  return binary::frame(kMagic, kCheckpointVersion, header, payload);
}

CheckpointData decode_checkpoint(std::string_view bytes) {
  auto [header, payload] = binary::unframe(bytes, kMagic, kCheckpointVersion);
  if (!header.contains("tensor_index")) throw FormatError(FormatErrorKind::kMalformedHeader, "missing tensor_index");

  CheckpointData data;
  std::size_t expected = 0;
  try {
    for (const auto& entry : header.at("tensor_index")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("byte_offset").get<std::size_t>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError(FormatErrorKind::kMalformedHeader, "tensor " + name + " has unsupported dtype");
      }
      const std::size_t count = shape_numel(shape);
      if (offset != expected) {
        throw FormatError(FormatErrorKind::kMalformedHeader, "tensor " + name + " has a non-contiguous offset");
      }
      expected += 4 * count;
      if (expected > payload.size()) continue;  // reported below as a size mismatch
      Tensor<float> t(shape);
      for (std::size_t i = 0; i < count; ++i) t[i] = binary::get_f32(payload, offset + 4 * i);
      data.tensors.emplace(name, std::move(t));
    }
    if (expected != payload.size() || header.value("payload_bytes", expected) != payload.size()) {
      throw FormatError(FormatErrorKind::kPayloadSizeMismatch, "index describes " + std::to_string(expected) +
                                                                   " payload bytes, file holds " +
                                                                   std::to_string(payload.size()));
    }
    if (header.contains("payload_checksum") &&
        header.at("payload_checksum").get<std::string>() != hex64(fnv1a64(payload))) {
      throw FormatError(FormatErrorKind::kChecksumMismatch, "payload does not match the recorded checksum");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, e.what());
  }
  header.erase("tensor_index");
  header.erase("payload_bytes");
  header.erase("payload_checksum");
  data.meta = std::move(header);
  return data;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  binary::write_file(path, encode_checkpoint(data));
}

CheckpointData read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binary::read_file(path)); }

CheckpointData model_to_checkpoint(const ModelBundle<float>& model) {
  CheckpointData data;
  const ModelConfig& c = model.config;
  data.meta = {{"arch", to_string(model.arch)},
               {"channels", c.channels},
               {"blocks", c.blocks},
               {"r", c.unshuffle},
               {"s_max", c.s_max},
               {"growth", c.growth},
               {"dense_layers", c.dense_layers},
               {"leaky_slope", c.leaky_slope},
               {"baseline_depth", model.baseline_depth}};
  for (const auto& p : model.parameters()) data.tensors.emplace("param." + p.name, p.var.value());
  return data;
}

ModelBundle<float> model_from_checkpoint(const CheckpointData& data) {
  ModelConfig cfg;
  Arch arch;
  try {
    const auto& m = data.meta;
    arch = parse_arch(m.at("arch").get<std::string>());
    cfg.channels = m.at("channels").get<std::size_t>();
    cfg.blocks = m.at("blocks").get<std::size_t>();
    cfg.unshuffle = m.at("r").get<std::size_t>();
    cfg.s_max = m.at("s_max").get<double>();
    cfg.growth = m.value("growth", cfg.growth);
    cfg.dense_layers = m.value("dense_layers", cfg.dense_layers);
    cfg.leaky_slope = m.value("leaky_slope", cfg.leaky_slope);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, std::string("model fields: ") + e.what());
  }
  ModelBundle<float> model = build_model<float>(arch, cfg, 0);
  for (const auto& p : model.parameters()) {
    const auto it = data.tensors.find("param." + p.name);
    if (it == data.tensors.end()) {
      throw FormatError(FormatErrorKind::kMalformedHeader, "checkpoint lacks parameter " + p.name);
    }
    if (it->second.shape() != p.var.shape()) {
      throw FormatError(FormatErrorKind::kMalformedHeader, "parameter " + p.name + " has shape " +
                                                               shape_str(it->second.shape()) + ", model expects " +
                                                               shape_str(p.var.shape()));
    }
    Var<float>(p.var).mutable_value() = it->second;
  }
  return model;
}

}  // namespace ctflow
