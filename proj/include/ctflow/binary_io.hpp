#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

namespace ctflow {

std::uint64_t fnv1a64(std::string_view bytes);

// Little-endian binary helpers shared by the file formats.
namespace binary {
void put_u32(std::string& out, std::uint32_t v);
void put_f32(std::string& out, float v);
std::uint32_t get_u32(std::string_view in, std::size_t offset);
float get_f32(std::string_view in, std::size_t offset);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Shared container layout: 4-byte magic, u32 LE version, u32 LE header
// length, JSON header, raw payload.
std::string frame(std::string_view magic, std::uint32_t version, const nlohmann::json& header,
                  std::string_view payload);

struct Unframed {
  nlohmann::json header;
  std::string_view payload;
};

/// Checks magic, prefix length, version and header JSON in that order.
Unframed unframe(std::string_view bytes, std::string_view magic, std::uint32_t version);

}  // namespace binary

}  // namespace ctflow
