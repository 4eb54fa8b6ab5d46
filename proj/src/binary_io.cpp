#include "ctflow/binary_io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "ctflow/errors.hpp"

namespace ctflow {

namespace binary {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

float get_f32(std::string_view in, std::size_t offset) { return std::bit_cast<float>(get_u32(in, offset)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path.string());
}

std::string frame(std::string_view magic, std::uint32_t version, const nlohmann::json& header,
                  std::string_view payload) {
  const std::string header_text = header.dump();
  std::string out;
  out.reserve(12 + header_text.size() + payload.size());
  out.append(magic);
  put_u32(out, version);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out.append(header_text);
  out.append(payload);
  return out;
}

Unframed unframe(std::string_view bytes, std::string_view magic, std::uint32_t version) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != magic) {
    throw FormatError(FormatErrorKind::kBadMagic, "not an " + std::string(magic) + " file");
  }
  if (bytes.size() < 12) throw FormatError(FormatErrorKind::kTruncated, "file ends inside the fixed prefix");
  const std::uint32_t found = get_u32(bytes, 4);
  if (found != version) {
    throw FormatError(FormatErrorKind::kUnsupportedVersion,
                      std::string(magic) + " version " + std::to_string(found) + ", expected " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() - 12 < header_len) {
    throw FormatError(FormatErrorKind::kTruncated, "header declares " + std::to_string(header_len) +
                                                       " bytes but only " + std::to_string(bytes.size() - 12) +
                                                       " remain");
  }
  Unframed out;
  try {
    out.header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedHeader, e.what());
  }
  if (!out.header.is_object()) throw FormatError(FormatErrorKind::kMalformedHeader, "header is not a JSON object");
  out.payload = bytes.substr(12 + header_len);
  return out;
}

}  // namespace binary

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ctflow
