#include "pond/container.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "pond/errors.hpp"

namespace pond {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_container(const Magic& magic, const Json& header,
                                           std::span<const double> payload) {
  const std::string head = header.dump();
  std::vector<std::uint8_t> out(magic.begin(), magic.end());
  put_u32(out, static_cast<std::uint32_t>(head.size()));
  out.insert(out.end(), head.begin(), head.end());
  const std::size_t payload_start = out.size();
  for (double v : payload) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  const auto crc = crc32_of(std::span(out).subspan(payload_start));
  put_u32(out, crc);
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes, const Magic& magic,
                           const std::function<std::size_t(const Json&)>& payload_doubles) {
  if (bytes.size() < magic.size() || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0)
    throw BadMagicError("expected " + std::string(magic.data(), magic.size() - 1));
  std::size_t pos = magic.size();
  if (bytes.size() < pos + 4) throw TruncatedError("header length missing");
  const std::uint32_t head_len = get_u32(bytes.data() + pos);
  pos += 4;
  if (bytes.size() < pos + head_len) throw TruncatedError("header cut short");
  Container c;
  try {
    c.header = Json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + head_len));
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed header: ") + e.what());
  }
  pos += head_len;

  std::size_t count = 0;
  try {
    count = payload_doubles(c.header);
  } catch (const Json::exception& e) {
    throw IoError(std::string("header is missing fields: ") + e.what());
  }
  const std::size_t need = count * 8 + 4;
  if (bytes.size() - pos < need) throw TruncatedError("payload cut short");
  if (bytes.size() - pos > need) throw IoError("trailing bytes after checksum");

  const auto payload_bytes = bytes.subspan(pos, count * 8);
  const std::uint32_t stored = get_u32(bytes.data() + pos + count * 8);
  if (crc32_of(payload_bytes) != stored) throw ChecksumError("payload CRC-32 differs from trailer");

  c.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(payload_bytes[i * 8 + b]) << (8 * b);
    c.payload[i] = std::bit_cast<double>(bits);
  }
  return c;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace pond
