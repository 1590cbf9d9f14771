// Minimal 8-bit RGB PNG writer.
#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "unigen/image.hpp"

namespace unigen {

namespace detail {

inline void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

inline void png_chunk(std::vector<unsigned char>& out, const char* type, const std::vector<unsigned char>& data) {
  put_be32(out, std::uint32_t(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + start, uInt(out.size() - start));
  put_be32(out, std::uint32_t(crc));
}

}  // namespace detail

/// Pixels are clamped to [0,1] and rounded to 8 bits. Filter type 0 on every
/// row, default zlib level; the bytes depend only on the pixels.
inline std::vector<unsigned char> encode_png(const Image& img) {
  if (img.channels != 3) throw std::invalid_argument("encode_png: expected 3 channels, got " + std::to_string(img.channels));
  std::vector<unsigned char> raw;
  raw.reserve(std::size_t(img.height) * (std::size_t(img.width) * 3 + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) raw.push_back(static_cast<unsigned char>(std::lround(std::clamp(img.at(y, x, c), 0.0, 1.0) * 255.0)));
  }
  uLongf zlen = compressBound(uLong(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), uLong(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK) throw std::runtime_error("encode_png: zlib failure");
  z.resize(zlen);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<unsigned char> ihdr;
  detail::put_be32(ihdr, std::uint32_t(img.width));
  detail::put_be32(ihdr, std::uint32_t(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit, truecolor, deflate, no filter, no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image file " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw std::runtime_error("I/O error writing image file " + path.string());
}

}  // namespace unigen
