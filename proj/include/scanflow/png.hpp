#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "scanflow/error.hpp"

namespace scanflow {

/// Encode an 8-bit grayscale PNG from floats in [0,1], each pixel drawn
/// as a zoom x zoom block.
inline std::string encode_png_gray(const float* pixels, std::size_t h, std::size_t w,
                                   std::size_t zoom = 1) {
  const std::size_t H = h * zoom, W = w * zoom;
  std::string raw;
  raw.reserve(H * (W + 1));
  for (std::size_t y = 0; y < H; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < W; ++x) {
      float v = std::clamp(pixels[(y / zoom) * w + x / zoom], 0.0f, 1.0f);
      raw.push_back(static_cast<char>(std::lround(v * 255.0f)));
    }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                Z_BEST_SPEED) != Z_OK)
    throw IoError("png compression failed");
  z.resize(zlen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  auto be32 = [](std::string& s, std::uint32_t v) {
    for (int k = 24; k >= 0; k -= 8) s.push_back(static_cast<char>((v >> k) & 0xff));
  };
  auto chunk = [&](const char* type, const std::string& data) {
    be32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    be32(out, static_cast<std::uint32_t>(
                  crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
  };
  std::string ihdr;
  be32(ihdr, static_cast<std::uint32_t>(W));
  be32(ihdr, static_cast<std::uint32_t>(H));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit, grayscale, deflate, no filter, no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", "");
  return out;
}

}  // namespace scanflow
