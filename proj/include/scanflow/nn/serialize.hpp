#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "scanflow/nn/model.hpp"

namespace scanflow::nn {

// Model blob layout (all integers little-endian):
//   "SFNN"  u32 version=1  u32 header_len  header JSON {input_shape, arch}
//   u64 param_count  param_count x f32

inline constexpr std::string_view kModelMagic = "SFNN";
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::string_view in, std::size_t& off) {
  if (off + sizeof(U) > in.size()) throw FormatError("model blob truncated at byte " + std::to_string(off));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  off += sizeof(U);
  return static_cast<U>(v);
}

}  // namespace detail

inline std::string save_model(Sequential<float>& m) {
  std::string out(kModelMagic);
  detail::put_le<std::uint32_t>(out, kModelVersion);
  nlohmann::json header{{"input_shape", m.input_shape()}, {"arch", arch_to_json(m.arch())}};
  auto h = header.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  detail::put_le<std::uint64_t>(out, m.param_count());
  for (auto p : m.params())
    for (float v : p.value->vec()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

/// Parse a blob produced by save_model; `consumed` reports its length so
/// blobs can be concatenated.
inline Sequential<float> load_model(std::string_view blob, std::size_t* consumed = nullptr) {
  if (blob.substr(0, 4) != kModelMagic) throw FormatError("not a model blob");
  std::size_t off = 4;
  auto version = detail::get_le<std::uint32_t>(blob, off);
  if (version != kModelVersion) throw FormatError("unsupported model version " + std::to_string(version));
  auto hlen = detail::get_le<std::uint32_t>(blob, off);
  if (off + hlen > blob.size()) throw FormatError("model header truncated");
  auto header = nlohmann::json::parse(blob.substr(off, hlen), nullptr, false);
  if (header.is_discarded()) throw FormatError("model header is not JSON");
  off += hlen;
  Sequential<float> m(header.at("input_shape").get<Shape>(), arch_from_json(header.at("arch")), 0);
  auto count = detail::get_le<std::uint64_t>(blob, off);
  if (count != m.param_count()) throw FormatError("parameter count mismatch");
  for (auto p : m.params())
    for (auto& v : p.value->vec()) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(blob, off));
  if (consumed) *consumed = off;
  return m;
}

}  // namespace scanflow::nn
