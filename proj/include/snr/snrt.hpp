#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "snr/tensor.hpp"

namespace snr {

// "SNRT v1" tensor file: magic "SNRT", u8 version=1, u8 dtype (0 = f32),
// u16 rank, rank x u32 extents, then row-major payload. All integers and
// the payload are little-endian.
struct SnrtTensor {
  std::vector<Index> extents;
  std::vector<float> payload;

  Index count() const {
    Index n = 1;
    for (Index e : extents) n *= e;
    return n;
  }
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_snrt(const SnrtTensor& t) {
  if (t.extents.size() > 0xffff) throw std::invalid_argument("snrt: rank too large");
  if (t.count() != static_cast<Index>(t.payload.size()))
    throw std::invalid_argument("snrt: payload size does not match extents");
  std::string out = "SNRT";
  out.push_back(1);  // version
  out.push_back(0);  // dtype f32
  detail::put_u16(out, static_cast<std::uint16_t>(t.extents.size()));
  for (Index e : t.extents) {
    if (e < 0 || e > 0xffffffffll) throw std::invalid_argument("snrt: extent out of range");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (float v : t.payload) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    detail::put_u32(out, bits);
  }
  return out;
}

inline SnrtTensor decode_snrt(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || std::memcmp(p, "SNRT", 4) != 0) throw std::runtime_error("snrt: bad magic");
  if (p[4] != 1) throw std::runtime_error("snrt: unsupported version");
  if (p[5] != 0) throw std::runtime_error("snrt: unsupported dtype");
  std::uint16_t rank = detail::get_u16(p + 6);
  std::size_t need = 8 + 4u * rank;
  if (bytes.size() < need) throw std::runtime_error("snrt: truncated header");
  SnrtTensor t;
  Index n = 1;
  for (int i = 0; i < rank; ++i) {
    Index e = detail::get_u32(p + 8 + 4 * i);
    t.extents.push_back(e);
    n *= e;
  }
  if (bytes.size() != need + 4u * static_cast<std::size_t>(n)) throw std::runtime_error("snrt: truncated payload");
  t.payload.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::uint32_t bits = detail::get_u32(p + need + 4 * static_cast<std::size_t>(i));
    t.payload[static_cast<std::size_t>(i)] = std::bit_cast<float>(bits);
  }
  return t;
}

inline void write_snrt(const std::filesystem::path& path, const SnrtTensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("snrt: cannot open for writing: " + path.string());
  std::string bytes = encode_snrt(t);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("snrt: write failed: " + path.string());
}

inline SnrtTensor read_snrt(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("snrt: cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_snrt(bytes);
}

template <typename S>
void write_snrt(const std::filesystem::path& path, const Tensor4<S>& t) {
  SnrtTensor out;
  out.extents = {t.n, t.c, t.h, t.w};
  out.payload.resize(static_cast<std::size_t>(t.count()));
  for (Index i = 0; i < t.count(); ++i) out.payload[static_cast<std::size_t>(i)] = static_cast<float>(t.data[i]);
  write_snrt(path, out);
}

template <typename S>
void write_snrt(const std::filesystem::path& path, const Shape& shape, const ArrayX<S>& data) {
  SnrtTensor out;
  for (int i = 0; i < shape.rank; ++i) out.extents.push_back(shape.dims[static_cast<std::size_t>(i)]);
  if (shape.rank == 0) out.extents = {};  // scalar: rank 0, one payload element
  out.payload.resize(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) out.payload[static_cast<std::size_t>(i)] = static_cast<float>(data[i]);
  write_snrt(path, out);
}

template <typename S>
Tensor4<S> read_snrt_tensor4(const std::filesystem::path& path) {
  SnrtTensor raw = read_snrt(path);
  if (raw.extents.size() != 4) throw std::runtime_error("snrt: expected rank 4 in " + path.string());
  Tensor4<S> t(raw.extents[0], raw.extents[1], raw.extents[2], raw.extents[3]);
  for (Index i = 0; i < t.count(); ++i) t.data[i] = static_cast<S>(raw.payload[static_cast<std::size_t>(i)]);
  return t;
}

}  // namespace snr
