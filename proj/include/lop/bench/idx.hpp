#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "lop/core/common.hpp"

namespace lop {

/// IDX element types, named by their magic-number code.
enum class IdxType : std::uint8_t { U8 = 0x08, I8 = 0x09, I16 = 0x0B, I32 = 0x0C, F32 = 0x0D, F64 = 0x0E };

inline int idx_width(IdxType t) {
  switch (t) {
    case IdxType::U8:
    case IdxType::I8: return 1;
    case IdxType::I16: return 2;
    case IdxType::I32:
    case IdxType::F32: return 4;
    case IdxType::F64: return 8;
  }
  return 0;
}

/// Dense array in IDX layout: big-endian, first dimension slowest.
struct IdxArray {
  IdxType type = IdxType::U8;
  std::vector<std::uint32_t> dims;
  std::vector<double> data;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline std::uint64_t read_be(const unsigned char* p, int width) {
  std::uint64_t v = 0;
  for (int k = 0; k < width; ++k) v = (v << 8) | p[k];
  return v;
}

inline void write_be(std::string& out, std::uint64_t v, int width) {
  for (int k = width - 1; k >= 0; --k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline double decode(IdxType t, std::uint64_t bits) {
  switch (t) {
    case IdxType::U8: return static_cast<double>(bits);
    case IdxType::I8: return static_cast<double>(static_cast<std::int8_t>(bits));
    case IdxType::I16: return static_cast<double>(static_cast<std::int16_t>(bits));
    case IdxType::I32: return static_cast<double>(static_cast<std::int32_t>(bits));
    case IdxType::F32: {
      const auto u = static_cast<std::uint32_t>(bits);
      float f;
      std::memcpy(&f, &u, sizeof f);
      return static_cast<double>(f);
    }
    case IdxType::F64: {
      double d;
      std::memcpy(&d, &bits, sizeof d);
      return d;
    }
  }
  return 0.0;
}

inline std::uint64_t encode(IdxType t, double v) {
  switch (t) {
    case IdxType::U8: return static_cast<std::uint8_t>(v);
    case IdxType::I8: return static_cast<std::uint8_t>(static_cast<std::int8_t>(v));
    case IdxType::I16: return static_cast<std::uint16_t>(static_cast<std::int16_t>(v));
    case IdxType::I32: return static_cast<std::uint32_t>(static_cast<std::int32_t>(v));
    case IdxType::F32: {
      const auto f = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &f, sizeof u);
      return u;
    }
    case IdxType::F64: {
      std::uint64_t u;
      std::memcpy(&u, &v, sizeof u);
      return u;
    }
  }
  return 0;
}

}  // namespace detail

inline IdxArray parse_idx(const std::string& bytes, const std::string& where = "idx") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || p[0] != 0 || p[1] != 0) throw ValidationError("bad IDX magic", where);
  IdxArray a;
  switch (p[2]) {
    case 0x08: case 0x09: case 0x0B: case 0x0C: case 0x0D: case 0x0E: a.type = static_cast<IdxType>(p[2]); break;
    default: throw ValidationError("unknown IDX element type", where);
  }
  const int rank = p[3];
  std::size_t off = 4;
  if (bytes.size() < off + 4u * static_cast<std::size_t>(rank)) throw ValidationError("truncated IDX header", where);
  for (int d = 0; d < rank; ++d, off += 4) a.dims.push_back(static_cast<std::uint32_t>(detail::read_be(p + off, 4)));
  const int w = idx_width(a.type);
  const std::size_t n = a.count();
  if (bytes.size() != off + n * static_cast<std::size_t>(w)) throw ValidationError("IDX payload size does not match its dimensions", where);
  a.data.resize(n);
  for (std::size_t k = 0; k < n; ++k, off += static_cast<std::size_t>(w)) a.data[k] = detail::decode(a.type, detail::read_be(p + off, w));
  return a;
}

inline std::string serialize_idx(const IdxArray& a) {
  if (a.data.size() != a.count()) throw ValidationError("IDX data length does not match its dimensions", "idx");
  std::string out{'\0', '\0', static_cast<char>(a.type), static_cast<char>(a.dims.size())};
  for (auto d : a.dims) detail::write_be(out, d, 4);
  const int w = idx_width(a.type);
  for (double v : a.data) detail::write_be(out, detail::encode(a.type, v), w);
  return out;
}

inline IdxArray read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open IDX file", path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes, path);
}

inline void write_idx(const std::string& path, const IdxArray& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write IDX file", path);
  const std::string bytes = serialize_idx(a);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// First dimension as samples, the rest flattened row-major as features,
/// every value multiplied by `scale` (1/255 for 8-bit images).
inline Matrix idx_to_matrix(const IdxArray& a, double scale = 1.0) {
  if (a.dims.empty()) throw ValidationError("IDX array has no dimensions", "idx");
  const Eigen::Index n = a.dims[0];
  const Eigen::Index f = n == 0 ? 0 : static_cast<Eigen::Index>(a.count()) / n;
  Matrix m(n, f);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = a.data[static_cast<std::size_t>(i)] * scale;
  return m;
}

}  // namespace lop
