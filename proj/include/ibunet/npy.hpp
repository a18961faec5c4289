#pragma once

// NPY v1.0 reader/writer, deliberately narrow: little-endian float32, C order.
// Anything else is rejected loudly rather than converted.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ibunet/error.hpp"

namespace ibunet {

struct NpyArray {
  std::vector<size_t> shape;
  std::vector<float> data;

  size_t elems() const {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
  }
};

namespace detail {

inline std::string npy_shape_tuple(const std::vector<size_t>& shape) {
  if (shape.empty()) return "()";
  if (shape.size() == 1) return "(" + std::to_string(shape[0]) + ",)";
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace detail

inline std::vector<unsigned char> write_npy(const NpyArray& a) {
  require(a.data.size() == a.elems(), errc::shape_mismatch,
          "buffer length does not match shape");
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " +
                       detail::npy_shape_tuple(a.shape) + ", }";
  // magic(6) + version(2) + hlen(2) + header + pad + '\n', total multiple of 64
  size_t base = 10 + header.size() + 1;
  size_t pad = (64 - base % 64) % 64;
  header.append(pad, ' ');
  header.push_back('\n');

  std::vector<unsigned char> out;
  out.reserve(10 + header.size() + a.data.size() * 4);
  const char magic[] = "\x93NUMPY";
  out.insert(out.end(), magic, magic + 6);
  out.push_back(1);
  out.push_back(0);
  uint16_t hlen = static_cast<uint16_t>(header.size());
  out.push_back(static_cast<unsigned char>(hlen & 0xff));
  out.push_back(static_cast<unsigned char>(hlen >> 8));
  out.insert(out.end(), header.begin(), header.end());
  size_t off = out.size();
  out.resize(off + a.data.size() * 4);
  if (!a.data.empty()) std::memcpy(out.data() + off, a.data.data(), a.data.size() * 4);
  return out;
}

inline NpyArray read_npy(const unsigned char* bytes, size_t len) {
  require(len >= 10, errc::bad_magic, "file shorter than NPY preamble");
  static const char magic[] = "\x93NUMPY";
  require(std::memcmp(bytes, magic, 6) == 0, errc::bad_magic, "missing NPY magic");
  require(bytes[6] == 1 && bytes[7] == 0, errc::unsupported_version,
          "only NPY version 1.0 is supported");
  size_t hlen = bytes[8] | (size_t(bytes[9]) << 8);
  require(len >= 10 + hlen, errc::truncated_data, "header extends past end of file");
  std::string header(reinterpret_cast<const char*>(bytes) + 10, hlen);

  auto field = [&](const std::string& key) -> std::string {
    size_t p = header.find("'" + key + "'");
    require(p != std::string::npos, errc::parse_error, "header missing key " + key);
    p = header.find(':', p);
    require(p != std::string::npos, errc::parse_error, "malformed header");
    ++p;
    while (p < header.size() && header[p] == ' ') ++p;
    return header.substr(p);
  };

  std::string descr = field("descr");
  require(descr.size() >= 5 && descr.compare(0, 5, "'<f4'") == 0, errc::unsupported_dtype,
          "only little-endian float32 ('<f4') is supported");

  std::string forder = field("fortran_order");
  require(forder.compare(0, 5, "False") == 0, errc::fortran_order_unsupported,
          "fortran_order must be False");

  std::string sh = field("shape");
  require(!sh.empty() && sh[0] == '(', errc::parse_error, "malformed shape tuple");
  NpyArray a;
  size_t p = 1;
  while (p < sh.size() && sh[p] != ')') {
    while (p < sh.size() && (sh[p] == ' ' || sh[p] == ',')) ++p;
    if (p >= sh.size() || sh[p] == ')') break;
    require(sh[p] >= '0' && sh[p] <= '9', errc::parse_error, "malformed shape tuple");
    size_t v = 0;
    while (p < sh.size() && sh[p] >= '0' && sh[p] <= '9') v = v * 10 + (sh[p++] - '0');
    a.shape.push_back(v);
  }
  require(p < sh.size() && sh[p] == ')', errc::parse_error, "unterminated shape tuple");

  size_t need = a.elems() * 4;
  size_t have = len - 10 - hlen;
  require(have >= need, errc::truncated_data, "data section shorter than shape requires");
  require(have == need, errc::truncated_data, "trailing bytes after data section");
  a.data.resize(a.elems());
  if (need) std::memcpy(a.data.data(), bytes + 10 + hlen, need);
  return a;
}

inline NpyArray read_npy(const std::vector<unsigned char>& bytes) {
  return read_npy(bytes.data(), bytes.size());
}

inline void save_npy(const std::string& path, const NpyArray& a) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), errc::io_error, "cannot open for write: " + path);
  auto bytes = write_npy(a);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), errc::io_error, "write failed: " + path);
}

inline NpyArray load_npy(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), errc::io_error, "cannot open: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return read_npy(bytes);
}

}  // namespace ibunet
