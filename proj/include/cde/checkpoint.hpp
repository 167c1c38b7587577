#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cde/tensor.hpp"

namespace cde {

/// Binary checkpoint: magic "CDEW", u32 version, then a run of records
/// (u32 name_len, name bytes, u32 ndim, u64 dims..., f64 payload...) until
/// EOF. Values are always serialized as f64 regardless of the in-memory
/// scalar type, so checkpoints are precision-portable.
namespace ckpt {

constexpr char kMagic[4] = {'C', 'D', 'E', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename S>
void write_raw(std::ostream& os, const S& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(S));
}

template <typename S>
S read_raw(std::istream& is) {
  S v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(S));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace ckpt

template <typename T>
inline void save_checkpoint(const std::string& path,
                            const std::map<std::string, Tensor<T>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(ckpt::kMagic, 4);
  ckpt::write_raw(os, ckpt::kVersion);
  for (const auto& [name, t] : tensors) {
    ckpt::write_raw(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    ckpt::write_raw(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::int64_t d : t.shape) ckpt::write_raw(os, static_cast<std::uint64_t>(d));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      ckpt::write_raw(os, static_cast<double>(t[i]));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

template <typename T>
inline std::map<std::string, Tensor<T>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, ckpt::kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const auto version = ckpt::read_raw<std::uint32_t>(is);
  if (version != ckpt::kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::map<std::string, Tensor<T>> out;
  while (true) {
    std::uint32_t name_len;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw std::runtime_error("checkpoint: truncated record in '" + path + "'");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = ckpt::read_raw<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::int64_t>(ckpt::read_raw<std::uint64_t>(is));
    Tensor<T> t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(ckpt::read_raw<double>(is));
    if (!out.emplace(std::move(name), std::move(t)).second)
      throw std::runtime_error("checkpoint: duplicate tensor name in '" + path + "'");
  }
  return out;
}

}  // namespace cde
