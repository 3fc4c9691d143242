#pragma once

// Binary checkpoint format, little-endian throughout:
//
//   magic      8 bytes  "MDODCKPT"
//   version    u32      kCheckpointVersion
//   meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//   count      u32      number of tensor records
//   record     u32 name_len, name bytes, u32 rank, rank x u64 extents,
//              prod(extents) x f64 values

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdod/diffcore.hpp"

namespace mdod::diff {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'O', 'D', 'C', 'K', 'P', 'T'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is, const std::string& what) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw CheckpointError("truncated checkpoint while reading " + what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.metadata.size()));
  os.write(ckpt.metadata.data(), static_cast<std::streamsize>(ckpt.metadata.size()));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (shape_size(t.shape) != t.values.size()) throw CheckpointError("tensor " + t.name + " has inconsistent shape");
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) detail::put_le<std::uint64_t>(os, e);
    for (double v : t.values) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_len = detail::get_le<std::uint32_t>(is, "metadata length");
  ckpt.metadata.resize(meta_len);
  if (!is.read(ckpt.metadata.data(), meta_len)) throw CheckpointError(path.string() + ": truncated metadata");
  const auto count = detail::get_le<std::uint32_t>(is, "record count");
  for (std::uint32_t r = 0; r < count; ++r) {
    const std::string ctx = path.string() + " record " + std::to_string(r);
    NamedTensor t;
    const auto name_len = detail::get_le<std::uint32_t>(is, ctx + " name length");
    t.name.resize(name_len);
    if (!is.read(t.name.data(), name_len)) throw CheckpointError(ctx + ": truncated name");
    const auto rank = detail::get_le<std::uint32_t>(is, ctx + " rank");
    if (rank > 8) throw CheckpointError(ctx + ": implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(is, ctx + " extent")));
    const std::size_t n = shape_size(t.shape);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, ctx + " values"));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace mdod::diff
