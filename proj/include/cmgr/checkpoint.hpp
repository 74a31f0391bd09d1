#pragma once

// Checkpoint archive:
//   "CMGRCKPT" | u32 version | u32 manifest length | manifest bytes |
//   u32 entry count | entries
// entry: u32 name length | name | u32 rank | u32 dims[rank] | f32 data (row-major)
// All integers and floats little-endian.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cmgr/core/autodiff.hpp"

namespace cmgr {

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'G', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::string manifest;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IoError("truncated checkpoint", path_);
  }

  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Appends every parameter of `store` as a rank-2 entry named prefix + name.
template <typename T>
void add_store(Checkpoint& ck, const ParamStore<T>& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& v = store.value(i);
    CheckpointEntry e;
    e.name = prefix + store.name(i);
    e.dims = {static_cast<std::uint32_t>(v.rows()), static_cast<std::uint32_t>(v.cols())};
    e.data.resize(static_cast<std::size_t>(v.size()));
    for (Index k = 0; k < v.size(); ++k) e.data[static_cast<std::size_t>(k)] = static_cast<float>(v.data()[k]);
    ck.entries.push_back(std::move(e));
  }
}

// Overwrites every parameter of `store` from entries named prefix + name.
template <typename T>
void load_store(const Checkpoint& ck, ParamStore<T>& store, const std::string& prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string name = prefix + store.name(i);
    const auto* e = ck.find(name);
    if (!e) throw InvalidArgument("checkpoint has no entry '" + name + "'");
    auto& v = store.value(i);
    if (e->dims.size() != 2 || e->dims[0] != v.rows() || e->dims[1] != v.cols()) {
      throw InvalidArgument("checkpoint entry '" + name + "' has the wrong shape");
    }
    for (Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<T>(e->data[static_cast<std::size_t>(k)]);
  }
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.manifest.size()));
  out += ck.manifest;
  detail::put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    std::size_t count = 1;
    for (auto d : e.dims) count *= d;
    if (count != e.data.size()) throw InvalidArgument("checkpoint entry '" + e.name + "' data does not match its shape");
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_u32(out, d);
    for (float f : e.data) detail::put_f32(out, f);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& buf, const std::string& path = "<memory>") {
  detail::Reader rd(buf, path);
  if (rd.bytes(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw IoError("not a checkpoint file", path);
  }
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version), path);
  Checkpoint ck;
  ck.manifest = rd.bytes(rd.u32());
  const std::uint32_t n = rd.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointEntry e;
    e.name = rd.bytes(rd.u32());
    const std::uint32_t rank = rd.u32();
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(rd.u32());
      count *= e.dims.back();
    }
    e.data.reserve(count);
    for (std::size_t k = 0; k < count; ++k) e.data.push_back(rd.f32());
    ck.entries.push_back(std::move(e));
  }
  if (!rd.done()) throw IoError("trailing bytes after checkpoint entries", path);
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing", path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint", path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint", path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(buf, path.string());
}

}  // namespace cmgr
