#pragma once

// Binary checkpoint container: little-endian, magic + version + JSON metadata
// block + raw tensor payloads in declaration order + trailing CRC32. Writes
// are atomic (temp file + rename).

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrc/common.hpp"

namespace mrc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'M', 'R', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedPayload {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" | "f64" | "i64"
  std::vector<unsigned char> bytes;
};

struct CheckpointData {
  nlohmann::json metadata;
  std::vector<NamedPayload> tensors;

  const NamedPayload* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void append_bytes(std::vector<unsigned char>& out, const T& v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename Scalar>
std::vector<unsigned char> to_bytes(const std::vector<Scalar>& values) {
  std::vector<unsigned char> out(values.size() * sizeof(Scalar));
  std::memcpy(out.data(), values.data(), out.size());
  return out;
}

template <typename Scalar>
std::vector<Scalar> from_bytes(const std::vector<unsigned char>& bytes) {
  if (bytes.size() % sizeof(Scalar) != 0)
    throw IoError("checkpoint payload size is not a multiple of the scalar size");
  std::vector<Scalar> out(bytes.size() / sizeof(Scalar));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

template <typename Scalar>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<Scalar, float>) return "f32";
  if constexpr (std::is_same_v<Scalar, double>) return "f64";
  if constexpr (std::is_same_v<Scalar, int64_t>) return "i64";
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + sizeof(kCheckpointMagic));
  detail::append_bytes(buf, kCheckpointVersion);

  nlohmann::json meta;
  meta["meta"] = data.metadata;
  meta["tensors"] = nlohmann::json::array();
  for (const auto& t : data.tensors)
    meta["tensors"].push_back({{"name", t.name},
                               {"shape", t.shape},
                               {"dtype", t.dtype},
                               {"bytes", t.bytes.size()}});
  std::string meta_str = meta.dump();
  detail::append_bytes(buf, static_cast<uint64_t>(meta_str.size()));
  buf.insert(buf.end(), meta_str.begin(), meta_str.end());
  for (const auto& t : data.tensors) buf.insert(buf.end(), t.bytes.begin(), t.bytes.end());

  uint32_t crc = static_cast<uint32_t>(::crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  detail::append_bytes(buf, crc);

  std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kCheckpointMagic) + sizeof(uint32_t) * 2 + sizeof(uint64_t))
    throw IoError("checkpoint truncated: " + path);
  uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - sizeof(uint32_t), sizeof(uint32_t));
  uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, buf.data(), static_cast<uInt>(buf.size() - sizeof(uint32_t))));
  if (crc != stored_crc)
    throw IoError("checkpoint checksum mismatch (corrupt file): " + path);

  size_t off = 0;
  if (std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  off += sizeof(kCheckpointMagic);
  uint32_t version;
  std::memcpy(&version, buf.data() + off, sizeof(version));
  off += sizeof(version);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                  std::to_string(kCheckpointVersion) + "): " + path);
  uint64_t meta_len;
  std::memcpy(&meta_len, buf.data() + off, sizeof(meta_len));
  off += sizeof(meta_len);
  if (off + meta_len + sizeof(uint32_t) > buf.size())
    throw IoError("checkpoint truncated: " + path);

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(buf.begin() + off, buf.begin() + off + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint metadata unreadable: " + path + ": " + e.what());
  }
  off += meta_len;

  CheckpointData data;
  data.metadata = meta.value("meta", nlohmann::json::object());
  for (const auto& jt : meta.at("tensors")) {
    NamedPayload t;
    t.name = jt.at("name").get<std::string>();
    t.shape = jt.at("shape").get<Shape>();
    t.dtype = jt.at("dtype").get<std::string>();
    size_t n = jt.at("bytes").get<size_t>();
    if (off + n + sizeof(uint32_t) > buf.size())
      throw IoError("checkpoint truncated inside payloads: " + path);
    t.bytes.assign(buf.begin() + off, buf.begin() + off + n);
    off += n;
    data.tensors.push_back(std::move(t));
  }
  return data;
}

template <typename Scalar>
NamedPayload make_payload(const std::string& name, Shape shape,
                          const std::vector<Scalar>& values) {
  return NamedPayload{name, std::move(shape), detail::dtype_name<Scalar>(),
                      detail::to_bytes(values)};
}

}  // namespace mrc
