#pragma once

// Binary checkpoint, all integers little-endian:
//
//   "MCKP"  u32 format_version (=1)
//   u32 metadata_len, metadata_len bytes of compact UTF-8 JSON
//   u32 tensor_count, then per tensor:
//     u32 name_len, name bytes, u32 ndim, u32 dims[ndim], u8 dtype (0=f32, 1=f64),
//     raw scalars
//
// The metadata carries a "checksum": CRC-32 over the metadata serialized
// without that field, followed by the tensor table bytes.

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "malnet/error.hpp"
#include "malnet/model.hpp"
#include "malnet/tensor.hpp"

namespace malnet {

inline constexpr char kCheckpointMagic[4] = {'M', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  template <typename T>
  void scalars(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(values.data(), values.size_bytes());
    } else {
      for (T v : values) {
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        std::reverse(raw, raw + sizeof(T));
        bytes(raw, sizeof(T));
      }
    }
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (n > data_.size() - pos_)
      throw TruncatedFileError(std::string("checkpoint truncated while reading ") + what);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
           std::uint32_t{b[3]} << 24;
  }
  template <typename T>
  void scalars(std::span<T> out, const char* what) {
    auto b = take(out.size_bytes(), what);
    std::memcpy(out.data(), b.data(), b.size());
    if constexpr (std::endian::native == std::endian::big) {
      for (auto& v : out) {
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        std::reverse(raw, raw + sizeof(T));
        std::memcpy(&v, raw, sizeof(T));
      }
    }
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, a.data(), static_cast<uInt>(a.size()));
  crc = ::crc32(crc, b.data(), static_cast<uInt>(b.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

template <typename T>
std::vector<std::uint8_t> tensor_table(const ModelGraph<T>& model) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.u8(static_cast<std::uint8_t>(dtype_of<T>()));
    w.scalars(p.value.values());
  }
  return std::move(w.buffer());
}

}  // namespace detail

template <typename T>
nlohmann::json checkpoint_metadata(const ModelGraph<T>& model) {
  const ModelConfig& c = model.config();
  return {{"class_names", model.class_names()},
          {"input_shape", {c.input_channels, c.input_size, c.input_size}},
          {"seed", model.seed()},
          {"config", c},
          {"creation", model.metadata()}};
}

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelGraph<T>& model) {
  const std::vector<std::uint8_t> table = detail::tensor_table(model);
  nlohmann::json meta = checkpoint_metadata(model);
  const std::string unsigned_meta = meta.dump();
  meta["checksum"] = detail::crc32_of(detail::as_bytes(unsigned_meta), table);
  const std::string meta_text = meta.dump();

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(meta_text.size()));
  w.bytes(meta_text.data(), meta_text.size());
  w.bytes(table.data(), table.size());
  return std::move(w.buffer());
}

namespace detail {
struct TableEntry {
  std::string name;
  Shape shape;
  DType dtype;
  std::span<const std::uint8_t> data;
};

// Structural pass over the tensor table; consumes the rest of the reader.
inline std::vector<TableEntry> read_table(ByteReader& r) {
  const std::uint32_t count = r.u32("tensor count");
  std::vector<TableEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    TableEntry e;
    const std::uint32_t name_len = r.u32("tensor name length");
    auto nb = r.take(name_len, "tensor name");
    e.name.assign(nb.begin(), nb.end());
    const std::uint32_t ndim = r.u32("tensor rank");
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(r.u32("tensor extent"));
    const std::uint8_t tag = r.u8("tensor dtype");
    if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64))
      throw PayloadError("tensor '" + e.name + "' has unknown dtype tag " + std::to_string(tag));
    e.dtype = static_cast<DType>(tag);
    const std::size_t width = e.dtype == DType::f32 ? 4 : 8;
    e.data = r.take(shape_size(e.shape) * width, "tensor data");
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw PayloadError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return entries;
}

inline std::string join_names(const std::vector<std::string>& names) {
  std::string list;
  for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
  return list;
}
}  // namespace detail

/// Checks, in order: magic, version, table structure (truncation, trailing
/// bytes), metadata and checksum, then the table against the architecture.
template <typename T>
ModelGraph<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw BadMagicError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("format version");
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint format version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  const std::uint32_t meta_len = r.u32("metadata length");
  auto meta_bytes = r.take(meta_len, "metadata");
  const std::string meta_text(meta_bytes.begin(), meta_bytes.end());
  const std::size_t table_begin = r.position();
  const auto entries = detail::read_table(r);

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw PayloadError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  if (!meta.is_object() || !meta.contains("checksum") || !meta["checksum"].is_number_unsigned())
    throw PayloadError("checkpoint metadata lacks a checksum");
  if (meta.dump() != meta_text) throw PayloadError("checkpoint metadata is not in canonical form");
  const auto expected_crc = meta["checksum"].get<std::uint64_t>();
  meta.erase("checksum");
  const std::uint32_t crc = detail::crc32_of(detail::as_bytes(meta.dump()), bytes.subspan(table_begin));
  if (crc != expected_crc) throw PayloadError("checkpoint checksum mismatch");

  ModelConfig config;
  std::uint64_t seed = 0;
  try {
    config = meta.at("config").get<ModelConfig>();
    seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ArchitectureMismatchError(std::string("checkpoint metadata lacks the architecture: ") + e.what());
  }
  ModelGraph<T> model(config, seed);
  if (meta.contains("creation")) model.metadata() = meta["creation"];
  if (meta.value("class_names", nlohmann::json()) != nlohmann::json(model.class_names()))
    throw ArchitectureMismatchError("checkpoint class names do not match the architecture");

  std::set<std::string> seen;
  std::vector<std::string> unexpected;
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) throw ArchitectureMismatchError("duplicate tensor '" + e.name + "'", {e.name});
    if (e.dtype != dtype_of<T>())
      throw ArchitectureMismatchError("tensor '" + e.name + "' precision differs from the requested model", {e.name});
    Parameter<T>* p = model.parameters().find(e.name);
    if (!p) {
      unexpected.push_back(e.name);
      continue;
    }
    if (p->value.shape() != e.shape)
      throw ArchitectureMismatchError("tensor '" + e.name + "' has shape " + to_string(e.shape) +
                                          ", architecture expects " + to_string(p->value.shape()),
                                      {e.name});
    detail::ByteReader data(e.data);
    data.scalars(p->value.values(), "tensor data");
  }
  if (!unexpected.empty())
    throw ArchitectureMismatchError("checkpoint has tensors unknown to the architecture: " +
                                        detail::join_names(unexpected),
                                    unexpected);
  std::vector<std::string> missing;
  for (const auto& p : model.parameters())
    if (!seen.contains(p.name)) missing.push_back(p.name);
  if (!missing.empty())
    throw ArchitectureMismatchError("checkpoint is missing tensors: " + detail::join_names(missing), missing);
  return model;
}

template <typename T>
void save_checkpoint(const ModelGraph<T>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_checkpoint_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T = float>
ModelGraph<T> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_checkpoint_bytes(path);
  return deserialize_checkpoint<T>(bytes);
}

/// Hex SHA-256 of the checkpoint bytes, truncated to `chars`.
inline std::string checkpoint_version(std::span<const std::uint8_t> bytes, std::size_t chars = 12) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[digest[i] >> 4];
    hex += kHex[digest[i] & 0xf];
  }
  return hex.substr(0, chars);
}

}  // namespace malnet
