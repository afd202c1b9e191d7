#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include <zlib.h>

#include "malnet/malnet.hpp"
#include "support/fixtures.hpp"

using namespace malnet;
using namespace malnet::testing;

namespace {

// Independent reader/writer for the on-disk layout.
struct Entry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::uint8_t dtype = 0;
  std::vector<std::uint8_t> raw;
};

struct File {
  std::uint32_t version = 0;
  nlohmann::json meta;
  std::vector<Entry> entries;
};

std::uint32_t le32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

File parse(const std::vector<std::uint8_t>& b) {
  File f;
  EXPECT_EQ(std::memcmp(b.data(), "MCKP", 4), 0);
  std::size_t pos = 4;
  f.version = le32(&b[pos]);
  pos += 4;
  const std::uint32_t ml = le32(&b[pos]);
  pos += 4;
  f.meta = nlohmann::json::parse(b.begin() + static_cast<long>(pos), b.begin() + static_cast<long>(pos + ml));
  pos += ml;
  const std::uint32_t count = le32(&b[pos]);
  pos += 4;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t nl = le32(&b[pos]);
    pos += 4;
    e.name.assign(reinterpret_cast<const char*>(&b[pos]), nl);
    pos += nl;
    const std::uint32_t nd = le32(&b[pos]);
    pos += 4;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < nd; ++d, pos += 4) {
      e.dims.push_back(le32(&b[pos]));
      n *= e.dims.back();
    }
    e.dtype = b[pos++];
    const std::size_t bytes = n * (e.dtype == 0 ? 4 : 8);
    e.raw.assign(b.begin() + static_cast<long>(pos), b.begin() + static_cast<long>(pos + bytes));
    pos += bytes;
    f.entries.push_back(std::move(e));
  }
  EXPECT_EQ(pos, b.size());
  return f;
}

// Re-emits a file with a freshly computed checksum.
std::vector<std::uint8_t> emit(File f) {
  std::vector<std::uint8_t> table;
  put32(table, static_cast<std::uint32_t>(f.entries.size()));
  for (const auto& e : f.entries) {
    put32(table, static_cast<std::uint32_t>(e.name.size()));
    table.insert(table.end(), e.name.begin(), e.name.end());
    put32(table, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) put32(table, d);
    table.push_back(e.dtype);
    table.insert(table.end(), e.raw.begin(), e.raw.end());
  }
  f.meta.erase("checksum");
  const std::string body = f.meta.dump();
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  crc = crc32(crc, table.data(), static_cast<uInt>(table.size()));
  f.meta["checksum"] = static_cast<std::uint64_t>(crc);
  const std::string meta = f.meta.dump();
  std::vector<std::uint8_t> out{'M', 'C', 'K', 'P'};
  put32(out, f.version);
  put32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  out.insert(out.end(), table.begin(), table.end());
  return out;
}

Tensorf fixed_input(const ModelGraph<float>& m) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensorf x(m.input_shape(2));
  for (auto& v : x.values()) v = u(rng);
  return x;
}

ModelGraph<float> perturbed_toy(std::uint64_t seed) {
  auto m = build_model<float>(seed, toy_config());
  // non-trivial running stats so they are part of what round-trips
  std::mt19937_64 rng(seed);
  for (auto& p : m.parameters())
    if (!p.trainable)
      for (auto& v : p.value.values()) v += std::uniform_real_distribution<float>(0.0f, 0.5f)(rng);
  return m;
}

}  // namespace

TEST(Checkpoint, LayoutMatchesFormat) {
  auto m = perturbed_toy(1);
  m.metadata() = {{"note", "toy"}};
  const auto bytes = serialize_checkpoint(m);
  const File f = parse(bytes);
  EXPECT_EQ(f.version, 1u);
  EXPECT_EQ(f.meta["class_names"], nlohmann::json({"parasitized", "uninfected"}));
  EXPECT_EQ(f.meta["input_shape"], nlohmann::json({3, 32, 32}));
  EXPECT_EQ(f.meta["seed"], 1);
  EXPECT_EQ(f.meta["creation"]["note"], "toy");
  ASSERT_EQ(f.entries.size(), m.parameters().size());
  for (std::size_t i = 0; i < f.entries.size(); ++i) {
    const auto& p = m.parameters()[i];
    EXPECT_EQ(f.entries[i].name, p.name);
    EXPECT_EQ(f.entries[i].dtype, 0);
    ASSERT_EQ(f.entries[i].raw.size(), p.value.size() * 4);
    EXPECT_EQ(std::memcmp(f.entries[i].raw.data(), p.value.data(), f.entries[i].raw.size()), 0);
  }
  EXPECT_EQ(emit(f), bytes);  // checksum recomputed independently
}

TEST(Checkpoint, RoundTripBitExactOverSeeds) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = perturbed_toy(seed);
    const auto path = dir / ("m" + std::to_string(seed) + ".mckp");
    save_checkpoint(m, path);
    const auto loaded = load_checkpoint<float>(path);
    ASSERT_EQ(loaded.parameters().size(), m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i)
      EXPECT_EQ(loaded.parameters()[i].value, m.parameters()[i].value) << m.parameters()[i].name;
    const auto x = fixed_input(m);
    EXPECT_EQ(loaded.predict_proba(x), m.predict_proba(x));
    const auto again = dir / "again.mckp";
    save_checkpoint(loaded, again);
    EXPECT_EQ(read_checkpoint_bytes(again), read_checkpoint_bytes(path)) << "seed " << seed;
  }
}

TEST(Checkpoint, DoublePrecisionRoundTrip) {
  auto m = build_model<double>(4, toy_config());
  const auto bytes = serialize_checkpoint(m);
  EXPECT_EQ(parse(bytes).entries[0].dtype, 1);
  EXPECT_EQ(serialize_checkpoint(deserialize_checkpoint<double>(bytes)), bytes);
  EXPECT_THROW(deserialize_checkpoint<float>(bytes), ArchitectureMismatchError);
  EXPECT_THROW(deserialize_checkpoint<double>(serialize_checkpoint(build_model<float>(4, toy_config()))),
               ArchitectureMismatchError);
}

TEST(Checkpoint, EverySingleByteFlipIsRejected) {
  const auto bytes = serialize_checkpoint(perturbed_toy(2));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    for (std::uint8_t mask : {std::uint8_t{0x01}, std::uint8_t{0x80}}) {
      auto bad = bytes;
      bad[i] ^= mask;
      try {
        (void)deserialize_checkpoint<float>(bad);
        ADD_FAILURE() << "flip at byte " << i << " mask " << int(mask) << " loaded silently";
      } catch (const CheckpointError&) {
      }
    }
  }
}

TEST(Checkpoint, DistinctErrorTypes) {
  const auto m = perturbed_toy(3);
  const auto bytes = serialize_checkpoint(m);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<float>(bad), BadMagicError);

  File f = parse(bytes);
  f.version = 2;
  EXPECT_THROW(deserialize_checkpoint<float>(emit(f)), VersionMismatchError);

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(deserialize_checkpoint<float>(t), TruncatedFileError) << cut;
  }

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_checkpoint<float>(trailing), PayloadError);
}

TEST(Checkpoint, MissingTensorIsNamed) {
  File f = parse(serialize_checkpoint(perturbed_toy(3)));
  const std::string dropped = f.entries[5].name;
  f.entries.erase(f.entries.begin() + 5);
  try {
    (void)deserialize_checkpoint<float>(emit(f));
    FAIL();
  } catch (const ArchitectureMismatchError& e) {
    EXPECT_EQ(e.names(), std::vector<std::string>{dropped});
    EXPECT_NE(std::string(e.what()).find(dropped), std::string::npos);
  }
}

TEST(Checkpoint, UnknownAndMisshapenTensorsRejected) {
  const File base = parse(serialize_checkpoint(perturbed_toy(3)));

  File extra = base;
  extra.entries.push_back({"head.extra.weight", {1}, 0, {0, 0, 0, 0}});
  try {
    (void)deserialize_checkpoint<float>(emit(extra));
    FAIL();
  } catch (const ArchitectureMismatchError& e) {
    EXPECT_EQ(e.names(), std::vector<std::string>{"head.extra.weight"});
  }

  File shape = base;
  auto& e = shape.entries[0];
  e.dims = {e.dims[0] * e.dims[1], e.dims[2], e.dims[3]};
  EXPECT_THROW(deserialize_checkpoint<float>(emit(shape)), ArchitectureMismatchError);

  File dup = base;
  dup.entries.push_back(dup.entries[0]);
  EXPECT_THROW(deserialize_checkpoint<float>(emit(dup)), ArchitectureMismatchError);

  File arch = base;
  arch.meta["config"]["head_units"] = 16;
  EXPECT_THROW(deserialize_checkpoint<float>(emit(arch)), ArchitectureMismatchError);
}

TEST(Checkpoint, LoadErrorsAndVersionDigest) {
  TempDir dir;
  EXPECT_THROW(load_checkpoint<float>(dir / "absent.mckp"), CheckpointError);
  write_bytes(dir / "text.mckp", std::vector<std::uint8_t>{'h', 'e', 'l', 'l', 'o'});
  EXPECT_THROW(load_checkpoint<float>(dir / "text.mckp"), BadMagicError);

  const auto a = serialize_checkpoint(perturbed_toy(1)), b = serialize_checkpoint(perturbed_toy(2));
  const auto va = checkpoint_version(a);
  EXPECT_EQ(va.size(), 12u);
  EXPECT_EQ(va.find_first_not_of("0123456789abcdef"), std::string::npos);
  EXPECT_EQ(va, checkpoint_version(a));
  EXPECT_NE(va, checkpoint_version(b));
  // SHA-256 of the empty string
  EXPECT_EQ(checkpoint_version(std::vector<std::uint8_t>{}, 64),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
