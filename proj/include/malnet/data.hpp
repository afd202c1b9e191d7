#pragma once

// Dataset ingestion: directory scanning, the seeded train/val/test split,
// image preprocessing, augmentation and batching.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "malnet/error.hpp"
#include "malnet/image.hpp"
#include "malnet/model.hpp"
#include "malnet/tensor.hpp"

namespace malnet {

namespace fs = std::filesystem;

struct ImageRecord {
  fs::path path;
  int label = 0;  // index into DatasetIndex::class_names

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetIndex {
  std::vector<ImageRecord> records;
  std::vector<std::string> class_names = default_class_names();

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }
  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.label);
    return out;
  }
};

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace detail {
inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline bool looks_like_png(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint8_t head[8] = {};
  in.read(reinterpret_cast<char*>(head), 8);
  return in.gcount() == 8 && has_png_signature(head);
}
}  // namespace detail

/// Expects root/Parasitized and root/Uninfected (any letter case). Only files
/// carrying a PNG signature are indexed. Records are sorted by path.
inline DatasetIndex scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DatasetError("data root is not a directory: " + root.string());
  DatasetIndex index;
  std::vector<std::optional<fs::path>> class_dirs(index.class_names.size());
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const std::string name = detail::lower(entry.path().filename().string());
    for (std::size_t k = 0; k < index.class_names.size(); ++k)
      if (name == index.class_names[k]) class_dirs[k] = entry.path();
  }
  for (std::size_t k = 0; k < class_dirs.size(); ++k)
    if (!class_dirs[k])
      throw DatasetError("missing class directory '" + index.class_names[k] + "' under " + root.string());

  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    for (const auto& entry : fs::directory_iterator(*class_dirs[k])) {
      if (!entry.is_regular_file() || !detail::looks_like_png(entry.path())) continue;
      index.records.push_back({entry.path(), static_cast<int>(k)});
    }
  }
  std::sort(index.records.begin(), index.records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.path.string() < b.path.string(); });
  if (index.records.empty()) throw DatasetError("no PNG images found under " + root.string());
  return index;
}

// ---------------------------------------------------------------------------
// Split

enum class SplitName { train, val, test };

inline const char* to_string(SplitName s) {
  switch (s) {
    case SplitName::train: return "train";
    case SplitName::val: return "val";
    case SplitName::test: return "test";
  }
  return "?";
}

inline SplitName parse_split_name(const std::string& s) {
  if (s == "train") return SplitName::train;
  if (s == "val") return SplitName::val;
  if (s == "test") return SplitName::test;
  throw ArgumentError("unknown split '" + s + "' (expected train, val or test)");
}

struct SplitSpec {
  std::uint64_t seed = 42;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
};

struct SplitSizes {
  std::size_t train, val, test;
};

/// floor(0.6 N) / floor(0.2 N) / remainder.
inline SplitSizes split_sizes(std::size_t n, const SplitSpec& spec = {}) {
  // The epsilon absorbs representation error in products like 0.6 * 10.
  const auto take = [n](double f) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  const std::size_t train = take(spec.train_fraction), val = take(spec.val_fraction);
  return {train, val, n - train - val};
}

struct DatasetSplit {
  DatasetIndex train, val, test;
  // Parallel to the source index: which split each record went to.
  std::vector<SplitName> assignment;

  const DatasetIndex& get(SplitName s) const {
    return s == SplitName::train ? train : s == SplitName::val ? val : test;
  }
};

/// Fisher-Yates shuffle of the record order with a seeded generator, then
/// contiguous train/val/test slices. Each split lists its records in index
/// order.
inline DatasetSplit split_dataset(const DatasetIndex& index, const SplitSpec& spec = {}) {
  const std::size_t n = index.size();
  if (n < 3) throw DatasetError("need at least 3 records to split, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const SplitSizes sizes = split_sizes(n, spec);
  DatasetSplit out;
  out.train.class_names = out.val.class_names = out.test.class_names = index.class_names;
  out.assignment.assign(n, SplitName::test);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t i = order[pos];
    SplitName s = pos < sizes.train ? SplitName::train
                  : pos < sizes.train + sizes.val ? SplitName::val
                                                  : SplitName::test;
    out.assignment[i] = s;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const SplitName s = out.assignment[i];
    (s == SplitName::train ? out.train : s == SplitName::val ? out.val : out.test)
        .records.push_back(index.records[i]);
  }
  return out;
}

namespace detail {
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}
}  // namespace detail

/// CSV `path,label,split` in source-index order; label is the class name.
inline std::string split_manifest_csv(const DatasetIndex& index, const DatasetSplit& split) {
  std::ostringstream os;
  os << "path,label,split\n";
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& r = index.records[i];
    os << detail::csv_field(r.path.string()) << ','
       << detail::csv_field(index.class_names.at(static_cast<std::size_t>(r.label))) << ','
       << to_string(split.assignment.at(i)) << '\n';
  }
  return os.str();
}

inline DatasetSplit parse_split_manifest(const std::string& csv,
                                         const std::vector<std::string>& class_names = default_class_names()) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "path,label,split")
    throw DatasetError("split manifest must start with header 'path,label,split'");
  DatasetSplit out;
  out.train.class_names = out.val.class_names = out.test.class_names = class_names;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = detail::parse_csv_line(line);
    if (f.size() != 3) throw DatasetError("split manifest line " + std::to_string(line_no) + ": expected 3 fields");
    auto it = std::find(class_names.begin(), class_names.end(), f[1]);
    if (it == class_names.end())
      throw DatasetError("split manifest line " + std::to_string(line_no) + ": unknown label '" + f[1] + "'");
    const SplitName s = parse_split_name(f[2]);
    ImageRecord rec{f[0], static_cast<int>(it - class_names.begin())};
    out.assignment.push_back(s);
    (s == SplitName::train ? out.train : s == SplitName::val ? out.val : out.test).records.push_back(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing and augmentation

/// Decode, resize to size x size (bilinear, half-pixel centers) and scale to [0,1].
template <typename T = float>
Tensor<T> preprocess_image(std::span<const std::uint8_t> bytes, std::size_t size = 224) {
  const Image img = decode_png(bytes);
  const std::size_t H = img.height, W = img.width;
  Tensor<T> chw({3, H, W});
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < 3; ++c) chw[c * H * W + i] = static_cast<T>(img.pixels[i * 3 + c]);
  Tensor<T> out = (H == size && W == size) ? std::move(chw) : resize_bilinear(chw, size, size);
  for (auto& v : out.values()) v /= T{255};
  return out;
}

struct AugmentConfig {
  double rotation_deg = 15.0;
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double hflip_prob = 0.5;

  /// An interval with zoom_min > zoom_max is empty and disables zoom.
  bool zoom_enabled() const { return zoom_min <= zoom_max; }

  void validate() const {
    if (!(rotation_deg >= 0.0)) throw ConfigError("augment rotation_deg must be >= 0");
    if (zoom_enabled() && !(zoom_min > 0.0 && zoom_min <= 1.0 && zoom_max >= 1.0))
      throw ConfigError("augment zoom interval must contain 1 (or be empty)");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("augment hflip_prob must be in [0,1]");
  }
};

struct AugmentParams {
  bool flip = false;
  double angle_deg = 0.0;  // counter-clockwise as displayed
  double scale = 1.0;      // > 1 zooms in
};

/// Draws angle ~ U(-r, r), then scale ~ U(zoom), then flip ~ Bernoulli(p).
template <typename Rng>
AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentParams p;
  if (cfg.rotation_deg > 0.0) p.angle_deg = -cfg.rotation_deg + 2.0 * cfg.rotation_deg * unit(rng);
  if (cfg.zoom_enabled() && cfg.zoom_max > cfg.zoom_min)
    p.scale = cfg.zoom_min + (cfg.zoom_max - cfg.zoom_min) * unit(rng);
  if (cfg.hflip_prob > 0.0) p.flip = unit(rng) < cfg.hflip_prob;
  return p;
}

namespace detail {
// out(r,c) = in(inverse(r,c)) over every plane, bilinear with zero fill.
template <typename T, typename InverseMap>
Tensor<T> warp(const Tensor<T>& t, InverseMap inverse) {
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<T> out(t.shape());
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const auto [sr, sc] = inverse(static_cast<double>(r), static_cast<double>(c));
      for (std::size_t ch = 0; ch < C; ++ch) {
        const T v = sample_zero_padded(t.data() + ch * H * W, H, W, sr, sc);
        out[(ch * H + r) * W + c] = std::clamp(v, T{0}, T{1});
      }
    }
  }
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> hflip(const Tensor<T>& t) {
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<T> out(t.shape());
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) out[(ch * H + r) * W + c] = t[(ch * H + r) * W + (W - 1 - c)];
  return out;
}

/// Rotation about the image center (pixel-center coordinates).
template <typename T>
Tensor<T> rotate(const Tensor<T>& t, double angle_deg) {
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(t.dim(1)) - 1.0) / 2.0;
  const double cx = (static_cast<double>(t.dim(2)) - 1.0) / 2.0;
  return detail::warp(t, [=](double r, double c) {
    const double dy = r - cy, dx = c - cx;
    return std::pair{cy + dx * sn + dy * cs, cx + dx * cs - dy * sn};
  });
}

/// Center zoom: scale > 1 crops and enlarges, scale < 1 shrinks and pads with zeros.
template <typename T>
Tensor<T> zoom(const Tensor<T>& t, double scale) {
  const double cy = (static_cast<double>(t.dim(1)) - 1.0) / 2.0;
  const double cx = (static_cast<double>(t.dim(2)) - 1.0) / 2.0;
  return detail::warp(t, [=](double r, double c) {
    return std::pair{cy + (r - cy) / scale, cx + (c - cx) / scale};
  });
}

/// Flip, then rotate, then zoom. Identity parameters return the input unchanged.
template <typename T>
Tensor<T> apply_augment(const Tensor<T>& t, const AugmentParams& p) {
  if (t.rank() != 3) throw ShapeError("augment expects [C,H,W], got " + to_string(t.shape()));
  Tensor<T> out = p.flip ? hflip(t) : t;
  if (p.angle_deg != 0.0) out = rotate(out, p.angle_deg);
  if (p.scale != 1.0) out = zoom(out, p.scale);
  return out;
}

template <typename T, typename Rng>
Tensor<T> augment(const Tensor<T>& t, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(t, sample_augment(cfg, rng));
}

// ---------------------------------------------------------------------------
// Batching

template <typename T>
struct Batch {
  Tensor<T> images;             // [B,3,S,S]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source index
};

template <typename T>
using ImageLoader = std::function<Tensor<T>(const ImageRecord&)>;

template <typename T>
ImageLoader<T> file_loader(std::size_t size = 224) {
  return [size](const ImageRecord& r) {
    const auto bytes = read_file(r.path);
    try {
      return preprocess_image<T>(bytes, size);
    } catch (const DecodeError& e) {
      throw DecodeError(r.path.string() + ": " + e.what());
    }
  };
}

/// Epoch-wise stream of batches. Shuffling and augmentation are reseeded
/// from (seed, epoch), so every epoch is reproducible on its own.
template <typename T>
class BatchStream {
 public:
  BatchStream(const DatasetIndex& index, std::size_t batch_size, bool shuffle, std::uint64_t seed,
              std::optional<AugmentConfig> augment = std::nullopt, ImageLoader<T> loader = file_loader<T>())
      : index_(&index),
        batch_size_(batch_size),
        shuffle_(shuffle),
        seed_(seed),
        augment_(std::move(augment)),
        loader_(std::move(loader)) {
    if (batch_size_ == 0) throw ArgumentError("batch_size must be >= 1");
    if (index.empty()) throw DatasetError("cannot batch an empty dataset");
    if (augment_) augment_->validate();
    start_epoch(0);
  }

  std::size_t num_batches() const { return (index_->size() + batch_size_ - 1) / batch_size_; }
  std::size_t size() const { return index_->size(); }

  void start_epoch(std::size_t epoch) {
    order_.resize(index_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng);
    augment_rng_.seed(rng());
    cursor_ = 0;
  }

  bool next(Batch<T>& out) {
    if (cursor_ >= order_.size()) return false;
    const std::size_t b = std::min(batch_size_, order_.size() - cursor_);
    out.labels.clear();
    out.indices.clear();
    std::vector<Tensor<T>> images;
    images.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t idx = order_[cursor_ + i];
      const ImageRecord& rec = index_->records[idx];
      Tensor<T> img = loader_(rec);
      if (augment_) img = malnet::augment(img, *augment_, augment_rng_);
      images.push_back(std::move(img));
      out.labels.push_back(rec.label);
      out.indices.push_back(idx);
    }
    cursor_ += b;
    Shape shape = images.front().shape();
    const std::size_t per = images.front().size();
    shape.insert(shape.begin(), b);
    out.images = Tensor<T>(shape);
    for (std::size_t i = 0; i < b; ++i) {
      if (images[i].size() != per) throw ShapeError("images in a batch differ in shape");
      std::copy(images[i].values().begin(), images[i].values().end(), out.images.data() + i * per);
    }
    return true;
  }

 private:
  const DatasetIndex* index_;
  std::size_t batch_size_;
  bool shuffle_;
  std::uint64_t seed_;
  std::optional<AugmentConfig> augment_;
  ImageLoader<T> loader_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 augment_rng_;
};

}  // namespace malnet
