#pragma once

// Shared test fixtures: temporary directories, toy model configs and a
// synthetic two-texture PNG dataset.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "malnet/malnet.hpp"

namespace malnet::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("malnet-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// Small network of the same topology: stem 8 channels so conv2_x blocks keep
/// identity shortcuts, stride-2 stages after that.
inline ModelConfig toy_config(std::size_t input_size = 32) {
  ModelConfig c;
  c.input_size = input_size;
  c.stem_channels = 8;
  c.stage_blocks = {2, 1, 1, 1};
  c.stage_widths = {2, 2, 3, 4};
  c.head_units = 8;
  return c;
}

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// A round pinkish "cell" on black. Parasitized cells (label 0) carry dark
/// purple spots; uninfected ones (label 1) are smooth.
inline Image synthetic_cell(int label, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img{size, size, 3, std::vector<std::uint8_t>(size * size * 3, 0)};
  const double c = (static_cast<double>(size) - 1) / 2;
  const double radius = c * (0.8 + 0.15 * u(rng));
  struct Spot {
    double y, x, r;
  };
  std::vector<Spot> spots;
  if (label == 0) {
    const int n = 3 + static_cast<int>(u(rng) * 4);
    for (int i = 0; i < n; ++i) {
      const double a = u(rng) * 2 * M_PI, d = u(rng) * radius * 0.6;
      spots.push_back({c + d * std::sin(a), c + d * std::cos(a), radius * (0.10 + 0.08 * u(rng))});
    }
  }
  const double tint = 20 * u(rng);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
      if (dy * dy + dx * dx > radius * radius) continue;
      double r = 215 + tint + 10 * (u(rng) - 0.5), g = 160 + 10 * (u(rng) - 0.5), b = 170 + tint / 2;
      for (const auto& s : spots) {
        const double sy = static_cast<double>(y) - s.y, sx = static_cast<double>(x) - s.x;
        if (sy * sy + sx * sx <= s.r * s.r) r = 90, g = 40, b = 120;
      }
      std::uint8_t* p = &img.pixels[(y * size + x) * 3];
      p[0] = static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
      p[1] = static_cast<std::uint8_t>(std::clamp(g, 0.0, 255.0));
      p[2] = static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
    }
  return img;
}

inline std::vector<std::uint8_t> synthetic_png(int label, std::size_t size, std::uint64_t seed) {
  return encode_png(synthetic_cell(label, size, seed));
}

/// Writes root/Parasitized and root/Uninfected with `per_class` images each.
/// Image sizes vary so that loading exercises the resize path.
inline void write_synthetic_dataset(const fs::path& root, std::size_t per_class, std::uint64_t seed = 1) {
  const char* dirs[2] = {"Parasitized", "Uninfected"};
  for (int label = 0; label < 2; ++label) {
    fs::create_directories(root / dirs[label]);
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::uint64_t s = seed * 1000003 + static_cast<std::uint64_t>(label) * 7919 + i;
      const std::size_t size = 40 + (s % 5) * 6;
      write_bytes(root / dirs[label] / ("cell_" + std::to_string(i) + ".png"), synthetic_png(label, size, s));
    }
  }
}

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(n(rng));
  return t;
}

}  // namespace malnet::testing
