#pragma once

// Run configuration: an INI file ([section] key = value) plus
// "section.key=value" overrides. Unknown sections and keys are errors.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "malnet/data.hpp"
#include "malnet/error.hpp"
#include "malnet/model.hpp"
#include "malnet/train.hpp"

namespace malnet {

struct DataConfig {
  std::string root;
  std::uint64_t seed = 42;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
};

struct ServeConfig {
  std::string bind = "127.0.0.1:8080";
  std::string checkpoint;
  std::string cors = "*";
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  ServeConfig serve;

  SplitSpec split_spec() const { return {data.seed, data.train_fraction, data.val_fraction}; }

  /// TrainConfig with the run seed applied.
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = data.seed;
    return t;
  }

  void validate() const {
    if (!(data.train_fraction > 0 && data.val_fraction > 0 && data.train_fraction + data.val_fraction < 1))
      throw ConfigError("data fractions must be positive and leave room for a test split");
    if (model.input_size < 1 || model.stem_channels < 1 || model.head_units < 1)
      throw ConfigError("model sizes must be >= 1");
    for (auto w : model.stage_widths)
      if (w < 1) throw ConfigError("model stage_widths must be >= 1");
    if (!(model.dropout_rate >= 0 && model.dropout_rate < 1)) throw ConfigError("model dropout_rate must be in [0,1)");
    train_config().validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& text) {
  Int v{};
  const std::string t = trim(text);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || t[0] == '-' || r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

inline double parse_double(const std::string& key, const std::string& text) {
  double v{};
  const std::string t = trim(text);
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "yes" || t == "on" || t == "1") return true;
  if (t == "false" || t == "no" || t == "off" || t == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::array<std::size_t, 4> parse_quad(const std::string& key, const std::string& text) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 4) throw ConfigError(key + ": expected four comma-separated integers");
    out[i++] = parse_integer<std::size_t>(key, item);
  }
  if (i != 4) throw ConfigError(key + ": expected four comma-separated integers");
  return out;
}

inline std::string format_quad(const std::array<std::size_t, 4>& a) {
  return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
}

struct ConfigKey {
  const char* section;
  const char* name;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MALNET_KEY_UINT(sec, key, field)                                                                    \
  ConfigKey{sec, key, [](RunConfig& c, const std::string& k, const std::string& v) {                     \
              c.field = parse_integer<std::remove_cvref_t<decltype(c.field)>>(k, v);                       \
            },                                                                                              \
            [](const RunConfig& c) { return std::to_string(c.field); }}
#define MALNET_KEY_DOUBLE(sec, key, field)                                                                  \
  ConfigKey{sec, key, [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }, \
            [](const RunConfig& c) { return format_double(c.field); }}
#define MALNET_KEY_STRING(sec, key, field)                                                                  \
  ConfigKey{sec, key, [](RunConfig& c, const std::string&, const std::string& v) { c.field = trim(v); }, \
            [](const RunConfig& c) { return c.field; }}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      MALNET_KEY_STRING("data", "root", data.root),
      MALNET_KEY_UINT("data", "seed", data.seed),
      MALNET_KEY_DOUBLE("data", "train_fraction", data.train_fraction),
      MALNET_KEY_DOUBLE("data", "val_fraction", data.val_fraction),
      MALNET_KEY_UINT("model", "input_size", model.input_size),
      MALNET_KEY_UINT("model", "stem_channels", model.stem_channels),
      ConfigKey{"model", "stage_blocks",
                [](RunConfig& c, const std::string& k, const std::string& v) { c.model.stage_blocks = parse_quad(k, v); },
                [](const RunConfig& c) { return format_quad(c.model.stage_blocks); }},
      ConfigKey{"model", "stage_widths",
                [](RunConfig& c, const std::string& k, const std::string& v) { c.model.stage_widths = parse_quad(k, v); },
                [](const RunConfig& c) { return format_quad(c.model.stage_widths); }},
      MALNET_KEY_UINT("model", "head_units", model.head_units),
      MALNET_KEY_DOUBLE("model", "dropout_rate", model.dropout_rate),
      MALNET_KEY_DOUBLE("train", "lr", train.lr),
      MALNET_KEY_UINT("train", "epochs", train.epochs),
      MALNET_KEY_UINT("train", "batch_size", train.batch_size),
      MALNET_KEY_UINT("train", "es_patience", train.es_patience),
      MALNET_KEY_DOUBLE("train", "es_min_delta", train.es_min_delta),
      MALNET_KEY_DOUBLE("train", "plateau_factor", train.plateau_factor),
      MALNET_KEY_UINT("train", "plateau_patience", train.plateau_patience),
      MALNET_KEY_DOUBLE("train", "min_lr", train.min_lr),
      ConfigKey{"train", "augment",
                [](RunConfig& c, const std::string& k, const std::string& v) { c.train.augment = parse_bool(k, v); },
                [](const RunConfig& c) { return std::string(c.train.augment ? "true" : "false"); }},
      MALNET_KEY_DOUBLE("augment", "rotation_deg", train.augmentation.rotation_deg),
      MALNET_KEY_DOUBLE("augment", "zoom_min", train.augmentation.zoom_min),
      MALNET_KEY_DOUBLE("augment", "zoom_max", train.augmentation.zoom_max),
      MALNET_KEY_DOUBLE("augment", "hflip_prob", train.augmentation.hflip_prob),
      MALNET_KEY_STRING("serve", "bind", serve.bind),
      MALNET_KEY_STRING("serve", "checkpoint", serve.checkpoint),
      MALNET_KEY_STRING("serve", "cors", serve.cors),
  };
  return keys;
}

#undef MALNET_KEY_UINT
#undef MALNET_KEY_DOUBLE
#undef MALNET_KEY_STRING

}  // namespace detail

/// Sets "section.key" to a textual value.
inline void set_config_value(RunConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value) {
  const std::string full = section + "." + key;
  for (const auto& k : detail::config_keys())
    if (section == k.section && key == k.name) return k.set(cfg, full, value);
  bool known_section = false;
  for (const auto& k : detail::config_keys()) known_section |= section == k.section;
  if (!known_section) throw ConfigError("unknown config section [" + section + "]");
  throw ConfigError("unknown config key '" + full + "'");
}

/// Applies one "section.key=value" override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const std::string lhs = detail::trim(assignment.substr(0, eq));
  const auto dot = lhs.find('.');
  if (eq == std::string::npos || dot == std::string::npos)
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  set_config_value(cfg, lhs.substr(0, dot), lhs.substr(dot + 1), assignment.substr(eq + 1));
}

inline void apply_ini(RunConfig& cfg, std::istream& in) {
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  // read_ini drops empty sections, so headers are checked separately
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const std::string t = detail::trim(line);
    if (t.size() < 2 || t.front() != '[' || t.back() != ']') continue;
    const std::string section = detail::trim(t.substr(1, t.size() - 2));
    bool known = false;
    for (const auto& k : detail::config_keys()) known |= section == k.section;
    if (!known) throw ConfigError("unknown config section [" + section + "]");
  }
  boost::property_tree::ptree tree;
  try {
    std::istringstream body_in(text);
    boost::property_tree::read_ini(body_in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) set_config_value(cfg, section, key, value.data());
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  apply_ini(cfg, in);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  RunConfig cfg;
  apply_ini(cfg, in);
  return cfg;
}

/// The fully resolved config in the same INI syntax it is read from.
inline std::string to_ini(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& k : detail::config_keys()) {
    if (section != k.section) {
      if (!section.empty()) out += "\n";
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  }
  return out;
}

/// Splits "host:port".
inline std::pair<std::string, int> parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("serve.bind must be host:port, got '" + bind + "'");
  const int port = static_cast<int>(detail::parse_integer<unsigned>("serve.bind", bind.substr(colon + 1)));
  if (port > 65535) throw ConfigError("serve.bind port out of range");
  return {bind.substr(0, colon), port};
}

}  // namespace malnet
