#pragma once

// Bottleneck residual network: a 7x7 stem, four stages of 1x1/3x3/1x1
// bottleneck blocks with an expansion factor of 4, and a dense head.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "malnet/autograd.hpp"
#include "malnet/error.hpp"
#include "malnet/tensor.hpp"

namespace malnet {

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"parasitized", "uninfected"};
  return names;
}

struct ModelConfig {
  std::size_t input_channels = 3;
  std::size_t input_size = 224;
  std::size_t stem_channels = 64;
  std::array<std::size_t, 4> stage_blocks{3, 4, 6, 3};
  std::array<std::size_t, 4> stage_widths{64, 128, 256, 512};
  std::size_t expansion = 4;
  std::size_t head_units = 512;
  std::size_t num_classes = 2;
  double dropout_rate = 0.5;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels}, {"input_size", c.input_size},
                     {"stem_channels", c.stem_channels},   {"stage_blocks", c.stage_blocks},
                     {"stage_widths", c.stage_widths},     {"expansion", c.expansion},
                     {"head_units", c.head_units},         {"num_classes", c.num_classes},
                     {"dropout_rate", c.dropout_rate}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("input_channels").get_to(c.input_channels);
  j.at("input_size").get_to(c.input_size);
  j.at("stem_channels").get_to(c.stem_channels);
  j.at("stage_blocks").get_to(c.stage_blocks);
  j.at("stage_widths").get_to(c.stage_widths);
  j.at("expansion").get_to(c.expansion);
  j.at("head_units").get_to(c.head_units);
  j.at("num_classes").get_to(c.num_classes);
  j.at("dropout_rate").get_to(c.dropout_rate);
}

/// Named parameters in creation order. Names are unique.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool trainable = true) {
    if (index_.contains(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.emplace_back(std::move(name), std::move(value), trainable);
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const noexcept { return params_.size(); }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Sum of element counts over trainable parameters.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.size();
    return n;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Indices into a ParameterStore.
struct ConvBn {
  std::size_t weight, gamma, beta, running_mean, running_var;
  std::size_t stride = 1;
};

struct BottleneckBlock {
  std::size_t in_channels = 0;
  std::size_t width = 0;  // bottleneck width f; output has expansion * f channels
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  ConvBn reduce, spatial, expand;
  std::optional<ConvBn> projection;
};

struct DenseHead {
  std::size_t hidden_weight, hidden_bias, out_weight, out_bias;
};

/// Shapes observed at stage boundaries during a forward pass.
struct ShapeTrace {
  std::vector<std::string> labels;
  std::vector<Shape> shapes;
  void add(std::string label, const Shape& s) {
    labels.push_back(std::move(label));
    shapes.push_back(s);
  }
};

template <typename T>
class ModelGraph {
 public:
  using Rng = std::mt19937_64;

  ModelGraph(const ModelConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
    build();
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  // Free-form creation record (e.g. the training config), saved with checkpoints.
  nlohmann::json& metadata() noexcept { return metadata_; }
  const nlohmann::json& metadata() const noexcept { return metadata_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }
  const std::vector<std::vector<BottleneckBlock>>& stages() const noexcept { return stages_; }
  std::vector<std::vector<BottleneckBlock>>& stages() noexcept { return stages_; }
  const ConvBn& stem() const noexcept { return stem_; }
  const DenseHead& head() const noexcept { return head_; }

  std::size_t parameter_count() const { return params_.trainable_count(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p.trainable) out.push_back(&p);
    return out;
  }

  Shape input_shape(std::size_t batch) const {
    return {batch, config_.input_channels, config_.input_size, config_.input_size};
  }

  /// Records the network up to the logits. Train mode updates batch-norm
  /// running statistics and needs `rng` for dropout.
  Var<T> logits(Tape<T>& tape, const Tensor<T>& batch, Mode mode, Rng* rng = nullptr,
                ShapeTrace* trace = nullptr) {
    return run(*this, tape, batch, mode, rng, trace);
  }

  /// Infer-mode logits on a read-only model; safe to call concurrently.
  Var<T> logits(Tape<T>& tape, const Tensor<T>& batch, ShapeTrace* trace = nullptr) const {
    return run(*this, tape, batch, Mode::infer, nullptr, trace);
  }

  /// Class probabilities [N, num_classes].
  Tensor<T> forward(const Tensor<T>& batch, Mode mode, Rng* rng = nullptr,
                    ShapeTrace* trace = nullptr) {
    Tape<T> tape(false);
    auto probs = ops::softmax(logits(tape, batch, mode, rng, trace));
    if (trace) trace->add("softmax", probs.shape());
    return probs.value();
  }

  Tensor<T> predict_proba(const Tensor<T>& batch, ShapeTrace* trace = nullptr) const {
    Tape<T> tape(false);
    auto probs = ops::softmax(logits(tape, batch, trace));
    if (trace) trace->add("softmax", probs.shape());
    return probs.value();
  }

  /// Residual bottleneck: relu(F(x) + shortcut(x)).
  Var<T> bottleneck_forward(Tape<T>& tape, const BottleneckBlock& block, Var<T> x, Mode mode) {
    return run_block(*this, tape, block, x, mode);
  }
  Var<T> bottleneck_forward(Tape<T>& tape, const BottleneckBlock& block, Var<T> x) const {
    return run_block(*this, tape, block, x, Mode::infer);
  }

  /// Copies of every parameter value (trainable and buffers) in store order.
  std::vector<Tensor<T>> snapshot() const {
    std::vector<Tensor<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  void restore(const std::vector<Tensor<T>>& values) {
    if (values.size() != params_.size())
      throw ArgumentError("snapshot holds " + std::to_string(values.size()) + " tensors, model has " +
                          std::to_string(params_.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
      params_[i].value.require_same_shape(values[i], params_[i].name.c_str());
      params_[i].value = values[i];
    }
  }

 private:
  template <typename Self>
  static Var<T> leaf(Self& self, Tape<T>& tape, std::size_t index) {
    if constexpr (std::is_const_v<Self>)
      return tape.constant(self.params_[index].value);
    else
      return tape.parameter(self.params_[index]);
  }

  template <typename Self>
  static Var<T> conv_bn(Self& self, Tape<T>& tape, const ConvBn& cb, Var<T> x, Mode mode) {
    auto y = ops::conv2d<T>(x, leaf(self, tape, cb.weight), std::nullopt, cb.stride, Padding::same);
    auto gamma = leaf(self, tape, cb.gamma);
    auto beta = leaf(self, tape, cb.beta);
    auto& mean = self.params_[cb.running_mean].value;
    auto& var = self.params_[cb.running_var].value;
    if constexpr (std::is_const_v<Self>)
      return ops::batchnorm2d(y, gamma, beta, mean, var);
    else
      return ops::batchnorm2d(y, gamma, beta, mean, var, mode);
  }

  template <typename Self>
  static Var<T> run_block(Self& self, Tape<T>& tape, const BottleneckBlock& b, Var<T> x, Mode mode) {
    if (x.shape().size() != 4 || x.shape()[1] != b.in_channels)
      throw ShapeError("bottleneck block expects " + std::to_string(b.in_channels) +
                       " input channels, got " + to_string(x.shape()));
    auto h = ops::relu(conv_bn(self, tape, b.reduce, x, mode));
    h = ops::relu(conv_bn(self, tape, b.spatial, h, mode));
    h = conv_bn(self, tape, b.expand, h, mode);
    auto shortcut = b.projection ? conv_bn(self, tape, *b.projection, x, mode) : x;
    return ops::relu(ops::add(h, shortcut));
  }

  template <typename Self>
  static Var<T> run(Self& self, Tape<T>& tape, const Tensor<T>& batch, Mode mode, Rng* rng,
                    ShapeTrace* trace) {
    const ModelConfig& c = self.config_;
    if (batch.rank() != 4 || batch.dim(1) != c.input_channels || batch.dim(2) != c.input_size ||
        batch.dim(3) != c.input_size)
      throw ShapeError("model input must be " + to_string(self.input_shape(batch.rank() ? batch.dim(0) : 1)) +
                       ", got " + to_string(batch.shape()));
    if (mode == Mode::train && c.dropout_rate > 0.0 && rng == nullptr)
      throw ArgumentError("train-mode forward needs a random generator for dropout");
    auto note = [trace](const char* label, Var<T> v) {
      if (trace) trace->add(label, v.shape());
    };

    auto x = tape.constant(batch);
    x = ops::relu(conv_bn(self, tape, self.stem_, x, mode));
    note("stem", x);
    x = ops::maxpool2d(x, 3, 2);
    note("maxpool", x);
    for (std::size_t s = 0; s < self.stages_.size(); ++s) {
      for (const auto& block : self.stages_[s]) x = run_block(self, tape, block, x, mode);
      note(kStageLabels[s], x);
    }
    x = ops::global_avg_pool(x);
    note("gap", x);
    x = ops::relu(ops::dense<T>(x, leaf(self, tape, self.head_.hidden_weight),
                                leaf(self, tape, self.head_.hidden_bias)));
    if (mode == Mode::train && c.dropout_rate > 0.0) x = ops::dropout(x, c.dropout_rate, mode, *rng);
    note("dense", x);
    x = ops::dense<T>(x, leaf(self, tape, self.head_.out_weight), leaf(self, tape, self.head_.out_bias));
    note("logits", x);
    return x;
  }

  static constexpr double kOutputInitGain = 0.1;
  static constexpr const char* kStageLabels[4] = {"conv2_x", "conv3_x", "conv4_x", "conv5_x"};

  ConvBn make_conv_bn(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                      std::size_t stride, Rng& rng) {
    ConvBn cb;
    cb.stride = stride;
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in * k * k));
    std::normal_distribution<double> normal(0.0, std_dev);
    Tensor<T> w({out, in, k, k});
    for (auto& v : w.values()) v = static_cast<T>(normal(rng));
    cb.weight = params_.add(prefix + ".weight", std::move(w));
    cb.gamma = params_.add(prefix + ".bn.gamma", Tensor<T>({out}, T{1}));
    cb.beta = params_.add(prefix + ".bn.beta", Tensor<T>({out}, T{0}));
    cb.running_mean = params_.add(prefix + ".bn.running_mean", Tensor<T>({out}, T{0}), false);
    cb.running_var = params_.add(prefix + ".bn.running_var", Tensor<T>({out}, T{1}), false);
    return cb;
  }

  std::pair<std::size_t, std::size_t> make_dense(const std::string& prefix, std::size_t in,
                                                 std::size_t out, Rng& rng, double gain = 1.0) {
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    Tensor<T> w({in, out});
    for (auto& v : w.values()) v = static_cast<T>(uniform(rng));
    const std::size_t wi = params_.add(prefix + ".weight", std::move(w));
    const std::size_t bi = params_.add(prefix + ".bias", Tensor<T>({out}, T{0}));
    return {wi, bi};
  }

  void build() {
    const ModelConfig& c = config_;
    if (c.num_classes < 2) throw ArgumentError("model needs at least two classes");
    if (c.num_classes == 2) class_names_ = default_class_names();
    else
      for (std::size_t i = 0; i < c.num_classes; ++i) class_names_.push_back("class" + std::to_string(i));

    Rng rng(seed_);
    stem_ = make_conv_bn("stem.conv", c.input_channels, c.stem_channels, 7, 2, rng);
    std::size_t channels = c.stem_channels;
    stages_.assign(4, {});
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t width = c.stage_widths[s];
      for (std::size_t b = 0; b < c.stage_blocks[s]; ++b) {
        const std::string prefix = "conv" + std::to_string(s + 2) + "_" + std::to_string(b + 1);
        BottleneckBlock block;
        block.in_channels = channels;
        block.width = width;
        block.out_channels = c.expansion * width;
        block.stride = (b == 0 && s > 0) ? 2 : 1;
        block.reduce = make_conv_bn(prefix + ".reduce", channels, width, 1, 1, rng);
        block.spatial = make_conv_bn(prefix + ".spatial", width, width, 3, block.stride, rng);
        block.expand = make_conv_bn(prefix + ".expand", width, block.out_channels, 1, 1, rng);
        if (block.in_channels != block.out_channels || block.stride != 1)
          block.projection =
              make_conv_bn(prefix + ".projection", channels, block.out_channels, 1, block.stride, rng);
        channels = block.out_channels;
        stages_[s].push_back(std::move(block));
      }
    }
    auto [hw, hb] = make_dense("head.hidden", channels, c.head_units, rng);
    // Output layer starts at a tenth of the Glorot range so the initial
    // class distribution is close to uniform.
    auto [ow, ob] = make_dense("head.output", c.head_units, c.num_classes, rng, kOutputInitGain);
    head_ = {hw, hb, ow, ob};
  }

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> class_names_;
  nlohmann::json metadata_ = nlohmann::json::object();
  ParameterStore<T> params_;
  ConvBn stem_{};
  std::vector<std::vector<BottleneckBlock>> stages_;
  DenseHead head_{};
};

/// The default network: stages [3,4,6,3] at widths [64,128,256,512] on
/// 3x224x224 inputs with a 512-unit head and two classes.
template <typename T = float>
ModelGraph<T> build_model(std::uint64_t seed, const ModelConfig& config = {}) {
  return ModelGraph<T>(config, seed);
}

}  // namespace malnet
