#pragma once

// Reverse-mode differentiation. A Tape records every differentiable op in
// execution order; backward() replays it in reverse and accumulates
// gradients into the Parameters that were used as leaves.

#include <deque>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "malnet/error.hpp"
#include "malnet/kernels.hpp"
#include "malnet/tensor.hpp"

namespace malnet {

/// A named model tensor. Non-trainable parameters hold buffers such as
/// batch-norm running statistics; they are checkpointed but never optimized.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter(std::string n, Tensor<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename T>
class Tape {
 public:
  // Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  /// With record == false the tape only evaluates: no closures or saved
  /// intermediates are kept and backward() is unavailable.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Frees intermediate values and gradients as soon as backward no longer
  // needs them. Leaves keep their gradients.
  void set_release_intermediates(bool on) noexcept { release_ = on; }

  /// Borrowed tensor that never receives a gradient. Must outlive the tape.
  Var<T> constant(const Tensor<T>& t) { return push_leaf(nullptr, &t, nullptr, false); }

  /// Owned leaf. With requires_grad its gradient is retained after backward.
  Var<T> variable(Tensor<T> t, bool requires_grad = true) {
    return push_leaf(std::make_unique<Tensor<T>>(std::move(t)), nullptr, nullptr,
                     requires_grad && record_);
  }

  /// Leaf bound to a parameter; backward accumulates into p.grad.
  Var<T> parameter(Parameter<T>& p) {
    return push_leaf(nullptr, &p.value, &p, p.trainable && record_);
  }

  /// Records the output of an op. `fn` runs during backward only when some
  /// input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in.id);
    Node node;
    node.owned = std::make_unique<Tensor<T>>(std::move(value));
    node.requires_grad = needs && record_;
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.external) return *n.external;
    if (!n.owned) throw TapeError("value of node " + std::to_string(id) + " was released");
    return *n.owned;
  }

  const Tensor<T>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) {
      if (!zero_cache_ || zero_cache_->shape() != value(id).shape())
        zero_cache_ = std::make_shared<Tensor<T>>(value(id).shape());
      return *zero_cache_;
    }
    return n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Adds `g` into the gradient of node `id`; a no-op for nodes that do not
  /// require gradients.
  void accumulate(std::size_t id, const Tensor<T>& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(Var<T> loss) {
    if (!record_) throw TapeError("backward on a non-recording tape");
    if (done_) throw TapeError("backward called twice without reset()");
    if (loss.tape != this) throw TapeError("loss was not recorded on this tape");
    if (value(loss.id).size() != 1)
      throw TapeError("backward needs a scalar loss, got shape " + to_string(value(loss.id).shape()));
    done_ = true;
    if (!requires_grad(loss.id)) return;
    nodes_[loss.id].grad = Tensor<T>(value(loss.id).shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(n.grad);
      if (n.param) n.param->grad += n.grad;
      if (release_ && n.backward) {
        n.backward = nullptr;
        n.owned.reset();
        n.grad = Tensor<T>();
      }
    }
  }

  /// Forgets every recorded node so the tape can be reused.
  void reset() {
    nodes_.clear();
    done_ = false;
  }

 private:
  struct Node {
    std::unique_ptr<Tensor<T>> owned;
    const Tensor<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push_leaf(std::unique_ptr<Tensor<T>> owned, const Tensor<T>* external, Parameter<T>* p,
                   bool requires_grad) {
    Node node;
    node.owned = std::move(owned);
    node.external = external;
    node.param = p;
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  bool record_ = true;
  bool release_ = false;
  bool done_ = false;
  mutable std::shared_ptr<Tensor<T>> zero_cache_;
};

// ---------------------------------------------------------------------------
// Differentiable ops

namespace ops {

template <typename T>
Tape<T>& tape_of(Var<T> v) {
  if (!v.tape) throw TapeError("variable is not attached to a tape");
  return *v.tape;
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t stride, Padding pad) {
  Tape<T>& tape = tape_of(x);
  Tensor<T> y = kernels::conv2d_forward(x.value(), w.value(), b ? &b->value() : nullptr, stride, pad);
  auto fn = [&tape, x, w, b, stride, pad](const Tensor<T>& gy) {
    auto g = kernels::conv2d_backward(x.value(), w.value(), gy, stride, pad, x.requires_grad(),
                                      w.requires_grad(), b && b->requires_grad());
    if (g.input) tape.accumulate(x.id, *g.input);
    if (g.weight) tape.accumulate(w.id, *g.weight);
    if (g.bias) tape.accumulate(b->id, *g.bias);
  };
  if (b) return tape.record(std::move(y), {x, w, *b}, fn);
  return tape.record(std::move(y), {x, w}, fn);
}

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                   const Tensor<T>& running_var) {
  Tape<T>& tape = tape_of(x);
  const T eps = static_cast<T>(kBatchNormEps);
  Tensor<T> y = kernels::batchnorm_forward_infer(x.value(), gamma.value(), beta.value(),
                                                 running_mean, running_var, eps);
  return tape.record(std::move(y), {x, gamma, beta},
                     [&tape, x, gamma, beta, &running_mean, &running_var, eps](const Tensor<T>& gy) {
                       auto g = kernels::batchnorm_backward_infer(gy, x.value(), gamma.value(),
                                                                  running_mean, running_var, eps);
                       tape.accumulate(x.id, g.input);
                       tape.accumulate(gamma.id, g.gamma);
                       tape.accumulate(beta.id, g.beta);
                     });
}

/// Train mode normalizes with batch statistics and updates the running
/// statistics in place; infer mode reads them only.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                   Tensor<T>& running_var, Mode mode) {
  if (mode == Mode::infer)
    return batchnorm2d(x, gamma, beta, std::as_const(running_mean), std::as_const(running_var));
  Tape<T>& tape = tape_of(x);
  auto cache = std::make_shared<kernels::BatchNormCache<T>>();
  Tensor<T> y = kernels::batchnorm_forward_train(x.value(), gamma.value(), beta.value(),
                                                 static_cast<T>(kBatchNormEps), *cache);
  kernels::update_running_stats(running_mean, running_var, *cache,
                                static_cast<T>(kBatchNormMomentum));
  if (!tape.recording()) cache.reset();
  return tape.record(std::move(y), {x, gamma, beta},
                     [&tape, x, gamma, beta, cache](const Tensor<T>& gy) {
                       auto g = kernels::batchnorm_backward_train(gy, gamma.value(), *cache);
                       tape.accumulate(x.id, g.input);
                       tape.accumulate(gamma.id, g.gamma);
                       tape.accumulate(beta.id, g.beta);
                     });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  return tape.record(kernels::relu_forward(x.value()), {x}, [&tape, x](const Tensor<T>& gy) {
    tape.accumulate(x.id, kernels::relu_backward(x.value(), gy));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = tape_of(a);
  return tape.record(kernels::add_forward(a.value(), b.value()), {a, b},
                     [&tape, a, b](const Tensor<T>& gy) {
                       tape.accumulate(a.id, gy);
                       tape.accumulate(b.id, gy);
                     });
}

template <typename T>
Var<T> maxpool2d(Var<T> x, std::size_t k = 3, std::size_t stride = 2) {
  Tape<T>& tape = tape_of(x);
  auto r = kernels::maxpool_forward(x.value(), k, stride);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(std::move(r.argmax));
  const Shape in_shape = x.shape();
  return tape.record(std::move(r.output), {x}, [&tape, x, argmax, in_shape](const Tensor<T>& gy) {
    tape.accumulate(x.id, kernels::maxpool_backward(in_shape, *argmax, gy));
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  const Shape in_shape = x.shape();
  return tape.record(kernels::global_avg_pool_forward(x.value()), {x},
                     [&tape, x, in_shape](const Tensor<T>& gy) {
                       tape.accumulate(x.id, kernels::global_avg_pool_backward(in_shape, gy));
                     });
}

template <typename T>
Var<T> dense(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  Tape<T>& tape = tape_of(x);
  Tensor<T> y = kernels::dense_forward(x.value(), w.value(), b ? &b->value() : nullptr);
  auto fn = [&tape, x, w, b](const Tensor<T>& gy) {
    auto g = kernels::dense_backward(x.value(), w.value(), gy, x.requires_grad(), w.requires_grad(),
                                     b && b->requires_grad());
    if (g.input) tape.accumulate(x.id, *g.input);
    if (g.weight) tape.accumulate(w.id, *g.weight);
    if (g.bias) tape.accumulate(b->id, *g.bias);
  };
  if (b) return tape.record(std::move(y), {x, w, *b}, fn);
  return tape.record(std::move(y), {x, w}, fn);
}

/// Inverted dropout. Infer mode returns the input node unchanged.
template <typename T, typename Rng>
Var<T> dropout(Var<T> x, double rate, Mode mode, Rng& rng) {
  kernels::check_dropout_rate(rate);
  if (mode == Mode::infer || rate == 0.0) return x;
  Tape<T>& tape = tape_of(x);
  auto mask = std::make_shared<Tensor<T>>(kernels::dropout_mask<T>(x.shape(), rate, rng));
  return tape.record(kernels::multiply(x.value(), *mask), {x}, [&tape, x, mask](const Tensor<T>& gy) {
    tape.accumulate(x.id, kernels::multiply(gy, *mask));
  });
}

template <typename T>
Var<T> softmax(Var<T> logits) {
  Tape<T>& tape = tape_of(logits);
  auto probs = std::make_shared<Tensor<T>>(kernels::softmax_forward(logits.value()));
  Tensor<T> out = *probs;
  return tape.record(std::move(out), {logits}, [&tape, logits, probs](const Tensor<T>& gy) {
    tape.accumulate(logits.id, kernels::softmax_backward(*probs, gy));
  });
}

template <typename T>
Var<T> sparse_ce_loss(Var<T> logits, std::span<const int> labels) {
  Tape<T>& tape = tape_of(logits);
  const T loss = kernels::sparse_ce_forward(logits.value(), labels);
  std::vector<int> saved(labels.begin(), labels.end());
  return tape.record(Tensor<T>(Shape{}, loss), {logits},
                     [&tape, logits, saved = std::move(saved)](const Tensor<T>& gy) {
                       tape.accumulate(logits.id, kernels::sparse_ce_backward(logits.value(), saved, gy[0]));
                     });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tape = tape_of(x);
  return tape.record(Tensor<T>(Shape{}, x.value().sum()), {x}, [&tape, x](const Tensor<T>& gy) {
    tape.accumulate(x.id, Tensor<T>(x.shape(), gy[0]));
  });
}

/// sum(x * weights) with a constant weight tensor.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  Tape<T>& tape = tape_of(x);
  x.value().require_same_shape(weights, "weighted_sum");
  T s{0};
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  auto w = std::make_shared<Tensor<T>>(weights);
  return tape.record(Tensor<T>(Shape{}, s), {x}, [&tape, x, w](const Tensor<T>& gy) {
    Tensor<T> g = *w;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= gy[0];
    tape.accumulate(x.id, g);
  });
}

}  // namespace ops
}  // namespace malnet
