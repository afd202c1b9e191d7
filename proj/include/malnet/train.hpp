#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "malnet/autograd.hpp"
#include "malnet/data.hpp"
#include "malnet/error.hpp"
#include "malnet/model.hpp"

namespace malnet {

struct TrainConfig {
  double lr = 0.001;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t es_patience = 5;
  double es_min_delta = 0.0;
  double plateau_factor = 0.1;
  std::size_t plateau_patience = 3;
  double min_lr = 1e-6;
  std::uint64_t seed = 42;
  bool augment = true;
  AugmentConfig augmentation{};

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train lr must be > 0");
    if (epochs < 1) throw ConfigError("train epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train batch_size must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train plateau_factor must be in (0,1)");
    if (es_patience < 1 || plateau_patience < 1) throw ConfigError("patience values must be >= 1");
    if (!(min_lr >= 0.0)) throw ConfigError("train min_lr must be >= 0");
    if (!(es_min_delta >= 0.0)) throw ConfigError("train es_min_delta must be >= 0");
    augmentation.validate();
  }
};

inline nlohmann::json to_json_value(const TrainConfig& c) {
  const AugmentConfig& a = c.augmentation;
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"es_patience", c.es_patience},
          {"es_min_delta", c.es_min_delta},
          {"plateau_factor", c.plateau_factor},
          {"plateau_patience", c.plateau_patience},
          {"min_lr", c.min_lr},
          {"seed", c.seed},
          {"augment", c.augment},
          {"augmentation",
           {{"rotation_deg", a.rotation_deg}, {"zoom_min", a.zoom_min}, {"zoom_max", a.zoom_max}, {"hflip_prob", a.hflip_prob}}}};
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m, v;  // parallel to the parameter list
};

/// One Adam update with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
/// A parameter whose gradient is identically zero did not take part in the
/// loss and is left untouched, moments included.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size())
    throw ArgumentError("Adam state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                        std::to_string(params.size()));
  for (const auto* p : params)
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    const auto g = p.grad.values();
    if (std::all_of(g.begin(), g.end(), [](T x) { return x == T{0}; })) continue;
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    auto theta = p.value.values();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = g[k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      theta[k] = static_cast<T>(theta[k] - lr * (mk / bc1) / (std::sqrt(vk / bc2) + state.eps));
    }
  }
}

template <typename T>
void adam_step(std::vector<Parameter<T>*>& params, AdamState<T>& state, double lr) {
  adam_step(std::span<Parameter<T>* const>(params.data(), params.size()), state, lr);
}

// ---------------------------------------------------------------------------
// Epochs

struct EpochResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t examples = 0;
};

/// Row-wise argmax; ties resolve to the lower class index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& scores) {
  const std::size_t N = scores.dim(0), K = scores.dim(1);
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (scores[n * K + k] > scores[n * K + best]) best = k;
    out[n] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::size_t count_correct(const Tensor<T>& scores, std::span<const int> labels) {
  const auto pred = argmax_rows(scores);
  std::size_t c = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) c += pred[i] == labels[i];
  return c;
}

/// One optimization step on a batch. Returns the train-mode loss and logits.
template <typename T>
std::pair<double, Tensor<T>> train_step(ModelGraph<T>& model, const Batch<T>& batch,
                                        AdamState<T>& adam, double lr, std::mt19937_64& rng) {
  model.zero_grad();
  Tape<T> tape;
  tape.set_release_intermediates(true);
  auto logits = model.logits(tape, batch.images, Mode::train, &rng);
  Tensor<T> logits_value = logits.value();
  auto loss = ops::sparse_ce_loss(logits, batch.labels);
  const double loss_value = loss.value()[0];
  if (!std::isfinite(loss_value)) throw NumericError("non-finite training loss");
  tape.backward(loss);
  auto params = model.trainable_parameters();
  adam_step(params, adam, lr);
  return {loss_value, std::move(logits_value)};
}

/// Train mode: forward/backward/Adam per batch with train-mode layers; the
/// reported accuracy comes from those train-mode logits. Eval mode: infer
/// layers only, no parameter or running-statistic changes.
template <typename T>
EpochResult run_epoch(ModelGraph<T>& model, BatchStream<T>& stream, std::size_t epoch, Mode mode,
                      AdamState<T>* adam = nullptr, double lr = 0.0, std::mt19937_64* rng = nullptr) {
  if (mode == Mode::train && (!adam || !rng))
    throw ArgumentError("train epoch needs optimizer state and a random generator");
  stream.start_epoch(epoch);
  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  Batch<T> batch;
  while (stream.next(batch)) {
    const std::size_t b = batch.labels.size();
    if (mode == Mode::train) {
      auto [loss, logits] = train_step(model, batch, *adam, lr, *rng);
      loss_sum += loss * static_cast<double>(b);
      correct += count_correct(logits, batch.labels);
    } else {
      const ModelGraph<T>& frozen = model;
      Tape<T> tape(false);
      auto logits = frozen.logits(tape, batch.images);
      const double loss = kernels::sparse_ce_forward(logits.value(), batch.labels);
      if (!std::isfinite(loss)) throw NumericError("non-finite evaluation loss");
      loss_sum += loss * static_cast<double>(b);
      correct += count_correct(logits.value(), batch.labels);
    }
    seen += b;
  }
  if (seen == 0) throw DatasetError("epoch stream produced no batches");
  return {loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen), seen};
}

// ---------------------------------------------------------------------------
// Callbacks

template <typename T>
struct CallbackState {
  double best_monitor = std::numeric_limits<double>::infinity();
  std::vector<Tensor<T>> best_weights;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_improve_es = 0;
  std::size_t epochs_since_improve_lr = 0;
  double plateau_best = std::numeric_limits<double>::infinity();
  double current_lr = 0.0;
  std::size_t epoch = 0;  // epochs observed by early stopping
  bool stopped = false;

  explicit CallbackState(const TrainConfig& cfg) : current_lr(cfg.lr) {}
};

/// Reduce-on-plateau: after plateau_patience epochs without improvement the
/// learning rate is multiplied by plateau_factor, floored at min_lr.
template <typename T>
void plateau_update(CallbackState<T>& cb, double val_loss, const TrainConfig& cfg) {
  if (val_loss < cb.plateau_best - cfg.es_min_delta) {
    cb.plateau_best = val_loss;
    cb.epochs_since_improve_lr = 0;
    return;
  }
  if (++cb.epochs_since_improve_lr >= cfg.plateau_patience) {
    cb.current_lr = std::max(cb.current_lr * cfg.plateau_factor, cfg.min_lr);
    cb.epochs_since_improve_lr = 0;
  }
}

/// Early stopping on validation loss. Improvements snapshot the model; when
/// patience runs out the best snapshot is restored and `stopped` is set.
template <typename T>
void early_stop_update(CallbackState<T>& cb, double val_loss, const TrainConfig& cfg,
                       ModelGraph<T>& model) {
  ++cb.epoch;
  if (val_loss < cb.best_monitor - cfg.es_min_delta) {
    cb.best_monitor = val_loss;
    cb.best_weights = model.snapshot();
    cb.best_epoch = cb.epoch;
    cb.epochs_since_improve_es = 0;
    return;
  }
  if (++cb.epochs_since_improve_es >= cfg.es_patience) {
    cb.stopped = true;
    if (!cb.best_weights.empty()) model.restore(cb.best_weights);
  }
}

// ---------------------------------------------------------------------------
// History and fit

struct HistoryRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
  double lr = 0;  // learning rate used during the epoch

  friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

using History = std::vector<HistoryRow>;

inline std::string history_csv(const History& h) {
  std::string out = "epoch,train_loss,train_acc,val_loss,val_acc,lr\n";
  char buf[256];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6g,%.6g,%.6g,%.6g\n", r.epoch, r.train_loss, r.train_acc,
                  r.val_loss, r.val_acc, r.lr);
    out += buf;
  }
  return out;
}

struct FitSummary {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

/// Runs up to cfg.epochs of train + validation epochs, applying the plateau
/// then the early-stopping callback after each. Rows are appended to
/// `history` as epochs finish, so a partial history survives an exception.
/// On return the model holds the best-validation weights.
template <typename T>
FitSummary fit(ModelGraph<T>& model, const DatasetIndex& train, const DatasetIndex& val,
               const TrainConfig& cfg, History& history,
               std::function<Tensor<T>(const ImageRecord&)> loader = {},
               std::function<void(const HistoryRow&)> on_epoch = {}) {
  cfg.validate();
  if (train.empty() || val.empty()) throw DatasetError("fit needs non-empty train and validation splits");
  const std::size_t size = model.config().input_size;
  if (!loader) loader = file_loader<T>(size);
  BatchStream<T> train_stream(train, cfg.batch_size, true, cfg.seed,
                              cfg.augment ? std::optional(cfg.augmentation) : std::nullopt, loader);
  BatchStream<T> val_stream(val, cfg.batch_size, false, cfg.seed, std::nullopt, loader);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  AdamState<T> adam;
  CallbackState<T> cb(cfg);
  FitSummary summary;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cb.current_lr;
    const EpochResult tr = run_epoch(model, train_stream, epoch, Mode::train, &adam, lr, &rng);
    const EpochResult va = run_epoch(model, val_stream, epoch, Mode::infer);
    HistoryRow row{epoch + 1, tr.loss, tr.accuracy, va.loss, va.accuracy, lr};
    history.push_back(row);
    summary.epochs_run = epoch + 1;
    plateau_update(cb, va.loss, cfg);
    early_stop_update(cb, va.loss, cfg, model);
    if (on_epoch) on_epoch(row);
    if (cb.stopped) break;
  }
  if (!cb.stopped && !cb.best_weights.empty()) model.restore(cb.best_weights);
  summary.best_epoch = cb.best_epoch;
  summary.best_val_loss = cb.best_monitor;
  summary.stopped_early = cb.stopped;
  return summary;
}

}  // namespace malnet
