#pragma once

// Central finite differences against tape gradients, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "malnet/malnet.hpp"
#include "support/fixtures.hpp"

namespace malnet::testing {

using Vard = Var<double>;
using OpFn = std::function<Vard(Tape<double>&, const std::vector<Vard>&)>;

struct GradCase {
  std::string name;
  std::vector<Tensord> inputs;
  OpFn op;
};

inline constexpr double kGradTolerance = 1e-5;
// Relative error denominator floor, so exact zeros compare by absolute error.
inline constexpr double kGradErrorFloor = 1e-4;

inline double grad_step(double theta) { return 1e-4 * std::max(1.0, std::abs(theta)); }

/// loss = sum(op(inputs) * R) for a fixed random R.
inline double eval_loss(const GradCase& c, const std::vector<Tensord>& inputs, const Tensord& r) {
  Tape<double> tape(false);
  std::vector<Vard> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t, false));
  return ops::weighted_sum(c.op(tape, vars), r).value()[0];
}

/// Largest elementwise relative error over every input element.
inline double max_relative_error(const GradCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xabcdefull);
  Tensord r;
  std::vector<Tensord> analytic;
  {
    Tape<double> tape;
    std::vector<Vard> vars;
    for (const auto& t : c.inputs) vars.push_back(tape.variable(t));
    Vard out = c.op(tape, vars);
    r = random_tensor(out.shape(), rng);
    Vard loss = ops::weighted_sum(out, r);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  double worst = 0;
  std::vector<Tensord> probe = c.inputs;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < probe[i].size(); ++j) {
      const double theta = c.inputs[i][j];
      const double h = grad_step(theta);
      probe[i][j] = theta + h;
      const double up = eval_loss(c, probe, r);
      probe[i][j] = theta - h;
      const double down = eval_loss(c, probe, r);
      probe[i][j] = theta;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradErrorFloor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

/// Values at least `gap` apart in random order, so max-pool argmaxes stay put
/// under a step of size grad_step.
inline Tensord distinct_tensor(const Shape& shape, std::mt19937_64& rng, double gap = 0.05) {
  Tensord t(shape);
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const double offset = -gap * static_cast<double>(t.size()) / 2;
  for (std::size_t i = 0; i < order.size(); ++i) t[order[i]] = offset + gap * static_cast<double>(i);
  return t;
}

/// Values with |x| >= margin, keeping relu away from its kink.
inline Tensord away_from_zero(const Shape& shape, std::mt19937_64& rng, double margin = 0.05) {
  Tensord t = random_tensor(shape, rng);
  for (auto& v : t.values())
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  return t;
}

/// One case per differentiable op, with inputs drawn from `seed`.
inline std::vector<GradCase> grad_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto rnd = [&](const Shape& s, double scale = 1.0) { return random_tensor(s, rng, scale); };
  std::vector<GradCase> cases;

  cases.push_back({"conv2d_same_stride1_bias",
                   {rnd({2, 3, 5, 5}), rnd({4, 3, 3, 3}, 0.5), rnd({4})},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     return ops::conv2d(v[0], v[1], std::optional(v[2]), 1, Padding::same);
                   }});
  cases.push_back({"conv2d_same_stride2",
                   {rnd({2, 2, 6, 7}), rnd({3, 2, 3, 3}, 0.5)},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     return ops::conv2d<double>(v[0], v[1], std::nullopt, 2, Padding::same);
                   }});
  cases.push_back({"conv2d_7x7_stride2",
                   {rnd({1, 2, 9, 9}), rnd({2, 2, 7, 7}, 0.3)},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     return ops::conv2d<double>(v[0], v[1], std::nullopt, 2, Padding::same);
                   }});
  cases.push_back({"conv2d_pointwise_stride2",
                   {rnd({2, 3, 5, 4}), rnd({5, 3, 1, 1})},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     return ops::conv2d<double>(v[0], v[1], std::nullopt, 2, Padding::same);
                   }});
  cases.push_back({"conv2d_valid",
                   {rnd({2, 2, 5, 6}), rnd({3, 2, 3, 2}, 0.5), rnd({3})},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     return ops::conv2d(v[0], v[1], std::optional(v[2]), 1, Padding::valid);
                   }});
  cases.push_back({"batchnorm_train",
                   {rnd({3, 2, 3, 3}), rnd({2}), rnd({2})},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     Tensord rm({2}, 0.0), rv({2}, 1.0);
                     return ops::batchnorm2d(v[0], v[1], v[2], rm, rv, Mode::train);
                   }});
  {
    auto rm = std::make_shared<Tensord>(rnd({3}));
    auto rv = std::make_shared<Tensord>(rnd({3}));
    for (auto& x : rv->values()) x = 0.5 + std::abs(x);
    cases.push_back({"batchnorm_infer",
                     {rnd({2, 3, 2, 3}), rnd({3}), rnd({3})},
                     [rm, rv](Tape<double>&, const std::vector<Vard>& v) {
                       return ops::batchnorm2d(v[0], v[1], v[2], std::as_const(*rm), std::as_const(*rv));
                     }});
  }
  cases.push_back({"relu", {away_from_zero({2, 3, 4, 4}, rng)},
                   [](Tape<double>&, const std::vector<Vard>& v) { return ops::relu(v[0]); }});
  cases.push_back({"add", {rnd({2, 3, 2, 2}), rnd({2, 3, 2, 2})},
                   [](Tape<double>&, const std::vector<Vard>& v) { return ops::add(v[0], v[1]); }});
  cases.push_back({"maxpool_3x3_stride2", {distinct_tensor({2, 2, 7, 6}, rng)},
                   [](Tape<double>&, const std::vector<Vard>& v) { return ops::maxpool2d(v[0], 3, 2); }});
  cases.push_back({"global_avg_pool", {rnd({2, 3, 3, 4})},
                   [](Tape<double>&, const std::vector<Vard>& v) { return ops::global_avg_pool(v[0]); }});
  cases.push_back({"dense", {rnd({3, 5}), rnd({5, 4}), rnd({4})},
                   [](Tape<double>&, const std::vector<Vard>& v) {
                     return ops::dense(v[0], v[1], std::optional(v[2]));
                   }});
  {
    const std::uint64_t mask_seed = rng();
    cases.push_back({"dropout_train", {rnd({4, 6})},
                     [mask_seed](Tape<double>&, const std::vector<Vard>& v) {
                       std::mt19937_64 mask_rng(mask_seed);  // same mask on every evaluation
                       return ops::dropout(v[0], 0.5, Mode::train, mask_rng);
                     }});
  }
  cases.push_back({"softmax", {rnd({3, 4})},
                   [](Tape<double>&, const std::vector<Vard>& v) { return ops::softmax(v[0]); }});
  {
    std::vector<int> labels(4);
    for (auto& l : labels) l = static_cast<int>(rng() % 3);
    cases.push_back({"sparse_ce_loss", {rnd({4, 3}, 2.0)},
                     [labels](Tape<double>&, const std::vector<Vard>& v) {
                       return ops::sparse_ce_loss(v[0], labels);
                     }});
  }
  {
    std::vector<int> labels(3);
    for (auto& l : labels) l = static_cast<int>(rng() % 2);
    // conv -> bn -> relu -> residual add -> pool -> dense -> loss
    cases.push_back({"composite_residual_head",
                     {rnd({3, 2, 4, 4}), rnd({2, 2, 3, 3}, 0.5), rnd({2}), rnd({2}), rnd({2, 2}), rnd({2})},
                     [labels](Tape<double>&, const std::vector<Vard>& v) {
                       Tensord rm({2}, 0.0), rv({2}, 1.0);
                       auto f = ops::conv2d<double>(v[0], v[1], std::nullopt, 1, Padding::same);
                       f = ops::batchnorm2d(f, v[2], v[3], rm, rv, Mode::train);
                       auto y = ops::add(f, v[0]);
                       auto g = ops::global_avg_pool(y);
                       return ops::sparse_ce_loss(ops::dense(g, v[4], std::optional(v[5])), labels);
                     }});
  }
  return cases;
}

}  // namespace malnet::testing
