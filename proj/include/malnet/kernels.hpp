#pragma once

// Forward and backward numerical kernels on plain tensors. These are pure
// functions; the differentiable wrappers in autograd.hpp record them on a tape.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "malnet/error.hpp"
#include "malnet/tensor.hpp"

namespace malnet {

enum class Padding { same, valid };
enum class Mode { train, infer };

namespace kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                     ", got " + to_string(s));
}

// ---------------------------------------------------------------------------
// Window geometry shared by convolution and pooling.

struct Window1d {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

/// Same padding: output ceil(n/stride), total pad max((out-1)*stride + k - n, 0)
/// with the odd pixel going after. Valid padding: floor((n-k)/stride) + 1.
inline Window1d window_1d(std::size_t n, std::size_t k, std::size_t stride, Padding pad) {
  if (stride == 0) throw ArgumentError("stride must be positive");
  if (k == 0) throw ArgumentError("window extent must be positive");
  Window1d w;
  if (pad == Padding::same) {
    w.out = (n + stride - 1) / stride;
    const std::size_t needed = (w.out - 1) * stride + k;
    const std::size_t total = needed > n ? needed - n : 0;
    w.pad_before = total / 2;
  } else {
    if (n < k)
      throw ShapeError("window of extent " + std::to_string(k) + " exceeds input extent " +
                       std::to_string(n) + " under valid padding");
    w.out = (n - k) / stride + 1;
  }
  return w;
}

struct ConvGeometry {
  std::size_t channels, in_h, in_w, k_h, k_w, stride;
  Window1d rows, cols;

  std::size_t patch() const { return channels * k_h * k_w; }
  std::size_t out_pixels() const { return rows.out * cols.out; }
  bool is_pointwise() const {
    return k_h == 1 && k_w == 1 && stride == 1 && rows.pad_before == 0 && cols.pad_before == 0;
  }
};

inline ConvGeometry conv_geometry(std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                                  std::size_t kw, std::size_t stride, Padding pad) {
  return {c, h, w, kh, kw, stride, window_1d(h, kh, stride, pad), window_1d(w, kw, stride, pad)};
}

// col[(c*kh + i)*kw + j][oh*Wo + ow] = image[c][oh*s - pt + i][ow*s - pl + j], zero outside.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.in_h * g.in_w;
    for (std::size_t i = 0; i < g.k_h; ++i) {
      for (std::size_t j = 0; j < g.k_w; ++j) {
        T* row = col + ((c * g.k_h + i) * g.k_w + j) * P;
        for (std::size_t oh = 0; oh < g.rows.out; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.rows.pad_before);
          T* dst = row + oh * g.cols.out;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.cols.out, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.in_w;
          for (std::size_t ow = 0; ow < g.cols.out; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.cols.pad_before);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? T{0}
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t P = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.in_h * g.in_w;
    for (std::size_t i = 0; i < g.k_h; ++i) {
      for (std::size_t j = 0; j < g.k_w; ++j) {
        const T* row = col + ((c * g.k_h + i) * g.k_w + j) * P;
        for (std::size_t oh = 0; oh < g.rows.out; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.rows.pad_before);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.in_w;
          const T* src = row + oh * g.cols.out;
          for (std::size_t ow = 0; ow < g.cols.out; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.cols.pad_before);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in_w))
              dst[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, no kernel flip)

template <typename T>
ConvGeometry check_conv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                        std::size_t stride, Padding pad) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  if (weight.dim(1) != input.dim(1))
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) +
                     " does not match input channels of " + to_string(input.shape()));
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(0)))
    throw ShapeError("conv2d: bias " + to_string(bias->shape()) + " does not match weight " +
                     to_string(weight.shape()));
  return conv_geometry(input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
                       stride, pad);
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                         std::size_t stride, Padding pad) {
  const ConvGeometry g = check_conv(input, weight, bias, stride, pad);
  const std::size_t N = input.dim(0), Cout = weight.dim(0), K = g.patch(), P = g.out_pixels();
  Tensor<T> out({N, Cout, g.rows.out, g.cols.out});
  ConstMatMap<T> W(weight.data(), Cout, K);
  std::vector<T> col(g.is_pointwise() ? 0 : K * P);
  const std::size_t in_stride = g.channels * g.in_h * g.in_w;
  for (std::size_t n = 0; n < N; ++n) {
    const T* image = input.data() + n * in_stride;
    const T* cols = image;
    if (!g.is_pointwise()) {
      im2col(image, g, col.data());
      cols = col.data();
    }
    MatMap<T> Y(out.data() + n * Cout * P, Cout, P);
    Y.noalias() = W * ConstMatMap<T>(cols, K, P);
    if (bias)
      for (std::size_t c = 0; c < Cout; ++c) Y.row(c).array() += (*bias)[c];
  }
  return out;
}

template <typename T>
struct ConvGrads {
  std::optional<Tensor<T>> input, weight, bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight,
                             const Tensor<T>& grad_out, std::size_t stride, Padding pad,
                             bool want_input, bool want_weight, bool want_bias) {
  const ConvGeometry g = check_conv<T>(input, weight, nullptr, stride, pad);
  const std::size_t N = input.dim(0), Cout = weight.dim(0), K = g.patch(), P = g.out_pixels();
  ConvGrads<T> grads;
  if (want_input) grads.input.emplace(input.shape());
  if (want_weight) grads.weight.emplace(weight.shape());
  if (want_bias) grads.bias.emplace(Shape{Cout});

  ConstMatMap<T> W(weight.data(), Cout, K);
  std::vector<T> col(g.is_pointwise() ? 0 : K * P);
  std::vector<T> dcol(g.is_pointwise() || !want_input ? 0 : K * P);
  const std::size_t in_stride = g.channels * g.in_h * g.in_w;
  for (std::size_t n = 0; n < N; ++n) {
    ConstMatMap<T> dY(grad_out.data() + n * Cout * P, Cout, P);
    if (want_weight) {
      const T* image = input.data() + n * in_stride;
      const T* cols = image;
      if (!g.is_pointwise()) {
        im2col(image, g, col.data());
        cols = col.data();
      }
      MatMap<T> dW(grads.weight->data(), Cout, K);
      dW.noalias() += dY * ConstMatMap<T>(cols, K, P).transpose();
    }
    if (want_input) {
      T* dimage = grads.input->data() + n * in_stride;
      if (g.is_pointwise()) {
        MatMap<T>(dimage, K, P).noalias() = W.transpose() * dY;
      } else {
        MatMap<T>(dcol.data(), K, P).noalias() = W.transpose() * dY;
        col2im(dcol.data(), g, dimage);
      }
    }
    if (want_bias)
      for (std::size_t c = 0; c < Cout; ++c) (*grads.bias)[c] += dY.row(c).sum();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;        // x-hat
  std::vector<T> inv_std;      // per channel
  std::vector<T> batch_mean;   // per channel
  std::vector<T> batch_var;    // biased, per channel
};

template <typename T>
void check_bn(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  require_rank(x.shape(), 4, "batchnorm2d", "input");
  const Shape c{x.dim(1)};
  if (gamma.shape() != c || beta.shape() != c)
    throw ShapeError("batchnorm2d: gamma " + to_string(gamma.shape()) + " / beta " +
                     to_string(beta.shape()) + " do not match input " + to_string(x.shape()));
}

template <typename T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, T eps, BatchNormCache<T>& cache) {
  check_bn(x, gamma, beta);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const std::size_t M = N * HW;
  if (M < 2)
    throw DegenerateBatchError("batchnorm2d: train mode needs at least 2 values per channel, got " +
                               to_string(x.shape()));
  Tensor<T> y(x.shape());
  cache.normalized = Tensor<T>(x.shape());
  cache.inv_std.assign(C, T{0});
  cache.batch_mean.assign(C, T{0});
  cache.batch_var.assign(C, T{0});
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(M);
    double sq = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(M);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    const T m = static_cast<T>(mean);
    cache.inv_std[c] = inv;
    cache.batch_mean[c] = m;
    cache.batch_var[c] = static_cast<T>(var);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T xh = (x[off + i] - m) * inv;
        cache.normalized[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_forward_infer(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  const Tensor<T>& running_mean, const Tensor<T>& running_var,
                                  T eps) {
  check_bn(x, gamma, beta);
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (running_mean.shape() != gamma.shape() || running_var.shape() != gamma.shape())
    throw ShapeError("batchnorm2d: running statistics do not match channel count of " +
                     to_string(x.shape()));
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T inv = T{1} / std::sqrt(running_var[c] + eps);
    const T scale = gamma[c] * inv;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) y[off + i] = (x[off + i] - running_mean[c]) * scale + beta[c];
    }
  }
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input, gamma, beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward_train(const Tensor<T>& grad_out, const Tensor<T>& gamma,
                                           const BatchNormCache<T>& cache) {
  const Shape& s = grad_out.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  const double M = static_cast<double>(N * HW);
  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(Shape{C}), Tensor<T>(Shape{C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xh += static_cast<double>(grad_out[off + i]) * cache.normalized[off + i];
      }
    }
    g.gamma[c] = static_cast<T>(sum_dy_xh);
    g.beta[c] = static_cast<T>(sum_dy);
    const T scale = static_cast<T>(gamma[c] * cache.inv_std[c] / M);
    const T mean_dy = static_cast<T>(sum_dy);
    const T mean_dy_xh = static_cast<T>(sum_dy_xh);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i)
        g.input[off + i] = scale * (static_cast<T>(M) * grad_out[off + i] - mean_dy -
                                    cache.normalized[off + i] * mean_dy_xh);
    }
  }
  return g;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward_infer(const Tensor<T>& grad_out, const Tensor<T>& x,
                                           const Tensor<T>& gamma, const Tensor<T>& running_mean,
                                           const Tensor<T>& running_var, T eps) {
  const Shape& s = grad_out.shape();
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(Shape{C}), Tensor<T>(Shape{C})};
  for (std::size_t c = 0; c < C; ++c) {
    const T inv = T{1} / std::sqrt(running_var[c] + eps);
    T dg{0}, db{0};
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T dy = grad_out[off + i];
        dg += dy * (x[off + i] - running_mean[c]) * inv;
        db += dy;
        g.input[off + i] = dy * gamma[c] * inv;
      }
    }
    g.gamma[c] = dg;
    g.beta[c] = db;
  }
  return g;
}

/// running <- momentum * running + (1 - momentum) * batch
template <typename T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var,
                          const BatchNormCache<T>& cache, T momentum) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = momentum * running_mean[c] + (T{1} - momentum) * cache.batch_mean[c];
    running_var[c] = momentum * running_var[c] + (T{1} - momentum) * cache.batch_var[c];
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

// Subgradient 0 at x == 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "add");
  Tensor<T> y = a;
  y += b;
  return y;
}

// ---------------------------------------------------------------------------
// Max pooling, same padding with -inf fill.

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // index into the input plane per output element
};

template <typename T>
PoolResult<T> maxpool_forward(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  require_rank(x.shape(), 4, "maxpool2d", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Window1d rows = window_1d(H, k, stride, Padding::same);
  const Window1d cols = window_1d(W, k, stride, Padding::same);
  PoolResult<T> r{Tensor<T>({N, C, rows.out, cols.out}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* plane = x.data() + p * H * W;
    for (std::size_t oh = 0; oh < rows.out; ++oh) {
      for (std::size_t ow = 0; ow < cols.out; ++ow, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t arg = 0;
        bool found = false;
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(rows.pad_before);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                      static_cast<std::ptrdiff_t>(cols.pad_before);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (!found || plane[idx] > best) {
              best = plane[idx];
              arg = static_cast<std::uint32_t>(idx);
              found = true;
            }
          }
        }
        r.output[o] = best;
        r.argmax[o] = arg;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                           const Tensor<T>& grad_out) {
  Tensor<T> g(input_shape);
  const std::size_t plane_in = input_shape[2] * input_shape[3];
  const std::size_t plane_out = grad_out.dim(2) * grad_out.dim(3);
  for (std::size_t o = 0; o < grad_out.size(); ++o)
    g[(o / plane_out) * plane_in + argmax[o]] += grad_out[o];
  return g;
}

// ---------------------------------------------------------------------------
// Global average pooling [N,C,H,W] -> [N,C]

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1)});
  for (std::size_t p = 0; p < NC; ++p) {
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += x[p * HW + i];
    y[p] = s / static_cast<T>(HW);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  Tensor<T> g(input_shape);
  const std::size_t HW = input_shape[2] * input_shape[3];
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    const T v = grad_out[p] / static_cast<T>(HW);
    std::fill(g.data() + p * HW, g.data() + (p + 1) * HW, v);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dense: [N,D] x [D,U] + [U]

template <typename T>
void check_dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  require_rank(x.shape(), 2, "dense", "input");
  require_rank(w.shape(), 2, "dense", "weight");
  if (x.dim(1) != w.dim(0))
    throw ShapeError("dense: input " + to_string(x.shape()) + " does not match weight " +
                     to_string(w.shape()));
  if (b && b->shape() != Shape{w.dim(1)})
    throw ShapeError("dense: bias " + to_string(b->shape()) + " does not match weight " +
                     to_string(w.shape()));
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b) {
  check_dense(x, w, b);
  const std::size_t N = x.dim(0), D = x.dim(1), U = w.dim(1);
  Tensor<T> y({N, U});
  MatMap<T> Y(y.data(), N, U);
  Y.noalias() = ConstMatMap<T>(x.data(), N, D) * ConstMatMap<T>(w.data(), D, U);
  if (b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t u = 0; u < U; ++u) Y(n, u) += (*b)[u];
  return y;
}

template <typename T>
struct DenseGrads {
  std::optional<Tensor<T>> input, weight, bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out,
                             bool want_input, bool want_weight, bool want_bias) {
  const std::size_t N = x.dim(0), D = x.dim(1), U = w.dim(1);
  ConstMatMap<T> dY(grad_out.data(), N, U);
  DenseGrads<T> g;
  if (want_input) {
    g.input.emplace(x.shape());
    MatMap<T>(g.input->data(), N, D).noalias() = dY * ConstMatMap<T>(w.data(), D, U).transpose();
  }
  if (want_weight) {
    g.weight.emplace(w.shape());
    MatMap<T>(g.weight->data(), D, U).noalias() = ConstMatMap<T>(x.data(), N, D).transpose() * dY;
  }
  if (want_bias) {
    g.bias.emplace(Shape{U});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t u = 0; u < U; ++u) (*g.bias)[u] += dY(n, u);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Inverted dropout. The mask holds 0 or 1/(1-rate).

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ArgumentError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
}

template <typename T, typename Rng>
Tensor<T> dropout_mask(const Shape& shape, double rate, Rng& rng) {
  check_dropout_rate(rate);
  Tensor<T> mask(shape, T{1});
  if (rate == 0.0) return mask;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = uniform(rng) < rate ? T{0} : keep_scale;
  return mask;
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "multiply");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and fused sparse cross-entropy over rows of [N,K].

template <typename T>
Tensor<T> softmax_forward(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax", "logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw ShapeError("softmax: need at least 2 classes, got " + to_string(logits.shape()));
  Tensor<T> y(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * K;
    T* p = y.data() + n * K;
    const T m = *std::max_element(z, z + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += (p[k] = std::exp(z[k] - m));
    for (std::size_t k = 0; k < K; ++k) p[k] /= s;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_out) {
  const std::size_t N = probs.dim(0), K = probs.dim(1);
  Tensor<T> g(probs.shape());
  for (std::size_t n = 0; n < N; ++n) {
    T dot{0};
    for (std::size_t k = 0; k < K; ++k) dot += grad_out[n * K + k] * probs[n * K + k];
    for (std::size_t k = 0; k < K; ++k)
      g[n * K + k] = probs[n * K + k] * (grad_out[n * K + k] - dot);
  }
  return g;
}

inline void check_labels(std::span<const int> labels, std::size_t n, std::size_t k) {
  if (labels.size() != n)
    throw ShapeError("sparse_ce_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw ArgumentError("sparse_ce_loss: label " + std::to_string(l) + " outside [0, " +
                          std::to_string(k) + ")");
}

/// mean_n(logsumexp(z_n) - z_n[label_n])
template <typename T>
T sparse_ce_forward(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "sparse_ce_loss", "logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  check_labels(labels, N, K);
  T total{0};
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data() + n * K;
    const T m = *std::max_element(z, z + K);
    T s{0};
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - m);
    total += m + std::log(s) - z[labels[n]];
  }
  return total / static_cast<T>(N);
}

template <typename T>
Tensor<T> sparse_ce_backward(const Tensor<T>& logits, std::span<const int> labels, T grad_loss) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor<T> g = softmax_forward(logits);
  const T scale = grad_loss / static_cast<T>(N);
  for (std::size_t n = 0; n < N; ++n) {
    g[n * K + static_cast<std::size_t>(labels[n])] -= T{1};
    for (std::size_t k = 0; k < K; ++k) g[n * K + k] *= scale;
  }
  return g;
}

}  // namespace kernels
}  // namespace malnet
