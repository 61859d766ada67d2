#pragma once

// Forward and backward kernels for the layer types the network uses:
// convolution (3x3 pad 1 and 1x1 pad 0, stride fixed at 1), batch
// normalization, ReLU, non-overlapping 2x2 max pooling, global average
// pooling, and the unit cell composing BN -> ReLU -> Conv.
//
// Convolution is cross-correlation (no kernel flip) over zero-padded
// input. The production path lowers each image to an im2col matrix and
// multiplies with the weight matrix; the batch axis is the parallel axis.
// All cross-element reductions (batch moments, bias gradients, pooling
// means) accumulate in binary64 in ascending (n, h, w) order.

#include <cstdint>
#include <utility>
#include <vector>

#include "fastnet/gemm.hpp"
#include "fastnet/tensor.hpp"
#include "fastnet/threading.hpp"

namespace fastnet {

enum class Mode { train, infer };

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // (Cout, Cin, K, K)
  Tensor<T> bias;    // (Cout); empty when the layer has no bias
  int padding = 0;

  int out_channels() const { return weight.extent(0); }
  int in_channels() const { return weight.extent(1); }
  int kernel() const { return weight.extent(2); }
  bool has_bias() const { return !bias.empty(); }

  void validate() const {
    if (weight.rank() != 4 || weight.extent(2) != weight.extent(3))
      fail(ErrorCode::invalid_shape, "conv weight must be (Cout,Cin,K,K), got " + weight.shape().str());
    const int k = kernel();
    if (k != 1 && k != 3) fail(ErrorCode::invalid_argument, "conv kernel must be 1 or 3");
    if ((k == 3 && padding != 1) || (k == 1 && padding != 0))
      fail(ErrorCode::invalid_argument, "conv padding must be 1 for K=3 and 0 for K=1");
    if (has_bias() && (bias.rank() != 1 || bias.extent(0) != out_channels()))
      fail(ErrorCode::invalid_shape, "conv bias extent must equal Cout");
  }

  // He-normal weights with fan_in = Cin*K*K, zero bias.
  static ConvParams make(int cout, int cin, int k, bool with_bias, Rng& rng) {
    ConvParams p;
    p.weight = he_normal_init<T>({cout, cin, k, k},
                                 static_cast<std::size_t>(cin) * static_cast<std::size_t>(k * k), rng);
    if (with_bias) p.bias = Tensor<T>::zeros({cout});
    p.padding = (k == 3) ? 1 : 0;
    return p;
  }
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma, beta;                  // learnable, (C)
  Tensor<T> running_mean, running_var;    // inference statistics, (C)
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.99);

  int channels() const { return gamma.extent(0); }

  static BatchNormParams make(int c) {
    BatchNormParams p;
    p.gamma = Tensor<T>::full({c}, T(1));
    p.beta = Tensor<T>::zeros({c});
    p.running_mean = Tensor<T>::zeros({c});
    p.running_var = Tensor<T>::full({c}, T(1));
    return p;
  }
};

template <typename T>
struct BatchNormCache {
  std::vector<T> mean;
  std::vector<T> inv_std;  // 1/sqrt(var + eps)
  bool valid = false;      // only train-mode forward produces a usable cache
};

namespace detail {

// Lower one (C,H,W) image to a (C*9, H*W) patch matrix for a 3x3 kernel
// with zero padding 1. Row (c*3+ki)*3+kj holds the input plane shifted by
// (ki-1, kj-1), so each row is a couple of memcpys plus edge zeros.
template <typename T>
void im2col_3x3(const T* x, int c, int h, int w, T* cols) {
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  T* row = cols;
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x + static_cast<std::size_t>(ch) * plane;
    for (int ki = 0; ki < 3; ++ki) {
      for (int kj = 0; kj < 3; ++kj) {
        const int dy = ki - 1, dx = kj - 1;
        for (int y = 0; y < h; ++y) {
          T* dst = row + static_cast<std::size_t>(y) * w;
          const int sy = y + dy;
          if (sy < 0 || sy >= h) {
            for (int xcol = 0; xcol < w; ++xcol) dst[xcol] = T(0);
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * w;
          if (dx == 0) {
            for (int xcol = 0; xcol < w; ++xcol) dst[xcol] = srow[xcol];
          } else if (dx < 0) {
            dst[0] = T(0);
            for (int xcol = 1; xcol < w; ++xcol) dst[xcol] = srow[xcol - 1];
          } else {
            for (int xcol = 0; xcol < w - 1; ++xcol) dst[xcol] = srow[xcol + 1];
            dst[w - 1] = T(0);
          }
        }
        row += plane;
      }
    }
  }
}

// Scatter-add the patch-matrix gradient back onto the (C,H,W) image.
// Exact adjoint of im2col_3x3; contributions land in ascending
// (c, ki, kj, y, x) order.
template <typename T>
void col2im_3x3_add(const T* cols, int c, int h, int w, T* dx) {
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const T* row = cols;
  for (int ch = 0; ch < c; ++ch) {
    T* dst = dx + static_cast<std::size_t>(ch) * plane;
    for (int ki = 0; ki < 3; ++ki) {
      for (int kj = 0; kj < 3; ++kj) {
        const int dy = ki - 1, dxo = kj - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const T* srow = row + static_cast<std::size_t>(y) * w;
          T* drow = dst + static_cast<std::size_t>(sy) * w;
          if (dxo == 0) {
            for (int xcol = 0; xcol < w; ++xcol) drow[xcol] += srow[xcol];
          } else if (dxo < 0) {
            for (int xcol = 1; xcol < w; ++xcol) drow[xcol - 1] += srow[xcol];
          } else {
            for (int xcol = 0; xcol < w - 1; ++xcol) drow[xcol + 1] += srow[xcol];
          }
        }
        row += plane;
      }
    }
  }
}

template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
std::vector<T>& conv_scratch2() {
  thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
  p.validate();
  if (x.rank() != 4) fail(ErrorCode::shape_mismatch, "conv input must be rank-4, got " + x.shape().str());
  if (x.extent(1) != p.in_channels())
    fail(ErrorCode::shape_mismatch, "conv input channels " + std::to_string(x.extent(1)) +
                                        " != weight Cin " + std::to_string(p.in_channels()));
  const int n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
  const int k = p.kernel(), cout = p.out_channels();
  if (p.padding == 0 && (h < k || w < k)) fail(ErrorCode::shape_mismatch, "conv input smaller than kernel");
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t patch = static_cast<std::size_t>(cin) * static_cast<std::size_t>(k * k);

  Tensor<T> out({n, cout, h, w});
  const T* bias = p.has_bias() ? p.bias.data() : nullptr;
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const T* xi = x.data() + i * static_cast<std::size_t>(cin) * plane;
    T* oi = out.data() + i * static_cast<std::size_t>(cout) * plane;
    if (k == 3) {
      auto& cols = detail::conv_scratch<T>();
      cols.resize(patch * plane);
      detail::im2col_3x3(xi, cin, h, w, cols.data());
      detail::gemm(p.weight.data(), cols.data(), oi, cout, static_cast<int>(patch), static_cast<int>(plane),
                   bias);
    } else {
      detail::gemm(p.weight.data(), xi, oi, cout, cin, static_cast<int>(plane), bias);
    }
  });
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;  // empty when the layer has no bias
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p, const Tensor<T>& d_out) {
  p.validate();
  const int n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
  const int k = p.kernel(), cout = p.out_channels();
  if (d_out.rank() != 4 || d_out.extent(0) != n || d_out.extent(1) != cout || d_out.extent(2) != h ||
      d_out.extent(3) != w)
    fail(ErrorCode::shape_mismatch, "conv backward: dOut shape " + d_out.shape().str() +
                                        " does not match forward output");
  if (x.extent(1) != p.in_channels()) fail(ErrorCode::shape_mismatch, "conv backward: channel mismatch");
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t patch = static_cast<std::size_t>(cin) * static_cast<std::size_t>(k * k);

  ConvGrads<T> g;
  g.input = Tensor<T>::zeros(x.shape());
  g.weight = Tensor<T>::zeros(p.weight.shape());
  if (p.has_bias()) {
    g.bias = Tensor<T>::zeros({cout});
    for (int o = 0; o < cout; ++o) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* d = d_out.data() + (static_cast<std::size_t>(i) * cout + static_cast<std::size_t>(o)) * plane;
        for (std::size_t j = 0; j < plane; ++j) s += static_cast<double>(d[j]);
      }
      g.bias[static_cast<std::size_t>(o)] = static_cast<T>(s);
    }
  }

  // W^T once; reused by every image's dInput GEMM.
  std::vector<T> wt(patch * static_cast<std::size_t>(cout));
  detail::transpose(p.weight.data(), cout, static_cast<int>(patch), wt.data());

  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const T* di = d_out.data() + i * static_cast<std::size_t>(cout) * plane;
    T* gi = g.input.data() + i * static_cast<std::size_t>(cin) * plane;
    if (k == 3) {
      auto& dcols = detail::conv_scratch<T>();
      dcols.resize(patch * plane);
      detail::gemm(wt.data(), di, dcols.data(), static_cast<int>(patch), cout, static_cast<int>(plane));
      detail::col2im_3x3_add(dcols.data(), cin, h, w, gi);
    } else {
      detail::gemm(wt.data(), di, gi, cin, cout, static_cast<int>(plane));
    }
  });

  // dW^T partials per fixed-size image chunk; chunks reduced in ascending
  // order afterwards, so the result does not depend on the thread count.
  // Fast mode sizes chunks by the worker count instead.
  std::size_t chunk_size = 8;
  if (fast_mode()) {
    const std::size_t workers = worker_threads();
    chunk_size = (static_cast<std::size_t>(n) + workers - 1) / workers;
    if (chunk_size == 0) chunk_size = 1;
  }
  const std::size_t kChunk = chunk_size;
  const std::size_t chunks = (static_cast<std::size_t>(n) + kChunk - 1) / kChunk;
  std::vector<std::vector<T>> partials(chunks);
  parallel_for(chunks, [&](std::size_t ci) {
    auto& part = partials[ci];
    part.assign(patch * static_cast<std::size_t>(cout), T(0));
    auto& cols = detail::conv_scratch<T>();
    auto& dt = detail::conv_scratch2<T>();
    dt.resize(plane * static_cast<std::size_t>(cout));
    const std::size_t lo = ci * kChunk;
    const std::size_t hi = lo + kChunk < static_cast<std::size_t>(n) ? lo + kChunk : static_cast<std::size_t>(n);
    for (std::size_t i = lo; i < hi; ++i) {
      const T* xi = x.data() + i * static_cast<std::size_t>(cin) * plane;
      const T* di = d_out.data() + i * static_cast<std::size_t>(cout) * plane;
      detail::transpose(di, cout, static_cast<int>(plane), dt.data());
      const T* colp = xi;
      if (k == 3) {
        cols.resize(patch * plane);
        detail::im2col_3x3(xi, cin, h, w, cols.data());
        colp = cols.data();
      }
      detail::gemm(colp, dt.data(), part.data(), static_cast<int>(patch), static_cast<int>(plane), cout,
                   static_cast<const T*>(nullptr), /*accumulate=*/true);
    }
  });
  std::vector<T> wsum(patch * static_cast<std::size_t>(cout), T(0));
  for (std::size_t ci = 0; ci < chunks; ++ci) {
    const auto& part = partials[ci];
    for (std::size_t j = 0; j < wsum.size(); ++j) wsum[j] += part[j];
  }
  detail::transpose(wsum.data(), static_cast<int>(patch), cout, g.weight.data());
  return g;
}

namespace detail {

// y = gamma*(x - mean)*inv_std + beta, the literal normalization formula.
// Shared by forward and the backward-pass recompute so both produce
// bit-identical activations.
template <typename T>
void bn_apply(const Tensor<T>& x, const T* gamma, const T* beta, const T* mean, const T* inv_std,
              Tensor<T>& y) {
  const int n = x.extent(0), c = x.extent(1);
  const std::size_t plane = static_cast<std::size_t>(x.extent(2)) * static_cast<std::size_t>(x.extent(3));
  parallel_for(static_cast<std::size_t>(n) * static_cast<std::size_t>(c), [&](std::size_t nc) {
    const int ch = static_cast<int>(nc % static_cast<std::size_t>(c));
    const T* xp = x.data() + nc * plane;
    T* yp = y.data() + nc * plane;
    const T g = gamma[ch], b = beta[ch], m = mean[ch], s = inv_std[ch];
    for (std::size_t i = 0; i < plane; ++i) yp[i] = g * ((xp[i] - m) * s) + b;
  });
}

}  // namespace detail

// Train mode computes batch moments, normalizes with them, updates the
// running statistics in `p`, and fills `cache` for the backward pass.
// Infer mode normalizes with the running statistics and touches nothing.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode,
                            BatchNormCache<T>* cache = nullptr) {
  if (x.rank() != 4) fail(ErrorCode::shape_mismatch, "batchnorm input must be rank-4");
  const int c = x.extent(1);
  if (c != p.channels()) fail(ErrorCode::shape_mismatch, "batchnorm channel mismatch");

  std::vector<T> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (mode == Mode::train) {
    const auto mom = channel_moments(x);
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t i = static_cast<std::size_t>(ch);
      mean[i] = mom.mean[i];
      inv_std[i] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(mom.var[i]) + static_cast<double>(p.eps)));
      const double m = static_cast<double>(p.momentum);
      p.running_mean[i] = static_cast<T>(m * static_cast<double>(p.running_mean[i]) +
                                         (1.0 - m) * static_cast<double>(mom.mean[i]));
      p.running_var[i] = static_cast<T>(m * static_cast<double>(p.running_var[i]) +
                                        (1.0 - m) * static_cast<double>(mom.var[i]));
    }
    if (cache) {
      cache->mean = mean;
      cache->inv_std = inv_std;
      cache->valid = true;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t i = static_cast<std::size_t>(ch);
      mean[i] = p.running_mean[i];
      inv_std[i] =
          static_cast<T>(1.0 / std::sqrt(static_cast<double>(p.running_var[i]) + static_cast<double>(p.eps)));
    }
    if (cache) cache->valid = false;
  }
  Tensor<T> y(x.shape());
  detail::bn_apply(x, p.gamma.data(), p.beta.data(), mean.data(), inv_std.data(), y);
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;  // (C)
  Tensor<T> beta;   // (C)
};

// Exact gradient of the train-mode forward, including the dependence of the
// batch moments on x. dBeta = sum dy, dGamma = sum dy*x_hat,
// dx = gamma*inv_std*(dy - mean(dy) - x_hat*mean(dy*x_hat)).
template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& x, const BatchNormParams<T>& p,
                                     const BatchNormCache<T>& cache, const Tensor<T>& d_out) {
  if (!cache.valid)
    fail(ErrorCode::invalid_argument, "batchnorm backward: cache must come from a train-mode forward");
  if (d_out.shape() != x.shape()) fail(ErrorCode::shape_mismatch, "batchnorm backward: shape mismatch");
  const int n = x.extent(0), c = x.extent(1);
  const std::size_t plane = static_cast<std::size_t>(x.extent(2)) * static_cast<std::size_t>(x.extent(3));
  const std::size_t image = static_cast<std::size_t>(c) * plane;
  const double inv_m = 1.0 / (static_cast<double>(n) * static_cast<double>(plane));

  BatchNormGrads<T> g;
  g.input = Tensor<T>(x.shape());
  g.gamma = Tensor<T>::zeros({c});
  g.beta = Tensor<T>::zeros({c});
  parallel_for(static_cast<std::size_t>(c), [&](std::size_t ch) {
    const T mu = cache.mean[ch], istd = cache.inv_std[ch];
    double s_dy = 0.0, s_dy_xhat = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* xp = x.data() + static_cast<std::size_t>(i) * image + ch * plane;
      const T* dp = d_out.data() + static_cast<std::size_t>(i) * image + ch * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double xhat = static_cast<double>(xp[j] - mu) * static_cast<double>(istd);
        s_dy += static_cast<double>(dp[j]);
        s_dy_xhat += static_cast<double>(dp[j]) * xhat;
      }
    }
    g.beta[ch] = static_cast<T>(s_dy);
    g.gamma[ch] = static_cast<T>(s_dy_xhat);
    const double mean_dy = s_dy * inv_m;
    const double mean_dy_xhat = s_dy_xhat * inv_m;
    const double scale = static_cast<double>(p.gamma[ch]) * static_cast<double>(istd);
    for (int i = 0; i < n; ++i) {
      const T* xp = x.data() + static_cast<std::size_t>(i) * image + ch * plane;
      const T* dp = d_out.data() + static_cast<std::size_t>(i) * image + ch * plane;
      T* gp = g.input.data() + static_cast<std::size_t>(i) * image + ch * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double xhat = static_cast<double>(xp[j] - mu) * static_cast<double>(istd);
        gp[j] = static_cast<T>(scale * (static_cast<double>(dp[j]) - mean_dy - xhat * mean_dy_xhat));
      }
    }
  });
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
  return y;
}

// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& d_out) {
  if (d_out.shape() != x.shape()) fail(ErrorCode::shape_mismatch, "relu backward: shape mismatch");
  Tensor<T> g(x.shape());
  const T* xp = x.data();
  const T* dp = d_out.data();
  T* gp = g.data();
  for (std::size_t i = 0; i < x.size(); ++i) gp[i] = xp[i] > T(0) ? dp[i] : T(0);
  return g;
}

struct PoolCache {
  Shape in_shape;
  std::vector<std::uint8_t> argmax;  // winner position per output cell: 2*dy + dx
};

// Non-overlapping 2x2 max pooling, stride 2. Ties go to the first position
// in (0,0),(0,1),(1,0),(1,1) scan order, so backward routes exactly one
// gradient per window.
template <typename T>
std::pair<Tensor<T>, PoolCache> maxpool2_forward(const Tensor<T>& x) {
  if (x.rank() != 4) fail(ErrorCode::shape_mismatch, "maxpool input must be rank-4");
  const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (h % 2 != 0 || w % 2 != 0)
    fail(ErrorCode::shape_mismatch, "maxpool needs even H and W, got " + x.shape().str());
  const int ho = h / 2, wo = w / 2;
  Tensor<T> y({n, c, ho, wo});
  PoolCache cache;
  cache.in_shape = x.shape();
  cache.argmax.resize(y.size());
  const std::size_t planes = static_cast<std::size_t>(n) * static_cast<std::size_t>(c);
  parallel_for(planes, [&](std::size_t ncp) {
    const T* xp = x.data() + ncp * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    T* yp = y.data() + ncp * static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
    std::uint8_t* ap = cache.argmax.data() + ncp * static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const T* win = xp + static_cast<std::size_t>(2 * oy) * w + 2 * ox;
        T best = win[0];
        std::uint8_t arg = 0;
        if (win[1] > best) { best = win[1]; arg = 1; }
        if (win[w] > best) { best = win[w]; arg = 2; }
        if (win[w + 1] > best) { best = win[w + 1]; arg = 3; }
        yp[static_cast<std::size_t>(oy) * wo + ox] = best;
        ap[static_cast<std::size_t>(oy) * wo + ox] = arg;
      }
    }
  });
  return {std::move(y), std::move(cache)};
}

template <typename T>
Tensor<T> maxpool2_backward(const PoolCache& cache, const Tensor<T>& d_out) {
  const int n = cache.in_shape[0], c = cache.in_shape[1], h = cache.in_shape[2], w = cache.in_shape[3];
  const int ho = h / 2, wo = w / 2;
  if (d_out.rank() != 4 || d_out.extent(0) != n || d_out.extent(1) != c || d_out.extent(2) != ho ||
      d_out.extent(3) != wo)
    fail(ErrorCode::shape_mismatch, "maxpool backward: dOut shape mismatch");
  Tensor<T> g = Tensor<T>::zeros(cache.in_shape);
  const std::size_t planes = static_cast<std::size_t>(n) * static_cast<std::size_t>(c);
  parallel_for(planes, [&](std::size_t ncp) {
    T* gp = g.data() + ncp * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    const T* dp = d_out.data() + ncp * static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
    const std::uint8_t* ap = cache.argmax.data() + ncp * static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const std::size_t oi = static_cast<std::size_t>(oy) * wo + ox;
        const std::uint8_t a = ap[oi];
        gp[static_cast<std::size_t>(2 * oy + a / 2) * w + 2 * ox + a % 2] = dp[oi];
      }
    }
  });
  return g;
}

// Per-channel spatial mean; the (N, C) result feeds the loss directly.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) fail(ErrorCode::shape_mismatch, "global_avg_pool input must be rank-4");
  const int n = x.extent(0), c = x.extent(1);
  const std::size_t plane = static_cast<std::size_t>(x.extent(2)) * static_cast<std::size_t>(x.extent(3));
  Tensor<T> y({n, c});
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(n) * static_cast<std::size_t>(c); ++nc) {
    const T* xp = x.data() + nc * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(xp[i]);
    y[nc] = static_cast<T>(s * inv);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in_shape, const Tensor<T>& d_out) {
  const int n = in_shape[0], c = in_shape[1];
  if (d_out.rank() != 2 || d_out.extent(0) != n || d_out.extent(1) != c)
    fail(ErrorCode::shape_mismatch, "global_avg_pool backward: dOut shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(in_shape[2]) * static_cast<std::size_t>(in_shape[3]);
  Tensor<T> g(in_shape);
  const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(n) * static_cast<std::size_t>(c); ++nc) {
    const T v = d_out[nc] * inv;
    T* gp = g.data() + nc * plane;
    for (std::size_t i = 0; i < plane; ++i) gp[i] = v;
  }
  return g;
}

template <typename T>
struct UnitCellCache {
  Tensor<T> input;  // cell input, pre-BN
  BatchNormCache<T> bn;
};

template <typename T>
struct UnitCellGrads {
  Tensor<T> input;
  Tensor<T> gamma, beta;
  Tensor<T> weight, bias;
};

// BN -> ReLU -> Conv. The cache keeps only the cell input and the batch
// moments; backward recomputes the intermediate activations with the same
// code paths as forward, so the recompute is bit-identical.
template <typename T>
Tensor<T> unit_cell_forward(Tensor<T> x, BatchNormParams<T>& bn, const ConvParams<T>& conv, Mode mode,
                            UnitCellCache<T>* cache = nullptr) {
  BatchNormCache<T> local;
  BatchNormCache<T>* bc = cache ? &cache->bn : &local;
  Tensor<T> h = batchnorm_forward(x, bn, mode, bc);
  if (cache) cache->input = std::move(x);
  h = relu(h);
  return conv2d_forward(h, conv);
}

template <typename T>
UnitCellGrads<T> unit_cell_backward(const BatchNormParams<T>& bn, const ConvParams<T>& conv,
                                    const UnitCellCache<T>& cache, const Tensor<T>& d_out) {
  if (!cache.bn.valid) fail(ErrorCode::invalid_argument, "unit cell backward: train-mode cache required");
  Tensor<T> pre(cache.input.shape());
  detail::bn_apply(cache.input, bn.gamma.data(), bn.beta.data(), cache.bn.mean.data(), cache.bn.inv_std.data(),
                   pre);
  Tensor<T> post = relu(pre);
  ConvGrads<T> cg = conv2d_backward(post, conv, d_out);
  Tensor<T> d_pre = relu_backward(pre, cg.input);
  BatchNormGrads<T> bg = batchnorm_backward(cache.input, bn, cache.bn, d_pre);
  UnitCellGrads<T> g;
  g.input = std::move(bg.input);
  g.gamma = std::move(bg.gamma);
  g.beta = std::move(bg.beta);
  g.weight = std::move(cg.weight);
  g.bias = std::move(cg.bias);
  return g;
}

}  // namespace fastnet
