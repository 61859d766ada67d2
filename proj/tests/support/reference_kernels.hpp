#pragma once

// Independent oracles for the layer kernels. These deliberately share no
// code with the production im2col/GEMM path: plain loops over the padded
// window definition, accumulating in binary64.

#include <cstddef>

#include "fastnet/layers.hpp"
#include "fastnet/rng.hpp"
#include "fastnet/tensor.hpp"

namespace fastnet::testing {

// Direct-loop cross-correlation: out[n,o,y,x] = bias[o] +
// sum_{c,i,j} w[o,c,i,j] * padded(x)[n,c,y+i,x+j].
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const ConvParams<T>& p) {
  const int n = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
  const int k = p.kernel(), pad = p.padding, cout = p.out_channels();
  const int ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1;
  Tensor<T> out({n, cout, ho, wo});
  for (int ni = 0; ni < n; ++ni) {
    for (int o = 0; o < cout; ++o) {
      for (int y = 0; y < ho; ++y) {
        for (int xo = 0; xo < wo; ++xo) {
          double acc = p.has_bias() ? static_cast<double>(p.bias[static_cast<std::size_t>(o)]) : 0.0;
          for (int c = 0; c < cin; ++c) {
            for (int i = 0; i < k; ++i) {
              for (int j = 0; j < k; ++j) {
                const int sy = y + i - pad, sx = xo + j - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                acc += static_cast<double>(p.weight.at(o, c, i, j)) * static_cast<double>(x.at(ni, c, sy, sx));
              }
            }
          }
          out.at(ni, o, y, xo) = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

// Max absolute difference between the im2col path and the direct-loop
// oracle over `cases` random shape/seed draws (N<=3, C<=8, H,W<=8).
inline double conv_oracle_max_diff(int cases, std::uint64_t seed) {
  double worst = 0.0;
  Rng root(seed);
  for (int rep = 0; rep < cases; ++rep) {
    Rng rng = root.split(static_cast<std::uint64_t>(rep));
    const int n = 1 + static_cast<int>(rng.next_below(3));
    const int cin = 1 + static_cast<int>(rng.next_below(8));
    const int cout = 1 + static_cast<int>(rng.next_below(8));
    const int k = rng.next_bool() ? 3 : 1;
    const int h = (k == 3 ? 3 : 1) + static_cast<int>(rng.next_below(6));
    const int w = (k == 3 ? 3 : 1) + static_cast<int>(rng.next_below(6));
    TensorF x({n, cin, h, w});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.next_normal());
    ConvParams<float> p;
    p.weight = he_normal_init<float>({cout, cin, k, k},
                                     static_cast<std::size_t>(cin) * static_cast<std::size_t>(k * k), rng);
    p.bias = TensorF({cout});
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] = 0.1f * static_cast<float>(rng.next_normal());
    p.padding = k == 3 ? 1 : 0;
    const TensorF got = conv2d_forward(x, p);
    const TensorF want = conv2d_reference(x, p);
    for (std::size_t i = 0; i < got.size(); ++i) {
      const double d = std::fabs(static_cast<double>(got[i]) - static_cast<double>(want[i]));
      if (d > worst) worst = d;
    }
  }
  return worst;
}

}  // namespace fastnet::testing
