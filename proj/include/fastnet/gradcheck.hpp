#pragma once

// Finite-difference verification of every backward kernel, run in binary64.
//
// For a scalar loss L(theta) the analytic gradient is compared against the
// central difference (L(theta+e) - L(theta-e)) / 2e with
// e = 1e-5 * max(1, |theta_i|) per coordinate. Relative error is
// |a - n| / max(|a|, |n|, 1e-8). Tensors larger than the sample budget are
// checked on a random subset of coordinates (at least 200); smaller tensors
// are checked exhaustively.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fastnet/network.hpp"
#include "fastnet/rng.hpp"
#include "fastnet/tensor.hpp"
#include "fastnet/training.hpp"

namespace fastnet {

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
};

inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Coordinates where both gradients sit below this are counted as matching.
// The architecture contains exactly invariant directions (a conv bias whose
// output feeds a BatchNorm shifts a channel by a constant the normalization
// removes), where the true gradient is 0 and the central difference of a
// deep binary64 graph resolves only to ~1e-9; comparing two numerical zeros
// against the 1e-8 denominator floor would report spurious errors.
constexpr double kGradCheckZeroTol = 1e-7;

// Max relative error between `analytic` and central differences of `loss`
// over sampled coordinates of `theta`. `loss` must re-read theta on every
// call and contain no other randomness.
//
// The loss surface is piecewise smooth (ReLU, max pooling); a perturbation
// of the default size occasionally straddles a kink, making the central
// difference measure the average of two one-sided slopes instead of the
// derivative. When the default-scale probe disagrees with the analytic
// value, the coordinate is re-measured at eps/10 and eps/100 and the best
// agreement is kept: a crossing vanishes at a finer scale, while a wrong
// gradient disagrees at every scale.
inline double grad_check_tensor(Tensor<double>& theta, const Tensor<double>& analytic,
                                const std::function<double()>& loss, Rng& rng, std::size_t max_coords = 220) {
  if (theta.size() == 0) return 0.0;
  std::vector<std::size_t> coords;
  if (theta.size() <= max_coords) {
    coords.resize(theta.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  } else {
    coords.resize(theta.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j = i + rng.next_below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }
  const auto central = [&](std::size_t i, double eps) {
    const double orig = theta[i];
    theta[i] = orig + eps;
    const double lp = loss();
    theta[i] = orig - eps;
    const double lm = loss();
    theta[i] = orig;
    if (!std::isfinite(lp) || !std::isfinite(lm))
      fail(ErrorCode::non_finite, "grad check: non-finite loss during finite differences");
    return (lp - lm) / (2.0 * eps);
  };

  double worst = 0.0;
  for (const std::size_t i : coords) {
    const double eps = 1e-5 * std::max(1.0, std::fabs(theta[i]));
    const double numeric = central(i, eps);
    if (std::max(std::fabs(analytic[i]), std::fabs(numeric)) <= kGradCheckZeroTol) continue;
    double err = grad_rel_err(analytic[i], numeric);
    for (const double shrink : {10.0, 100.0}) {
      if (err <= 1e-6) break;
      err = std::min(err, grad_rel_err(analytic[i], central(i, eps / shrink)));
    }
    worst = std::max(worst, err);
  }
  return worst;
}

namespace detail {

inline TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorD t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.next_normal();
  return t;
}

// Random values pushed away from zero, for kernels with a kink at 0.
inline TensorD random_tensor_off_zero(Shape shape, Rng& rng, double margin = 0.1) {
  TensorD t = random_tensor(shape, rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += (t[i] >= 0.0 ? margin : -margin);
  return t;
}

// Projection loss sum(P * f(x)): turns any tensor-valued op into a scalar
// objective whose output gradient is P itself.
inline double project(const TensorD& value, const TensorD& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < value.size(); ++i) s += value[i] * p[i];
  return s;
}

}  // namespace detail

// Max relative error over every learnable tensor of a model under the
// softmax cross-entropy objective on a fixed batch. A model with no
// parameters checks vacuously as 0.
inline double grad_check_model(ModelState<double>& model, const TensorD& images, const std::vector<int>& labels,
                               Rng rng, std::size_t max_coords = 220) {
  auto loss_of = [&]() {
    const TensorD logits = network_forward(model, images, Mode::train);
    return softmax_cross_entropy(logits, labels).loss;
  };
  ForwardCache<double> cache;
  const TensorD logits = network_forward(model, images, Mode::train, &cache);
  const auto loss = softmax_cross_entropy(logits, labels);
  const auto grads = network_backward(model, cache, loss.d_logits);
  auto params = collect_parameters(model);
  auto grad_ptrs = collect_gradients(grads);

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i)
    worst = std::max(worst, grad_check_tensor(*params[i], *grad_ptrs[i], loss_of, rng, max_coords));
  return worst;
}

// Per-layer-type finite-difference suite. Every backward kernel is exercised
// with random small shapes; reported errors should sit well below 1e-4.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed = 20240601) {
  std::vector<GradCheckReport> reports;
  Rng root(seed);

  {  // conv3x3 and conv1x1: input, weight, and bias gradients
    for (const int k : {3, 1}) {
      Rng rng = root.split(1, static_cast<std::uint64_t>(k));
      TensorD x = detail::random_tensor({2, 3, 5, 5}, rng);
      ConvParams<double> p;
      p.weight = detail::random_tensor({4, 3, k, k}, rng, 0.5);
      p.bias = detail::random_tensor({4}, rng, 0.1);
      p.padding = k == 3 ? 1 : 0;
      TensorD proj = detail::random_tensor({2, 4, 5, 5}, rng);
      auto loss = [&]() { return detail::project(conv2d_forward(x, p), proj); };
      ConvGrads<double> g = conv2d_backward(x, p, proj);
      double worst = grad_check_tensor(x, g.input, loss, rng);
      worst = std::max(worst, grad_check_tensor(p.weight, g.weight, loss, rng));
      worst = std::max(worst, grad_check_tensor(p.bias, g.bias, loss, rng));
      reports.push_back({k == 3 ? "conv3x3" : "conv1x1", worst});
    }
  }
  {  // batchnorm (train mode): input, gamma, beta, including moment terms
    Rng rng = root.split(2);
    TensorD x = detail::random_tensor({3, 4, 4, 4}, rng, 1.5);
    BatchNormParams<double> p = BatchNormParams<double>::make(4);
    for (std::size_t i = 0; i < p.gamma.size(); ++i) {
      p.gamma[i] = 1.0 + 0.3 * rng.next_normal();
      p.beta[i] = 0.3 * rng.next_normal();
    }
    TensorD proj = detail::random_tensor(x.shape(), rng);
    auto loss = [&]() {
      BatchNormParams<double> local = p;  // running stats untouched by the probe
      return detail::project(batchnorm_forward(x, local, Mode::train), proj);
    };
    BatchNormParams<double> local = p;
    BatchNormCache<double> cache;
    batchnorm_forward(x, local, Mode::train, &cache);
    BatchNormGrads<double> g = batchnorm_backward(x, p, cache, proj);
    double worst = grad_check_tensor(x, g.input, loss, rng);
    worst = std::max(worst, grad_check_tensor(p.gamma, g.gamma, loss, rng));
    worst = std::max(worst, grad_check_tensor(p.beta, g.beta, loss, rng));
    reports.push_back({"batchnorm", worst});
  }
  {  // relu, off the kink
    Rng rng = root.split(3);
    TensorD x = detail::random_tensor_off_zero({2, 3, 4, 4}, rng);
    TensorD proj = detail::random_tensor(x.shape(), rng);
    auto loss = [&]() { return detail::project(relu(x), proj); };
    TensorD g = relu_backward(x, proj);
    reports.push_back({"relu", grad_check_tensor(x, g, loss, rng)});
  }
  {  // maxpool2: windows built from well-separated values so the argmax is stable
    Rng rng = root.split(4);
    TensorD x({2, 2, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = 0.5 * static_cast<double>(rng.next_below(32)) + 0.01 * static_cast<double>(i % 7);
    auto pooled = maxpool2_forward(x);
    TensorD proj = detail::random_tensor(pooled.first.shape(), rng);
    auto loss = [&]() { return detail::project(maxpool2_forward(x).first, proj); };
    TensorD g = maxpool2_backward(pooled.second, proj);
    reports.push_back({"maxpool2", grad_check_tensor(x, g, loss, rng)});
  }
  {  // global average pooling (linear, errors near machine epsilon)
    Rng rng = root.split(5);
    TensorD x = detail::random_tensor({2, 3, 4, 4}, rng);
    TensorD proj = detail::random_tensor({2, 3}, rng);
    auto loss = [&]() { return detail::project(global_avg_pool(x), proj); };
    TensorD g = global_avg_pool_backward(x.shape(), proj);
    reports.push_back({"global_avg_pool", grad_check_tensor(x, g, loss, rng)});
  }
  {  // full unit cell BN -> ReLU -> Conv
    Rng rng = root.split(6);
    TensorD x = detail::random_tensor({2, 3, 5, 5}, rng, 1.2);
    BatchNormParams<double> bn = BatchNormParams<double>::make(3);
    for (std::size_t i = 0; i < bn.gamma.size(); ++i) {
      bn.gamma[i] = 1.0 + 0.25 * rng.next_normal();
      bn.beta[i] = 0.25 * rng.next_normal();
    }
    ConvParams<double> conv;
    conv.weight = detail::random_tensor({4, 3, 3, 3}, rng, 0.4);
    conv.bias = detail::random_tensor({4}, rng, 0.1);
    conv.padding = 1;
    TensorD proj = detail::random_tensor({2, 4, 5, 5}, rng);
    auto loss = [&]() {
      BatchNormParams<double> local = bn;
      return detail::project(unit_cell_forward(x, local, conv, Mode::train), proj);
    };
    BatchNormParams<double> local = bn;
    UnitCellCache<double> cache;
    unit_cell_forward(x, local, conv, Mode::train, &cache);
    UnitCellGrads<double> g = unit_cell_backward(bn, conv, cache, proj);
    double worst = grad_check_tensor(x, g.input, loss, rng);
    worst = std::max(worst, grad_check_tensor(bn.gamma, g.gamma, loss, rng));
    worst = std::max(worst, grad_check_tensor(bn.beta, g.beta, loss, rng));
    worst = std::max(worst, grad_check_tensor(conv.weight, g.weight, loss, rng));
    worst = std::max(worst, grad_check_tensor(conv.bias, g.bias, loss, rng));
    reports.push_back({"unit_cell", worst});
  }
  {  // softmax cross-entropy: dLogits against differences of the loss
    Rng rng = root.split(7);
    TensorD logits = detail::random_tensor({4, 6}, rng, 2.0);
    std::vector<int> labels = {1, 0, 5, 3};
    auto loss = [&]() { return softmax_cross_entropy(logits, labels).loss; };
    const TensorD g = softmax_cross_entropy(logits, labels).d_logits;
    reports.push_back({"softmax_cross_entropy", grad_check_tensor(logits, g, loss, rng)});
  }
  {  // end-to-end tiny network
    Rng rng = root.split(8);
    ArchitectureSpec spec;
    spec.num_classes = 3;
    spec.conv_groups = {{5, 6}};
    spec.head_widths = {4};
    ModelState<double> model = build_model<double>(spec, Rng(seed ^ 0xABCD));
    TensorD images = detail::random_tensor({2, 3, 8, 8}, rng);
    std::vector<int> labels = {0, 2};
    reports.push_back({"network", grad_check_model(model, images, labels, rng)});
  }
  return reports;
}

}  // namespace fastnet
