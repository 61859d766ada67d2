#pragma once

// Dense tensors of up to 4 axes, row-major with the last axis fastest.
// Activations are ordered (N, C, H, W), convolution weights (Cout, Cin, Kh, Kw).
// Element type is a template parameter: float is the production width,
// double exists as a shadow mode for gradient checking.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fastnet/error.hpp"
#include "fastnet/rng.hpp"

namespace fastnet {

struct Shape {
  std::array<int, 4> dims{1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> ds) {
    if (ds.size() == 0 || ds.size() > 4) fail(ErrorCode::invalid_shape, "shape rank must be 1..4");
    rank = static_cast<int>(ds.size());
    int i = 0;
    for (int d : ds) dims[static_cast<std::size_t>(i++)] = d;
    for (; i < 4; ++i) dims[static_cast<std::size_t>(i)] = 1;
  }

  int operator[](int i) const { return dims[static_cast<std::size_t>(i)]; }

  std::size_t count() const {
    std::size_t n = 1;
    for (int i = 0; i < rank; ++i) n *= static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]);
    return n;
  }

  bool operator==(const Shape& o) const { return rank == o.rank && dims == o.dims; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (int i = 0; i < rank; ++i) {
      if (i) s += ",";
      s += std::to_string(dims[static_cast<std::size_t>(i)]);
    }
    return s + ")";
  }

  void validate() const {
    if (rank < 1 || rank > 4) fail(ErrorCode::invalid_shape, "shape rank must be 1..4");
    for (int i = 0; i < rank; ++i)
      if (dims[static_cast<std::size_t>(i)] < 1)
        fail(ErrorCode::invalid_shape, "extent must be >= 1, got shape " + str());
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T value = T(0)) : shape_(shape) {
    shape_.validate();
    data_.assign(shape_.count(), value);
  }

  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }
  static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank; }
  int extent(int axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-axis indexing; lower-rank tensors address their leading axes.
  T& at(int n, int c = 0, int h = 0, int w = 0) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c = 0, int h = 0, int w = 0) const { return data_[offset(n, c, h, w)]; }

  void fill(T value) { data_.assign(data_.size(), value); }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void check_finite(const std::string& context) const {
    if (!all_finite()) fail(ErrorCode::non_finite, "non-finite value in " + context);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    const auto& d = shape_.dims;
    return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(d[1]) + static_cast<std::size_t>(c)) *
                static_cast<std::size_t>(d[2]) +
            static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(d[3]) +
           static_cast<std::size_t>(w);
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> tensor_full(Shape shape, T value) {
  return Tensor<T>::full(shape, value);
}

// He-normal initialization: i.i.d. N(0, 2/fan_in). For convolution weights
// fan_in = Cin * Kh * Kw. Samples are drawn in tensor storage order.
template <typename T>
void he_normal_fill(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) fail(ErrorCode::invalid_argument, "he_normal: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(stddev * rng.next_normal());
}

template <typename T>
Tensor<T> he_normal_init(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  he_normal_fill(t, fan_in, rng);
  return t;
}

// Per-channel mean and population (biased) variance over axes N, H, W.
// Accumulation is binary64 in ascending (n, h, w) order regardless of the
// element type, one pass for sums and one for squared deviations.
template <typename T>
struct ChannelMoments {
  std::vector<T> mean;
  std::vector<T> var;
};

template <typename T>
ChannelMoments<T> channel_moments(const Tensor<T>& x) {
  if (x.rank() != 4) fail(ErrorCode::shape_mismatch, "channel_moments: want rank-4 (N,C,H,W), got " + x.shape().str());
  const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  const std::size_t image = static_cast<std::size_t>(c) * plane;
  const double inv = 1.0 / (static_cast<double>(n) * static_cast<double>(plane));

  ChannelMoments<T> out;
  out.mean.resize(static_cast<std::size_t>(c));
  out.var.resize(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.data() + static_cast<std::size_t>(i) * image + static_cast<std::size_t>(ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) sum += static_cast<double>(p[k]);
    }
    const double mu = sum * inv;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const T* p = x.data() + static_cast<std::size_t>(i) * image + static_cast<std::size_t>(ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = static_cast<double>(p[k]) - mu;
        sq += d * d;
      }
    }
    out.mean[static_cast<std::size_t>(ch)] = static_cast<T>(mu);
    out.var[static_cast<std::size_t>(ch)] = static_cast<T>(sq * inv);
  }
  return out;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace fastnet
