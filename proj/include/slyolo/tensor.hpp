#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "slyolo/errors.hpp"

namespace slyolo {

using Rng = std::mt19937_64;

/// Channel/height/width descriptor of one feature map (batch excluded).
struct TensorSpec {
  int channels = 0;
  int height = 0;
  int width = 0;

  friend bool operator==(const TensorSpec&, const TensorSpec&) = default;

  std::size_t numel() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
};

inline std::string to_string(const TensorSpec& s) {
  return "(" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," +
         std::to_string(s.width) + ")";
}

inline void validate(const TensorSpec& s) {
  if (s.channels < 1 || s.height < 1 || s.width < 1)
    throw ShapeError("tensor spec " + to_string(s) + " has a non-positive dimension");
}

/// Dense NCHW tensor. Value type; copies are deep.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w),
        data_(static_cast<std::size_t>(n) * c * h * w, fill) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  }
  Tensor(int n, const TensorSpec& s, T fill = T(0)) : Tensor(n, s.channels, s.height, s.width, fill) {}

  int batch() const { return n_; }
  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  TensorSpec spec() const { return {c_, h_, w_}; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T* plane(int n, int c) { return data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane_size(); }
  const T* plane(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane_size();
  }
  T& at(int n, int c, int y, int x) { return plane(n, c)[static_cast<std::size_t>(y) * w_ + x]; }
  const T& at(int n, int c, int y, int x) const {
    return plane(n, c)[static_cast<std::size_t>(y) * w_ + x];
  }

  bool same_shape(const Tensor& o) const { return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("tensor add: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n_, c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> random_tensor(int n, const TensorSpec& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(n, s);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

/// Concatenate along channels. All inputs must share batch and spatial dims.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> xs) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const int n = xs[0]->batch(), h = xs[0]->height(), w = xs[0]->width();
  int c = 0;
  for (const auto* x : xs) {
    if (x->batch() != n || x->height() != h || x->width() != w)
      throw ShapeError("concat: unequal spatial dims " + to_string(xs[0]->spec()) + " vs " +
                       to_string(x->spec()));
    c += x->channels();
  }
  Tensor<T> out(n, c, h, w);
  const std::size_t p = out.plane_size();
  for (int b = 0; b < n; ++b) {
    T* dst = out.plane(b, 0);
    for (const auto* x : xs) {
      const std::size_t len = x->channels() * p;
      std::copy_n(x->plane(b, 0), len, dst);
      dst += len;
    }
  }
  return out;
}

/// Channel slice [c0, c0 + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int count) {
  if (c0 < 0 || count < 0 || c0 + count > x.channels()) throw ShapeError("channel slice out of range");
  Tensor<T> out(x.batch(), count, x.height(), x.width());
  const std::size_t len = static_cast<std::size_t>(count) * x.plane_size();
  for (int b = 0; b < x.batch(); ++b) std::copy_n(x.plane(b, c0), len, out.plane(b, 0));
  return out;
}

/// Split a channel-concatenated gradient back into pieces of the given widths.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const int> widths) {
  std::vector<Tensor<T>> out;
  out.reserve(widths.size());
  int c0 = 0;
  for (int w : widths) {
    out.push_back(slice_channels(x, c0, w));
    c0 += w;
  }
  if (c0 != x.channels()) throw ShapeError("split widths do not cover tensor channels");
  return out;
}

}  // namespace slyolo
