#pragma once

// Forward/backward kernels over NCHW tensors. Dense and grouped convolution
// go through im2col + GEMM over the whole batch; depthwise convolution is a
// direct loop nest.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <vector>

#include "slyolo/tensor.hpp"

namespace slyolo::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int groups = 1;

  int pad() const { return kernel / 2; }
  bool depthwise() const { return groups == in_channels && groups == out_channels; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * (in_channels / groups) * kernel * kernel;
  }
};

/// Output extent of a "same"-padded odd kernel; input must be divisible by the stride.
inline int conv_out_extent(int extent, int stride) {
  if (extent % stride != 0)
    throw ShapeError("spatial extent " + std::to_string(extent) + " not divisible by stride " +
                     std::to_string(stride));
  return extent / stride;
}

inline TensorSpec conv_output_spec(const ConvGeometry& g, const TensorSpec& in) {
  validate(in);
  if (in.channels != g.in_channels)
    throw ConfigError("conv expects " + std::to_string(g.in_channels) + " input channels, got " +
                      std::to_string(in.channels));
  return {g.out_channels, conv_out_extent(in.height, g.stride), conv_out_extent(in.width, g.stride)};
}

namespace detail {

// Range of output columns whose tap (kernel offset k) lands inside [0, extent).
inline void valid_range(int out_extent, int in_extent, int stride, int pad, int k, int& lo, int& hi) {
  // need 0 <= o*stride - pad + k < in_extent
  const int a = pad - k;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const int b = in_extent - 1 + pad - k;
  hi = b < 0 ? 0 : std::min(out_extent, b / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void im2col(const Tensor<T>& x, int c0, int cg, int k, int s, int ho, int wo, T* col) {
  const int n = x.batch(), h = x.height(), w = x.width(), pad = k / 2;
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  const std::size_t np = p * n;
  for (int c = 0; c < cg; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * np;
        int xlo, xhi;
        valid_range(wo, w, s, pad, kx, xlo, xhi);
        for (int b = 0; b < n; ++b) {
          const T* src = x.plane(b, c0 + c);
          T* dst = row + b * p;
          for (int oy = 0; oy < ho; ++oy) {
            T* d = dst + static_cast<std::size_t>(oy) * wo;
            const int iy = oy * s - pad + ky;
            if (iy < 0 || iy >= h) {
              std::fill(d, d + wo, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * w - pad + kx;
            std::fill(d, d + xlo, T(0));
            if (s == 1) {
              for (int ox = xlo; ox < xhi; ++ox) d[ox] = srow[ox];
            } else {
              for (int ox = xlo; ox < xhi; ++ox) d[ox] = srow[ox * s];
            }
            std::fill(d + xhi, d + wo, T(0));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int c0, int cg, int k, int s, int ho, int wo, Tensor<T>& dx) {
  const int n = dx.batch(), h = dx.height(), w = dx.width(), pad = k / 2;
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  const std::size_t np = p * n;
  for (int c = 0; c < cg; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * np;
        int xlo, xhi;
        valid_range(wo, w, s, pad, kx, xlo, xhi);
        for (int b = 0; b < n; ++b) {
          T* dst = dx.plane(b, c0 + c);
          const T* src = row + b * p;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * s - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const T* srow = src + static_cast<std::size_t>(oy) * wo;
            T* drow = dst + static_cast<std::size_t>(iy) * w - pad + kx;
            if (s == 1) {
              for (int ox = xlo; ox < xhi; ++ox) drow[ox] += srow[ox];
            } else {
              for (int ox = xlo; ox < xhi; ++ox) drow[ox * s] += srow[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_forward(const Tensor<T>& x, const T* w, const T* bias, int k, int s, Tensor<T>& y) {
  const int n = x.batch(), c = x.channels(), h = x.height(), wd = x.width();
  const int ho = y.height(), wo = y.width(), pad = k / 2;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* src = x.plane(b, ch);
      T* dst = y.plane(b, ch);
      const T* wk = w + static_cast<std::size_t>(ch) * k * k;
      std::fill(dst, dst + y.plane_size(), bias ? bias[ch] : T(0));
      for (int oy = 0; oy < ho; ++oy) {
        T* drow = dst + static_cast<std::size_t>(oy) * wo;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            int xlo, xhi;
            valid_range(wo, wd, s, pad, kx, xlo, xhi);
            const T wv = wk[ky * k + kx];
            const T* srow = src + static_cast<std::size_t>(iy) * wd - pad + kx;
            if (s == 1) {
              for (int ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox];
            } else {
              for (int ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox * s];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const Tensor<T>& x, const T* w, const Tensor<T>& dy, int k, int s, T* dw,
                        T* db, Tensor<T>* dx) {
  const int n = x.batch(), c = x.channels(), h = x.height(), wd = x.width();
  const int ho = dy.height(), wo = dy.width(), pad = k / 2;
  for (int ch = 0; ch < c; ++ch) {
    const T* wk = w + static_cast<std::size_t>(ch) * k * k;
    T* dwk = dw + static_cast<std::size_t>(ch) * k * k;
    for (int b = 0; b < n; ++b) {
      const T* src = x.plane(b, ch);
      const T* g = dy.plane(b, ch);
      T* dsrc = dx ? dx->plane(b, ch) : nullptr;
      if (db) {
        T acc = 0;
        for (std::size_t i = 0; i < dy.plane_size(); ++i) acc += g[i];
        db[ch] += acc;
      }
      for (int oy = 0; oy < ho; ++oy) {
        const T* grow = g + static_cast<std::size_t>(oy) * wo;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            int xlo, xhi;
            valid_range(wo, wd, s, pad, kx, xlo, xhi);
            const std::size_t off = static_cast<std::size_t>(iy) * wd - pad + kx;
            const T* srow = src + off;
            T acc = 0;
            if (s == 1) {
              for (int ox = xlo; ox < xhi; ++ox) acc += grow[ox] * srow[ox];
            } else {
              for (int ox = xlo; ox < xhi; ++ox) acc += grow[ox] * srow[ox * s];
            }
            dwk[ky * k + kx] += acc;
            if (dsrc) {
              const T wv = wk[ky * k + kx];
              T* drow = dsrc + off;
              if (s == 1) {
                for (int ox = xlo; ox < xhi; ++ox) drow[ox] += wv * grow[ox];
              } else {
                for (int ox = xlo; ox < xhi; ++ox) drow[ox * s] += wv * grow[ox];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// y = conv(x, w) + bias. Weight layout [out][in/groups][k][k].
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const T* w, const T* bias, const ConvGeometry& g) {
  const TensorSpec os = conv_output_spec(g, x.spec());
  Tensor<T> y(x.batch(), os);
  if (g.depthwise() && g.groups > 1) {
    detail::depthwise_forward(x, w, bias, g.kernel, g.stride, y);
    return y;
  }
  const int n = x.batch(), ho = os.height, wo = os.width;
  const int cin_g = g.in_channels / g.groups, cout_g = g.out_channels / g.groups;
  const int kk = cin_g * g.kernel * g.kernel;
  const std::size_t p = static_cast<std::size_t>(ho) * wo, np = p * n;
  std::vector<T> col(static_cast<std::size_t>(kk) * np);
  RowMat<T> out(cout_g, static_cast<Eigen::Index>(np));
  for (int grp = 0; grp < g.groups; ++grp) {
    detail::im2col(x, grp * cin_g, cin_g, g.kernel, g.stride, ho, wo, col.data());
    CMapMat<T> wm(w + static_cast<std::size_t>(grp) * cout_g * kk, cout_g, kk);
    CMapMat<T> cm(col.data(), kk, static_cast<Eigen::Index>(np));
    out.noalias() = wm * cm;
    for (int oc = 0; oc < cout_g; ++oc) {
      const int c = grp * cout_g + oc;
      const T bv = bias ? bias[c] : T(0);
      for (int b = 0; b < n; ++b) {
        const T* src = out.data() + static_cast<std::size_t>(oc) * np + b * p;
        T* dst = y.plane(b, c);
        for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + bv;
      }
    }
  }
  return y;
}

/// Accumulates dW (and dbias when non-null) and returns dx (empty when !need_dx).
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const T* w, const Tensor<T>& dy, const ConvGeometry& g,
                          T* dw, T* db, bool need_dx = true) {
  Tensor<T> dx;
  if (need_dx) dx = Tensor<T>(x.batch(), x.channels(), x.height(), x.width());
  if (g.depthwise() && g.groups > 1) {
    detail::depthwise_backward(x, w, dy, g.kernel, g.stride, dw, db, need_dx ? &dx : nullptr);
    return dx;
  }
  const int n = x.batch(), ho = dy.height(), wo = dy.width();
  const int cin_g = g.in_channels / g.groups, cout_g = g.out_channels / g.groups;
  const int kk = cin_g * g.kernel * g.kernel;
  const std::size_t p = static_cast<std::size_t>(ho) * wo, np = p * n;
  std::vector<T> col(static_cast<std::size_t>(kk) * np);
  RowMat<T> gy(cout_g, static_cast<Eigen::Index>(np));
  RowMat<T> dcol;
  for (int grp = 0; grp < g.groups; ++grp) {
    for (int oc = 0; oc < cout_g; ++oc) {
      const int c = grp * cout_g + oc;
      T* dst = gy.data() + static_cast<std::size_t>(oc) * np;
      T acc = 0;
      for (int b = 0; b < n; ++b) {
        const T* src = dy.plane(b, c);
        for (std::size_t i = 0; i < p; ++i) {
          dst[b * p + i] = src[i];
          acc += src[i];
        }
      }
      if (db) db[c] += acc;
    }
    detail::im2col(x, grp * cin_g, cin_g, g.kernel, g.stride, ho, wo, col.data());
    CMapMat<T> cm(col.data(), kk, static_cast<Eigen::Index>(np));
    MapMat<T> dwm(dw + static_cast<std::size_t>(grp) * cout_g * kk, cout_g, kk);
    dwm.noalias() += gy * cm.transpose();
    if (need_dx) {
      CMapMat<T> wm(w + static_cast<std::size_t>(grp) * cout_g * kk, cout_g, kk);
      dcol.noalias() = wm.transpose() * gy;
      detail::col2im(dcol.data(), grp * cin_g, cin_g, g.kernel, g.stride, ho, wo, dx);
    }
  }
  return dx;
}

/// Batch-norm statistics and affine parameters for one layer.
template <typename T>
struct BatchNormCache {
  std::vector<T> xhat;     // normalized input
  std::vector<T> inv_std;  // per channel
  bool batch_stats = false;
};

/// y = gamma * (x - mu) / sqrt(var + eps) + beta, per channel.
/// With batch_stats, mu/var come from the batch and running stats are updated.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const T* gamma, const T* beta, T* running_mean,
                            T* running_var, double eps, double momentum, bool batch_stats,
                            BatchNormCache<T>* cache) {
  const int n = x.batch(), c = x.channels();
  const std::size_t p = x.plane_size(), m = p * n;
  Tensor<T> y(n, c, x.height(), x.width());
  if (cache) {
    cache->xhat.resize(x.size());
    cache->inv_std.resize(c);
    cache->batch_stats = batch_stats;
  }
  for (int ch = 0; ch < c; ++ch) {
    double mean, var;
    if (batch_stats) {
      double s = 0;
      for (int b = 0; b < n; ++b) {
        const T* src = x.plane(b, ch);
        for (std::size_t i = 0; i < p; ++i) s += src[i];
      }
      mean = s / static_cast<double>(m);
      double q = 0;
      for (int b = 0; b < n; ++b) {
        const T* src = x.plane(b, ch);
        for (std::size_t i = 0; i < p; ++i) {
          const double d = src[i] - mean;
          q += d * d;
        }
      }
      var = q / static_cast<double>(m);
      if (running_mean && running_var) {
        const double unbiased = m > 1 ? q / static_cast<double>(m - 1) : var;
        running_mean[ch] = static_cast<T>((1 - momentum) * running_mean[ch] + momentum * mean);
        running_var[ch] = static_cast<T>((1 - momentum) * running_var[ch] + momentum * unbiased);
      }
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    if (!(var + eps > 0)) throw NumericError("batch norm: non-positive variance + eps");
    const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
    const T mu = static_cast<T>(mean);
    const T gm = gamma[ch], bt = beta[ch];
    if (cache) cache->inv_std[ch] = inv;
    for (int b = 0; b < n; ++b) {
      const T* src = x.plane(b, ch);
      T* dst = y.plane(b, ch);
      T* xh = cache ? cache->xhat.data() + (static_cast<std::size_t>(b) * c + ch) * p : nullptr;
      for (std::size_t i = 0; i < p; ++i) {
        const T v = (src[i] - mu) * inv;
        if (xh) xh[i] = v;
        dst[i] = gm * v + bt;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& dy, const T* gamma, const BatchNormCache<T>& cache, T* dgamma,
                             T* dbeta) {
  const int n = dy.batch(), c = dy.channels();
  const std::size_t p = dy.plane_size(), m = p * n;
  Tensor<T> dx(n, c, dy.height(), dy.width());
  for (int ch = 0; ch < c; ++ch) {
    double sg = 0, sgx = 0;
    for (int b = 0; b < n; ++b) {
      const T* g = dy.plane(b, ch);
      const T* xh = cache.xhat.data() + (static_cast<std::size_t>(b) * c + ch) * p;
      for (std::size_t i = 0; i < p; ++i) {
        sg += g[i];
        sgx += static_cast<double>(g[i]) * xh[i];
      }
    }
    dgamma[ch] += static_cast<T>(sgx);
    dbeta[ch] += static_cast<T>(sg);
    const T scale = gamma[ch] * cache.inv_std[ch];
    if (cache.batch_stats) {
      const T mg = static_cast<T>(sg / static_cast<double>(m));
      const T mgx = static_cast<T>(sgx / static_cast<double>(m));
      for (int b = 0; b < n; ++b) {
        const T* g = dy.plane(b, ch);
        const T* xh = cache.xhat.data() + (static_cast<std::size_t>(b) * c + ch) * p;
        T* d = dx.plane(b, ch);
        for (std::size_t i = 0; i < p; ++i) d[i] = scale * (g[i] - mg - xh[i] * mgx);
      }
    } else {
      for (int b = 0; b < n; ++b) {
        const T* g = dy.plane(b, ch);
        T* d = dx.plane(b, ch);
        for (std::size_t i = 0; i < p; ++i) d[i] = scale * g[i];
      }
    }
  }
  return dx;
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
void silu_inplace(Tensor<T>& x) {
  for (auto& v : x.values()) v = v * sigmoid(v);
}

/// dL/dx given pre-activation x and dL/dy.
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& pre, const Tensor<T>& dy) {
  Tensor<T> dx(dy.batch(), dy.channels(), dy.height(), dy.width());
  const T* a = pre.data();
  const T* g = dy.data();
  T* d = dx.data();
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const T s = sigmoid(a[i]);
    d[i] = g[i] * s * (T(1) + a[i] * (T(1) - s));
  }
  return dx;
}

/// k x k max pool, stride 1, "same" padding. Records argmax offsets when idx != nullptr.
template <typename T>
Tensor<T> maxpool_same(const Tensor<T>& x, int k, std::vector<std::int32_t>* idx) {
  const int n = x.batch(), c = x.channels(), h = x.height(), w = x.width(), pad = k / 2;
  Tensor<T> y(n, c, h, w);
  if (idx) idx->resize(y.size());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* src = x.plane(b, ch);
      T* dst = y.plane(b, ch);
      std::int32_t* id = idx ? idx->data() + (static_cast<std::size_t>(b) * c + ch) * y.plane_size() : nullptr;
      for (int oy = 0; oy < h; ++oy) {
        const int y0 = std::max(0, oy - pad), y1 = std::min(h, oy + pad + 1);
        for (int ox = 0; ox < w; ++ox) {
          const int x0 = std::max(0, ox - pad), x1 = std::min(w, ox + pad + 1);
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t arg = 0;
          for (int iy = y0; iy < y1; ++iy) {
            for (int ix = x0; ix < x1; ++ix) {
              const T v = src[iy * w + ix];
              if (v > best) {
                best = v;
                arg = iy * w + ix;
              }
            }
          }
          dst[oy * w + ox] = best;
          if (id) id[oy * w + ox] = arg;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& idx) {
  Tensor<T> dx(dy.batch(), dy.channels(), dy.height(), dy.width());
  const std::size_t p = dy.plane_size();
  for (int b = 0; b < dy.batch(); ++b) {
    for (int ch = 0; ch < dy.channels(); ++ch) {
      const T* g = dy.plane(b, ch);
      T* d = dx.plane(b, ch);
      const std::int32_t* id = idx.data() + (static_cast<std::size_t>(b) * dy.channels() + ch) * p;
      for (std::size_t i = 0; i < p; ++i) d[id[i]] += g[i];
    }
  }
  return dx;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const int h = x.height(), w = x.width();
  Tensor<T> y(x.batch(), x.channels(), 2 * h, 2 * w);
  for (int b = 0; b < x.batch(); ++b) {
    for (int c = 0; c < x.channels(); ++c) {
      const T* src = x.plane(b, c);
      T* dst = y.plane(b, c);
      for (int oy = 0; oy < 2 * h; ++oy) {
        const T* srow = src + (oy / 2) * w;
        T* drow = dst + oy * 2 * w;
        for (int ox = 0; ox < 2 * w; ++ox) drow[ox] = srow[ox / 2];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
  const int h = dy.height() / 2, w = dy.width() / 2;
  Tensor<T> dx(dy.batch(), dy.channels(), h, w);
  for (int b = 0; b < dy.batch(); ++b) {
    for (int c = 0; c < dy.channels(); ++c) {
      const T* g = dy.plane(b, c);
      T* d = dx.plane(b, c);
      for (int oy = 0; oy < 2 * h; ++oy)
        for (int ox = 0; ox < 2 * w; ++ox) d[(oy / 2) * w + ox / 2] += g[oy * 2 * w + ox];
    }
  }
  return dx;
}

}  // namespace slyolo::ops
