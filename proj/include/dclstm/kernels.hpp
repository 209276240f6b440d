#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dclstm/tensor.hpp"

// Convolution and sampling primitives. Images are [h, w, c], videos
// [t, h, w, c], kernels [kh, kw, c_in, c_out] / [kt, kh, kw, c_in, c_out];
// the channel axis is fastest so the inner accumulation loops run over
// contiguous memory. Gradient kernels accumulate into their outputs, so a
// caller owning zero-initialized buffers gets plain gradients and the
// autodiff tape gets summation across consumers for free.

namespace dclstm {

template <typename T = float>
struct Conv2DParams {
  Tensor<T> weight;  // [kh, kw, c_in, c_out]
  Tensor<T> bias;    // [c_out]; empty means no bias term
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
};

template <typename T = float>
struct Conv3DParams {
  Tensor<T> weight;  // [kt, kh, kw, c_in, c_out]
  Tensor<T> bias;    // [c_out]; empty means no bias term
  int st = 1, sh = 1, sw = 1;
  int pt = 0, ph = 0, pw = 0;
};

// Per output location, per kernel tap, a (dy, dx) displacement in pixels.
// Layout [h_out, w_out, 2*kh*kw], tap-major with (dy, dx) interleaved.
template <typename T = float>
struct OffsetField {
  Tensor<T> offsets;
};

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad, const char* what) {
  if (k < 1 || k % 2 == 0) throw std::invalid_argument(std::string(what) + ": kernel extents must be odd");
  if (stride < 1) throw std::invalid_argument(std::string(what) + ": stride must be >= 1");
  if (pad < 0) throw std::invalid_argument(std::string(what) + ": padding must be >= 0");
  const int64_t span = in + 2 * pad - k;
  if (span < 0 || span % stride != 0)
    throw std::invalid_argument(std::string(what) + ": non-integral output extent for input " + std::to_string(in));
  return span / stride + 1;
}

// Full windows only; a trailing remainder smaller than the window is dropped.
inline int64_t pool_out_extent(int64_t in, int64_t window, int64_t stride, const char* what) {
  if (window < 1 || stride < 1) throw std::invalid_argument(std::string(what) + ": window and stride must be >= 1");
  if (in < window) throw std::invalid_argument(std::string(what) + ": input extent smaller than window");
  return (in - window) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int sh, int sw, int ph, int pw) {
  if (x.shape().rank() != 3) throw std::invalid_argument("conv2d: input must be [h,w,c]");
  if (weight.shape().rank() != 4) throw std::invalid_argument("conv2d: weight must be [kh,kw,c_in,c_out]");
  const int64_t h = x.shape().extent(0), w = x.shape().extent(1), ci_n = x.shape().extent(2);
  const int64_t kh = weight.shape().extent(0), kw = weight.shape().extent(1);
  const int64_t wci = weight.shape().extent(2), co_n = weight.shape().extent(3);
  if (wci != ci_n) throw std::invalid_argument("conv2d: channel mismatch");
  if (!bias.empty() && (bias.shape().rank() != 1 || bias.shape().extent(0) != co_n))
    throw std::invalid_argument("conv2d: bias must be [c_out]");
  const int64_t ho = detail::conv_out_extent(h, kh, sh, ph, "conv2d");
  const int64_t wo = detail::conv_out_extent(w, kw, sw, pw, "conv2d");

  Tensor<T> y{Shape{ho, wo, co_n}};
  const T* xp = x.data();
  const T* wp = weight.data();
  T* yp = y.data();
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* yrow = yp + (oy * wo + ox) * co_n;
      if (!bias.empty())
        for (int64_t co = 0; co < co_n; ++co) yrow[co] = bias[co];
      for (int64_t ky = 0; ky < kh; ++ky) {
        const int64_t iy = oy * sh - ph + ky;
        if (iy < 0 || iy >= h) continue;
        for (int64_t kx = 0; kx < kw; ++kx) {
          const int64_t ix = ox * sw - pw + kx;
          if (ix < 0 || ix >= w) continue;
          const T* xrow = xp + (iy * w + ix) * ci_n;
          const T* wtap = wp + (ky * kw + kx) * ci_n * co_n;
          for (int64_t ci = 0; ci < ci_n; ++ci) {
            const T xv = xrow[ci];
            const T* wrow = wtap + ci * co_n;
            for (int64_t co = 0; co < co_n; ++co) yrow[co] += xv * wrow[co];
          }
        }
      }
    }
  }
  guard_finite(y, "conv2d");
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2DParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.sh, p.sw, p.ph, p.pw);
}

template <typename T>
void conv2d_grad(const Tensor<T>& x, const Tensor<T>& weight, int sh, int sw, int ph, int pw,
                 const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias) {
  const int64_t h = x.shape().extent(0), w = x.shape().extent(1), ci_n = x.shape().extent(2);
  const int64_t kh = weight.shape().extent(0), kw = weight.shape().extent(1);
  const int64_t co_n = weight.shape().extent(3);
  const int64_t ho = dy.shape().extent(0), wo = dy.shape().extent(1);
  const T* xp = x.data();
  const T* wp = weight.data();
  const T* dyp = dy.data();
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      const T* dyrow = dyp + (oy * wo + ox) * co_n;
      if (dbias) {
        T* dbp = dbias->data();
        for (int64_t co = 0; co < co_n; ++co) dbp[co] += dyrow[co];
      }
      for (int64_t ky = 0; ky < kh; ++ky) {
        const int64_t iy = oy * sh - ph + ky;
        if (iy < 0 || iy >= h) continue;
        for (int64_t kx = 0; kx < kw; ++kx) {
          const int64_t ix = ox * sw - pw + kx;
          if (ix < 0 || ix >= w) continue;
          const T* xrow = xp + (iy * w + ix) * ci_n;
          const int64_t tap = (ky * kw + kx) * ci_n * co_n;
          if (dweight) {
            T* dwtap = dweight->data() + tap;
            for (int64_t ci = 0; ci < ci_n; ++ci) {
              const T xv = xrow[ci];
              T* dwrow = dwtap + ci * co_n;
              for (int64_t co = 0; co < co_n; ++co) dwrow[co] += xv * dyrow[co];
            }
          }
          if (dx) {
            const T* wtap = wp + tap;
            T* dxrow = dx->data() + (iy * w + ix) * ci_n;
            for (int64_t ci = 0; ci < ci_n; ++ci) {
              const T* wrow = wtap + ci * co_n;
              T acc = 0;
#pragma omp simd reduction(+ : acc)
              for (int64_t co = 0; co < co_n; ++co) acc += wrow[co] * dyrow[co];
              dxrow[ci] += acc;
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int st, int sh, int sw, int pt, int ph, int pw) {
  if (x.shape().rank() != 4) throw std::invalid_argument("conv3d: input must be [t,h,w,c]");
  if (weight.shape().rank() != 5) throw std::invalid_argument("conv3d: weight must be [kt,kh,kw,c_in,c_out]");
  const int64_t t = x.shape().extent(0), h = x.shape().extent(1), w = x.shape().extent(2);
  const int64_t ci_n = x.shape().extent(3);
  const int64_t kt = weight.shape().extent(0), kh = weight.shape().extent(1), kw = weight.shape().extent(2);
  const int64_t wci = weight.shape().extent(3), co_n = weight.shape().extent(4);
  if (wci != ci_n) throw std::invalid_argument("conv3d: channel mismatch");
  if (!bias.empty() && (bias.shape().rank() != 1 || bias.shape().extent(0) != co_n))
    throw std::invalid_argument("conv3d: bias must be [c_out]");
  const int64_t to = detail::conv_out_extent(t, kt, st, pt, "conv3d");
  const int64_t ho = detail::conv_out_extent(h, kh, sh, ph, "conv3d");
  const int64_t wo = detail::conv_out_extent(w, kw, sw, pw, "conv3d");

  Tensor<T> y{Shape{to, ho, wo, co_n}};
  const T* xp = x.data();
  const T* wp = weight.data();
  T* yp = y.data();
  for (int64_t ot = 0; ot < to; ++ot) {
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        T* yrow = yp + ((ot * ho + oy) * wo + ox) * co_n;
        if (!bias.empty())
          for (int64_t co = 0; co < co_n; ++co) yrow[co] = bias[co];
        for (int64_t kz = 0; kz < kt; ++kz) {
          const int64_t it = ot * st - pt + kz;
          if (it < 0 || it >= t) continue;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * sh - ph + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * sw - pw + kx;
              if (ix < 0 || ix >= w) continue;
              const T* xrow = xp + ((it * h + iy) * w + ix) * ci_n;
              const T* wtap = wp + ((kz * kh + ky) * kw + kx) * ci_n * co_n;
              for (int64_t ci = 0; ci < ci_n; ++ci) {
                const T xv = xrow[ci];
                const T* wrow = wtap + ci * co_n;
                for (int64_t co = 0; co < co_n; ++co) yrow[co] += xv * wrow[co];
              }
            }
          }
        }
      }
    }
  }
  guard_finite(y, "conv3d");
  return y;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Conv3DParams<T>& p) {
  return conv3d(x, p.weight, p.bias, p.st, p.sh, p.sw, p.pt, p.ph, p.pw);
}

template <typename T>
void conv3d_grad(const Tensor<T>& x, const Tensor<T>& weight, int st, int sh, int sw,
                 int pt, int ph, int pw, const Tensor<T>& dy,
                 Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias) {
  const int64_t t = x.shape().extent(0), h = x.shape().extent(1), w = x.shape().extent(2);
  const int64_t ci_n = x.shape().extent(3);
  const int64_t kt = weight.shape().extent(0), kh = weight.shape().extent(1), kw = weight.shape().extent(2);
  const int64_t co_n = weight.shape().extent(4);
  const int64_t to = dy.shape().extent(0), ho = dy.shape().extent(1), wo = dy.shape().extent(2);
  const T* xp = x.data();
  const T* wp = weight.data();
  const T* dyp = dy.data();
  for (int64_t ot = 0; ot < to; ++ot) {
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        const T* dyrow = dyp + ((ot * ho + oy) * wo + ox) * co_n;
        if (dbias) {
          T* dbp = dbias->data();
          for (int64_t co = 0; co < co_n; ++co) dbp[co] += dyrow[co];
        }
        for (int64_t kz = 0; kz < kt; ++kz) {
          const int64_t it = ot * st - pt + kz;
          if (it < 0 || it >= t) continue;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * sh - ph + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * sw - pw + kx;
              if (ix < 0 || ix >= w) continue;
              const T* xrow = xp + ((it * h + iy) * w + ix) * ci_n;
              const int64_t tap = ((kz * kh + ky) * kw + kx) * ci_n * co_n;
              if (dweight) {
                T* dwtap = dweight->data() + tap;
                for (int64_t ci = 0; ci < ci_n; ++ci) {
                  const T xv = xrow[ci];
                  T* dwrow = dwtap + ci * co_n;
                  for (int64_t co = 0; co < co_n; ++co) dwrow[co] += xv * dyrow[co];
                }
              }
              if (dx) {
                const T* wtap = wp + tap;
                T* dxrow = dx->data() + ((it * h + iy) * w + ix) * ci_n;
                for (int64_t ci = 0; ci < ci_n; ++ci) {
                  const T* wrow = wtap + ci * co_n;
                  T acc = 0;
#pragma omp simd reduction(+ : acc)
                  for (int64_t co = 0; co < co_n; ++co) acc += wrow[co] * dyrow[co];
                  dxrow[ci] += acc;
                }
              }
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x, std::array<int, 3> window, std::array<int, 3> stride,
                    std::vector<int64_t>* argmax = nullptr) {
  if (x.shape().rank() != 4) throw std::invalid_argument("maxpool3d: input must be [t,h,w,c]");
  const int64_t t = x.shape().extent(0), h = x.shape().extent(1), w = x.shape().extent(2);
  const int64_t c = x.shape().extent(3);
  const int64_t to = detail::pool_out_extent(t, window[0], stride[0], "maxpool3d");
  const int64_t ho = detail::pool_out_extent(h, window[1], stride[1], "maxpool3d");
  const int64_t wo = detail::pool_out_extent(w, window[2], stride[2], "maxpool3d");
  Tensor<T> y{Shape{to, ho, wo, c}};
  if (argmax) argmax->assign(static_cast<size_t>(y.numel()), -1);
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t ot = 0; ot < to; ++ot)
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox)
        for (int64_t cc = 0; cc < c; ++cc) {
          T best = 0;
          int64_t best_idx = -1;
          for (int64_t wt = 0; wt < window[0]; ++wt)
            for (int64_t wy = 0; wy < window[1]; ++wy)
              for (int64_t wx = 0; wx < window[2]; ++wx) {
                const int64_t it = ot * stride[0] + wt;
                const int64_t iy = oy * stride[1] + wy;
                const int64_t ix = ox * stride[2] + wx;
                const int64_t idx = ((it * h + iy) * w + ix) * c + cc;
                // first maximal element in scan order wins ties
                if (best_idx < 0 || xp[idx] > best) {
                  best = xp[idx];
                  best_idx = idx;
                }
              }
          const int64_t out_idx = ((ot * ho + oy) * wo + ox) * c + cc;
          yp[out_idx] = best;
          if (argmax) (*argmax)[static_cast<size_t>(out_idx)] = best_idx;
        }
  guard_finite(y, "maxpool3d");
  return y;
}

template <typename T>
void maxpool3d_grad(const std::vector<int64_t>& argmax, const Tensor<T>& dy, Tensor<T>* dx) {
  const T* dyp = dy.data();
  T* dxp = dx->data();
  for (int64_t i = 0; i < dy.numel(); ++i) dxp[argmax[static_cast<size_t>(i)]] += dyp[i];
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::array<int, 2> window, std::array<int, 2> stride) {
  if (x.shape().rank() != 3) throw std::invalid_argument("avgpool2d: input must be [h,w,c]");
  const int64_t h = x.shape().extent(0), w = x.shape().extent(1), c = x.shape().extent(2);
  const int64_t ho = detail::pool_out_extent(h, window[0], stride[0], "avgpool2d");
  const int64_t wo = detail::pool_out_extent(w, window[1], stride[1], "avgpool2d");
  Tensor<T> y{Shape{ho, wo, c}};
  const T inv = T(1) / static_cast<T>(window[0] * window[1]);
  const T* xp = x.data();
  T* yp = y.data();
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* yrow = yp + (oy * wo + ox) * c;
      for (int64_t wy = 0; wy < window[0]; ++wy)
        for (int64_t wx = 0; wx < window[1]; ++wx) {
          const T* xrow = xp + ((oy * stride[0] + wy) * w + (ox * stride[1] + wx)) * c;
          for (int64_t cc = 0; cc < c; ++cc) yrow[cc] += xrow[cc];
        }
      for (int64_t cc = 0; cc < c; ++cc) yrow[cc] *= inv;
    }
  guard_finite(y, "avgpool2d");
  return y;
}

template <typename T>
void avgpool2d_grad(const Shape& x_shape, std::array<int, 2> window, std::array<int, 2> stride,
                    const Tensor<T>& dy, Tensor<T>* dx) {
  const int64_t w = x_shape.extent(1), c = x_shape.extent(2);
  const int64_t ho = dy.shape().extent(0), wo = dy.shape().extent(1);
  const T inv = T(1) / static_cast<T>(window[0] * window[1]);
  const T* dyp = dy.data();
  T* dxp = dx->data();
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox) {
      const T* dyrow = dyp + (oy * wo + ox) * c;
      for (int64_t wy = 0; wy < window[0]; ++wy)
        for (int64_t wx = 0; wx < window[1]; ++wx) {
          T* dxrow = dxp + ((oy * stride[0] + wy) * w + (ox * stride[1] + wx)) * c;
          for (int64_t cc = 0; cc < c; ++cc) dxrow[cc] += dyrow[cc] * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// bilinear sampling

// Reads x at a continuous coordinate via the tent kernel
// g(a,b) = max(0, 1-|a-b|); pixels outside [0,h-1]x[0,w-1] contribute zero.
// Writes one value per channel into out[0..c).
template <typename T>
void bilinear_sample_into(const T* xp, int64_t h, int64_t w, int64_t c, T py, T px, T* out) {
  for (int64_t cc = 0; cc < c; ++cc) out[cc] = T(0);
  // every corner out of bounds (also catches NaN and values that would
  // overflow the integer cast below)
  if (!(py > T(-1) && py < static_cast<T>(h) && px > T(-1) && px < static_cast<T>(w))) return;
  const int64_t y0 = static_cast<int64_t>(std::floor(py));
  const int64_t x0 = static_cast<int64_t>(std::floor(px));
  const T fy = py - static_cast<T>(y0);
  const T fx = px - static_cast<T>(x0);
  const T wgt[4] = {(T(1) - fy) * (T(1) - fx), (T(1) - fy) * fx, fy * (T(1) - fx), fy * fx};
  const int64_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
  const int64_t cx[4] = {x0, x0 + 1, x0, x0 + 1};
  for (int k = 0; k < 4; ++k) {
    if (cy[k] < 0 || cy[k] >= h || cx[k] < 0 || cx[k] >= w) continue;
    const T* xrow = xp + (cy[k] * w + cx[k]) * c;
    const T g = wgt[k];
    for (int64_t cc = 0; cc < c; ++cc) out[cc] += g * xrow[cc];
  }
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, T py, T px) {
  if (x.shape().rank() != 3) throw std::invalid_argument("bilinear_sample: input must be [h,w,c]");
  const int64_t c = x.shape().extent(2);
  Tensor<T> out{Shape{c}};
  bilinear_sample_into(x.data(), x.shape().extent(0), x.shape().extent(1), c, py, px, out.data());
  guard_finite(out, "bilinear_sample");
  return out;
}

// ---------------------------------------------------------------------------
// deformable conv2d

namespace detail {
template <typename T>
void validate_offsets(const Tensor<T>& offsets, int64_t ho, int64_t wo, int64_t kh, int64_t kw) {
  if (offsets.shape().rank() != 3 || offsets.shape().extent(0) != ho || offsets.shape().extent(1) != wo ||
      offsets.shape().extent(2) != 2 * kh * kw)
    throw std::invalid_argument("deformable_conv2d: offset field shape " + offsets.shape().str() +
                                " does not match output " + Shape{ho, wo, 2 * kh * kw}.str());
}
}  // namespace detail

template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                            const Tensor<T>& offsets, int sh, int sw, int ph, int pw) {
  if (x.shape().rank() != 3) throw std::invalid_argument("deformable_conv2d: input must be [h,w,c]");
  const int64_t h = x.shape().extent(0), w = x.shape().extent(1), ci_n = x.shape().extent(2);
  const int64_t kh = weight.shape().extent(0), kw = weight.shape().extent(1);
  const int64_t co_n = weight.shape().extent(3);
  if (weight.shape().extent(2) != ci_n) throw std::invalid_argument("deformable_conv2d: channel mismatch");
  const int64_t ho = detail::conv_out_extent(h, kh, sh, ph, "deformable_conv2d");
  const int64_t wo = detail::conv_out_extent(w, kw, sw, pw, "deformable_conv2d");
  detail::validate_offsets(offsets, ho, wo, kh, kw);

  Tensor<T> y{Shape{ho, wo, co_n}};
  const T* xp = x.data();
  const T* wp = weight.data();
  const T* op = offsets.data();
  T* yp = y.data();
  std::vector<T> sample(static_cast<size_t>(ci_n));
  const int64_t taps = kh * kw;
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* yrow = yp + (oy * wo + ox) * co_n;
      if (!bias.empty())
        for (int64_t co = 0; co < co_n; ++co) yrow[co] = bias[co];
      const T* orow = op + (oy * wo + ox) * 2 * taps;
      for (int64_t n = 0; n < taps; ++n) {
        const int64_t ky = n / kw, kx = n % kw;
        const T py = static_cast<T>(oy * sh - ph + ky) + orow[2 * n];
        const T px = static_cast<T>(ox * sw - pw + kx) + orow[2 * n + 1];
        bilinear_sample_into(xp, h, w, ci_n, py, px, sample.data());
        const T* wtap = wp + n * ci_n * co_n;
        for (int64_t ci = 0; ci < ci_n; ++ci) {
          const T sv = sample[static_cast<size_t>(ci)];
          if (sv == T(0)) continue;
          const T* wrow = wtap + ci * co_n;
          for (int64_t co = 0; co < co_n; ++co) yrow[co] += sv * wrow[co];
        }
      }
    }
  }
  guard_finite(y, "deformable_conv2d");
  return y;
}

template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& x, const Conv2DParams<T>& p, const OffsetField<T>& off) {
  return deformable_conv2d(x, p.weight, p.bias, off.offsets, p.sh, p.sw, p.ph, p.pw);
}

template <typename T>
void deformable_conv2d_grad(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& offsets,
                            int sh, int sw, int ph, int pw, const Tensor<T>& dy,
                            Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias, Tensor<T>* doffsets) {
  const int64_t h = x.shape().extent(0), w = x.shape().extent(1), ci_n = x.shape().extent(2);
  const int64_t kh = weight.shape().extent(0), kw = weight.shape().extent(1);
  const int64_t co_n = weight.shape().extent(3);
  const int64_t ho = dy.shape().extent(0), wo = dy.shape().extent(1);
  const T* xp = x.data();
  const T* wp = weight.data();
  const T* op = offsets.data();
  const T* dyp = dy.data();
  std::vector<T> sample(static_cast<size_t>(ci_n));
  std::vector<T> gvec(static_cast<size_t>(ci_n));  // dL/d(sample[ci])
  const int64_t taps = kh * kw;
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      const T* dyrow = dyp + (oy * wo + ox) * co_n;
      if (dbias) {
        T* dbp = dbias->data();
        for (int64_t co = 0; co < co_n; ++co) dbp[co] += dyrow[co];
      }
      const T* orow = op + (oy * wo + ox) * 2 * taps;
      for (int64_t n = 0; n < taps; ++n) {
        const int64_t ky = n / kw, kx = n % kw;
        const T py = static_cast<T>(oy * sh - ph + ky) + orow[2 * n];
        const T px = static_cast<T>(ox * sw - pw + kx) + orow[2 * n + 1];
        // fully out of bounds: no corner contributes and the offset
        // derivative is zero on the zero extension
        if (!(py > T(-1) && py < static_cast<T>(h) && px > T(-1) && px < static_cast<T>(w))) continue;
        const int64_t y0 = static_cast<int64_t>(std::floor(py));
        const int64_t x0 = static_cast<int64_t>(std::floor(px));
        const T fy = py - static_cast<T>(y0);
        const T fx = px - static_cast<T>(x0);
        const T wgt[4] = {(T(1) - fy) * (T(1) - fx), (T(1) - fy) * fx, fy * (T(1) - fx), fy * fx};
        const T dw_dfy[4] = {-(T(1) - fx), -fx, T(1) - fx, fx};
        const T dw_dfx[4] = {-(T(1) - fy), T(1) - fy, -fy, fy};
        const int64_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
        const int64_t cx[4] = {x0, x0 + 1, x0, x0 + 1};

        const T* wtap = wp + n * ci_n * co_n;
        for (int64_t ci = 0; ci < ci_n; ++ci) {
          const T* wrow = wtap + ci * co_n;
          T acc = 0;
#pragma omp simd reduction(+ : acc)
          for (int64_t co = 0; co < co_n; ++co) acc += wrow[co] * dyrow[co];
          gvec[static_cast<size_t>(ci)] = acc;
        }

        if (dweight) {
          bilinear_sample_into(xp, h, w, ci_n, py, px, sample.data());
          T* dwtap = dweight->data() + n * ci_n * co_n;
          for (int64_t ci = 0; ci < ci_n; ++ci) {
            const T sv = sample[static_cast<size_t>(ci)];
            if (sv == T(0)) continue;
            T* dwrow = dwtap + ci * co_n;
            for (int64_t co = 0; co < co_n; ++co) dwrow[co] += sv * dyrow[co];
          }
        }

        T dpy = 0, dpx = 0;
        for (int k = 0; k < 4; ++k) {
          if (cy[k] < 0 || cy[k] >= h || cx[k] < 0 || cx[k] >= w) continue;
          const int64_t xoff = (cy[k] * w + cx[k]) * ci_n;
          const T* xrow = xp + xoff;
          T dot = 0;
#pragma omp simd reduction(+ : dot)
          for (int64_t ci = 0; ci < ci_n; ++ci) dot += gvec[static_cast<size_t>(ci)] * xrow[ci];
          dpy += dw_dfy[k] * dot;
          dpx += dw_dfx[k] * dot;
          if (dx) {
            T* dxrow = dx->data() + xoff;
            const T g = wgt[k];
            for (int64_t ci = 0; ci < ci_n; ++ci) dxrow[ci] += g * gvec[static_cast<size_t>(ci)];
          }
        }
        if (doffsets) {
          T* dorow = doffsets->data() + (oy * wo + ox) * 2 * taps;
          dorow[2 * n] += dpy;
          dorow[2 * n + 1] += dpx;
        }
      }
    }
  }
}

// Offsets come from a plain convolution whose output channel count is
// 2*kh*kw of the consuming deformable conv; zero-initialized weights and bias
// start the deformable layer exactly at the regular-grid baseline.
template <typename T>
OffsetField<T> offset_predictor(const Tensor<T>& x, const Conv2DParams<T>& p) {
  const int64_t kh = p.weight.shape().extent(0), kw = p.weight.shape().extent(1);
  if (p.weight.shape().extent(3) != 2 * kh * kw)
    throw std::invalid_argument("offset_predictor: output channel count must be 2*kh*kw");
  return OffsetField<T>{conv2d(x, p)};
}

}  // namespace dclstm
