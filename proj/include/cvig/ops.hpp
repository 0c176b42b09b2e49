#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cvig/parallel.hpp"
#include "cvig/tensor.hpp"

// Value-level kernels. Every sum runs in ascending index order so results are
// reproducible bit for bit regardless of the worker count.

namespace cvig {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

template <class T>
void matmul_rows(const T* a, const T* b, T* c, std::size_t i0, std::size_t i1, std::size_t k, std::size_t n) {
  constexpr std::size_t kColBlock = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t j1 = std::min(n, j0 + kColBlock);
    for (std::size_t i = i0; i < i1; ++i) std::fill(c + i * n + j0, c + i * n + j1, T{0});
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * n;
      for (std::size_t i = i0; i < i1; ++i) {
        const T aik = a[i * k + kk];
        T* crow = c + i * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += aik * brow[j];
      }
    }
  }
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> c({m, n});
  constexpr std::size_t kRowBlock = 8;
  const std::size_t blocks = (m + kRowBlock - 1) / kRowBlock;
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  T* cp = c.ptr();
  parallel::for_each_index(0, blocks, [&](std::size_t blk) {
    const std::size_t i0 = blk * kRowBlock;
    detail::matmul_rows(ap, bp, cp, i0, std::min(m, i0 + kRowBlock), k, n);
  });
  return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

/// x[n x c] + bias[c] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(x.rank() == 2 && bias.size() == x.cols(), "add_bias: bias length must equal column count");
  Tensor<T> out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += bias[j];
  return out;
}

/// Column-wise concatenation of matrices sharing the leading extent.
template <class T>
Tensor<T> concat_features(std::span<const Tensor<T>> parts) {
  detail::require(!parts.empty(), "concat_features: no parts");
  const std::size_t n = parts[0].dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2, "concat_features: parts must be matrices");
    detail::require(p.dim(0) == n, "concat_features: leading extent mismatch");
    width += p.dim(1);
  }
  Tensor<T> out({n, width});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t col = 0;
    for (const auto& p : parts) {
      const auto src = p.row(i);
      std::copy(src.begin(), src.end(), out.ptr() + i * width + col);
      col += src.size();
    }
  }
  return out;
}

template <class T>
Tensor<T> concat_features(const std::vector<Tensor<T>>& parts) {
  return concat_features(std::span<const Tensor<T>>(parts));
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  detail::require(x.rank() == 2, "gather_rows expects a matrix");
  detail::require(!index.empty(), "gather_rows: empty index");
  const std::size_t c = x.cols();
  Tensor<T> out({index.size(), c});
  for (std::size_t r = 0; r < index.size(); ++r) {
    detail::require(index[r] < x.rows(), "gather_rows: index out of range");
    std::copy_n(x.ptr() + index[r] * c, c, out.ptr() + r * c);
  }
  return out;
}

enum class ReduceKind { max, sum, mean };

template <class T>
struct ReduceResult {
  Tensor<T> values;
  /// Position along the reduced axis (reduce) or source row (segment_reduce)
  /// of the first maximum; empty unless kind == max.
  std::vector<std::size_t> argmax;
};

/// Reduces one axis. Max keeps the first occurrence on ties.
template <class T>
ReduceResult<T> reduce(ReduceKind kind, const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "reduce: axis out of range");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  ReduceResult<T> res{Tensor<T>(out_shape), {}};
  if (kind == ReduceKind::max) res.argmax.assign(outer * inner, 0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const T* lane = x.ptr() + o * len * inner + in;
      const std::size_t dst = o * inner + in;
      if (kind == ReduceKind::max) {
        T best = lane[0];
        std::size_t arg = 0;
        for (std::size_t t = 1; t < len; ++t)
          if (lane[t * inner] > best) best = lane[t * inner], arg = t;
        res.values[dst] = best;
        res.argmax[dst] = arg;
      } else {
        T acc{0};
        for (std::size_t t = 0; t < len; ++t) acc += lane[t * inner];
        res.values[dst] = kind == ReduceKind::sum ? acc : acc / static_cast<T>(len);
      }
    }
  }
  return res;
}

/// Row-segment reduction of x[R x C]: output row s reduces rows
/// [offsets[s], offsets[s+1]). Segments must be non-empty.
template <class T>
ReduceResult<T> segment_reduce(ReduceKind kind, const Tensor<T>& x, std::span<const std::size_t> offsets) {
  detail::require(x.rank() == 2, "segment_reduce expects a matrix");
  detail::require(offsets.size() >= 2 && offsets.back() == x.rows() && offsets.front() == 0,
                  "segment_reduce: offsets must span all rows");
  const std::size_t segs = offsets.size() - 1, c = x.cols();
  ReduceResult<T> res{Tensor<T>({segs, c}), {}};
  if (kind == ReduceKind::max) res.argmax.assign(segs * c, 0);
  for (std::size_t s = 0; s < segs; ++s)
    detail::require(offsets[s] < offsets[s + 1], "segment_reduce: empty segment " + std::to_string(s));
  parallel::for_each_index(0, segs, [&](std::size_t s) {
    const std::size_t r0 = offsets[s], r1 = offsets[s + 1];
    T* dst = res.values.ptr() + s * c;
    if (kind == ReduceKind::max) {
      std::size_t* arg = res.argmax.data() + s * c;
      std::copy_n(x.ptr() + r0 * c, c, dst);
      std::fill_n(arg, c, r0);
      for (std::size_t r = r0 + 1; r < r1; ++r) {
        const T* src = x.ptr() + r * c;
        for (std::size_t j = 0; j < c; ++j)
          if (src[j] > dst[j]) dst[j] = src[j], arg[j] = r;
      }
    } else {
      std::fill_n(dst, c, T{0});
      for (std::size_t r = r0; r < r1; ++r) {
        const T* src = x.ptr() + r * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
      if (kind == ReduceKind::mean) {
        const T len = static_cast<T>(r1 - r0);
        for (std::size_t j = 0; j < c; ++j) dst[j] /= len;
      }
    }
  }, 16);
  return res;
}

// ---- activations ---------------------------------------------------------

template <class T>
T gelu(T x) {
  return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = gelu(v);
  return out;
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(kLeakySlope)) {
  Tensor<T> out = x;
  for (auto& v : out.data()) v = v > T(0) ? v : slope * v;
  return out;
}

/// Softmax along `axis` with the lane maximum subtracted before exponentiation.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis out of range");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor<T> out = x;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      T* lane = out.ptr() + o * len * inner + in;
      T m = lane[0];
      for (std::size_t t = 1; t < len; ++t) m = std::max(m, lane[t * inner]);
      T total{0};
      for (std::size_t t = 0; t < len; ++t) {
        lane[t * inner] = std::exp(lane[t * inner] - m);
        total += lane[t * inner];
      }
      for (std::size_t t = 0; t < len; ++t) lane[t * inner] /= total;
    }
  }
  return out;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax(x, x.rank() - 1);
}

// ---- batch normalization -------------------------------------------------

enum class Mode { train, infer };

template <class T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;

  static RunningStats identity(std::size_t channels) {
    return {Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))};
  }
};

template <class T>
struct BatchNormResult {
  Tensor<T> out;
  Tensor<T> normalized;  // x_hat, saved for the backward rule
  Tensor<T> inv_std;     // per channel
};

/// Normalizes each column of x[n x c]. Train mode uses batch statistics and
/// folds them into `stats` with momentum 0.1 (unbiased variance for the
/// running estimate); infer mode uses `stats` as is.
template <class T>
BatchNormResult<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             RunningStats<T>& stats, Mode mode) {
  detail::require(x.rank() == 2, "batchnorm expects [n x c]");
  const std::size_t n = x.rows(), c = x.cols();
  detail::require(gamma.size() == c && beta.size() == c, "batchnorm: affine parameter length");
  detail::require(stats.mean.size() == c && stats.var.size() == c, "batchnorm: running stats length");
  if (mode == Mode::train && n < 2) throw DimensionError("batchnorm: train mode needs at least 2 rows");

  Tensor<T> mean({c}), var({c});
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) mean[j] += x(i, j);
    for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const T d = x(i, j) - mean[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<T>(n);
    const T m = T(kBatchNormMomentum);
    for (std::size_t j = 0; j < c; ++j) {
      stats.mean[j] = (T(1) - m) * stats.mean[j] + m * mean[j];
      stats.var[j] = (T(1) - m) * stats.var[j] + m * var[j] * static_cast<T>(n) / static_cast<T>(n - 1);
    }
  } else {
    mean = stats.mean;
    var = stats.var;
  }

  BatchNormResult<T> r{Tensor<T>({n, c}), Tensor<T>({n, c}), Tensor<T>({c})};
  for (std::size_t j = 0; j < c; ++j) r.inv_std[j] = T(1) / std::sqrt(var[j] + T(kBatchNormEps));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (x(i, j) - mean[j]) * r.inv_std[j];
      r.normalized(i, j) = xh;
      r.out(i, j) = gamma[j] * xh + beta[j];
    }
  return r;
}

// ---- 3x3 convolutions over NHWC grids (padding 1) -------------------------

struct GridShape {
  std::size_t batch, height, width, channels;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t stride) { return (in - 1) / stride + 1; }

/// Patch matrix [B*Ho*Wo x 9*C], columns ordered (dy, dx, channel).
template <class T>
Tensor<T> im2col3x3(const Tensor<T>& x, std::size_t stride) {
  detail::require(x.rank() == 4, "im2col3x3 expects [B x H x W x C]");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t Ho = conv_out_extent(H, stride), Wo = conv_out_extent(W, stride);
  Tensor<T> cols({B * Ho * Wo, 9 * C});
  parallel::for_each_index(0, B * Ho, [&](std::size_t bo) {
    const std::size_t b = bo / Ho, oy = bo % Ho;
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      T* dst = cols.ptr() + ((b * Ho + oy) * Wo + ox) * 9 * C;
      for (std::size_t dy = 0; dy < 3; ++dy) {
        const long iy = static_cast<long>(oy * stride + dy) - 1;
        for (std::size_t dx = 0; dx < 3; ++dx, dst += C) {
          const long ix = static_cast<long>(ox * stride + dx) - 1;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
          std::copy_n(x.ptr() + ((b * H + iy) * W + ix) * C, C, dst);
        }
      }
    }
  });
  return cols;
}

/// Adjoint of im2col3x3: scatters patch gradients back onto the input grid.
template <class T>
Tensor<T> col2im3x3(const Tensor<T>& cols, const GridShape& in, std::size_t stride) {
  const std::size_t B = in.batch, H = in.height, W = in.width, C = in.channels;
  const std::size_t Ho = conv_out_extent(H, stride), Wo = conv_out_extent(W, stride);
  Tensor<T> x({B, H, W, C});
  // Serial over output positions: several patches touch the same input pixel.
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T* src = cols.ptr() + ((b * Ho + oy) * Wo + ox) * 9 * C;
        for (std::size_t dy = 0; dy < 3; ++dy) {
          const long iy = static_cast<long>(oy * stride + dy) - 1;
          for (std::size_t dx = 0; dx < 3; ++dx, src += C) {
            const long ix = static_cast<long>(ox * stride + dx) - 1;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
            T* dst = x.ptr() + ((b * H + iy) * W + ix) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      }
  return x;
}

/// Depthwise 3x3, stride 1: kernel [3 x 3 x C], bias [C].
template <class T>
Tensor<T> depthwise3x3(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  detail::require(x.rank() == 4, "depthwise3x3 expects [B x H x W x C]");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  detail::require(kernel.size() == 9 * C && bias.size() == C, "depthwise3x3: kernel/bias size");
  Tensor<T> out(x.shape());
  parallel::for_each_index(0, B * H, [&](std::size_t by) {
    const std::size_t b = by / H, y = by % H;
    for (std::size_t xx = 0; xx < W; ++xx) {
      T* dst = out.ptr() + ((b * H + y) * W + xx) * C;
      std::fill_n(dst, C, T{0});
      for (std::size_t dy = 0; dy < 3; ++dy) {
        const long iy = static_cast<long>(y + dy) - 1;
        for (std::size_t dx = 0; dx < 3; ++dx) {
          const long ix = static_cast<long>(xx + dx) - 1;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
          const T* src = x.ptr() + ((b * H + iy) * W + ix) * C;
          const T* k = kernel.ptr() + (dy * 3 + dx) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * k[c];
        }
      }
      for (std::size_t c = 0; c < C; ++c) dst[c] += bias[c];
    }
  });
  return out;
}

}  // namespace cvig
