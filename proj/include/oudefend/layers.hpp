#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oudefend/autodiff.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/tensor.hpp"

namespace oudefend {

using Triple = std::array<std::size_t, 3>;

/// Stride and zero padding of a 3-D convolution, ordered (t, h, w).
struct Conv3dGeometry {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};

  /// "Same" padding for an odd cubic kernel at unit stride.
  static Conv3dGeometry same(std::size_t k) { return {{1, 1, 1}, {k / 2, k / 2, k / 2}}; }
};

/// floor((D + 2p - k) / s) + 1, or ShapeError when the kernel does not fit.
inline std::size_t conv_output_dim(std::size_t d, std::size_t k, std::size_t s, std::size_t p) {
  if (s == 0) throw ShapeError("convolution stride must be positive");
  if (d + 2 * p < k) {
    throw ShapeError("kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(d + 2 * p));
  }
  return (d + 2 * p - k) / s + 1;
}

namespace detail {

struct ConvDims {
  std::size_t n, cin, t, h, w;
  std::size_t cout, kt, kh, kw;
  std::size_t ot, oh, ow;
  Conv3dGeometry geo;

  std::size_t patch() const { return cin * kt * kh * kw; }
  std::size_t out_plane() const { return ot * oh * ow; }
  std::size_t in_plane() const { return t * h * w; }
  bool pointwise() const {
    return kt == 1 && kh == 1 && kw == 1 && geo.stride == Triple{1, 1, 1} &&
           geo.padding == Triple{0, 0, 0};
  }
};

// Valid output range [lo, hi) along one axis for kernel offset `k`.
inline void valid_range(std::size_t out, std::size_t in, std::size_t k, std::size_t s,
                        std::size_t p, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
  const auto off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(p);
  const auto ss = static_cast<std::ptrdiff_t>(s);
  // First o with o*s + off >= 0.
  lo = off >= 0 ? 0 : (-off + ss - 1) / ss;
  // Last o with o*s + off <= in - 1.
  const auto top = static_cast<std::ptrdiff_t>(in) - 1 - off;
  hi = top < 0 ? 0 : std::min<std::ptrdiff_t>(top / ss + 1, static_cast<std::ptrdiff_t>(out));
  if (hi < lo) hi = lo;
}

// cols is (patch x out_plane), row-major; one sample.
inline void im2col(const double* x, const ConvDims& d, double* cols) {
  const auto P = d.out_plane();
  std::fill(cols, cols + d.patch() * P, 0.0);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    const double* xc = x + ci * d.in_plane();
    for (std::size_t a = 0; a < d.kt; ++a) {
      std::ptrdiff_t t_lo, t_hi;
      valid_range(d.ot, d.t, a, d.geo.stride[0], d.geo.padding[0], t_lo, t_hi);
      for (std::size_t b = 0; b < d.kh; ++b) {
        std::ptrdiff_t h_lo, h_hi;
        valid_range(d.oh, d.h, b, d.geo.stride[1], d.geo.padding[1], h_lo, h_hi);
        for (std::size_t c = 0; c < d.kw; ++c, ++row) {
          std::ptrdiff_t w_lo, w_hi;
          valid_range(d.ow, d.w, c, d.geo.stride[2], d.geo.padding[2], w_lo, w_hi);
          double* dst = cols + row * P;
          const auto sw = static_cast<std::ptrdiff_t>(d.geo.stride[2]);
          const auto w_off = static_cast<std::ptrdiff_t>(c) - static_cast<std::ptrdiff_t>(d.geo.padding[2]);
          for (auto to = t_lo; to < t_hi; ++to) {
            const auto ti = to * static_cast<std::ptrdiff_t>(d.geo.stride[0]) + static_cast<std::ptrdiff_t>(a) -
                            static_cast<std::ptrdiff_t>(d.geo.padding[0]);
            for (auto ho = h_lo; ho < h_hi; ++ho) {
              const auto hi_ = ho * static_cast<std::ptrdiff_t>(d.geo.stride[1]) + static_cast<std::ptrdiff_t>(b) -
                               static_cast<std::ptrdiff_t>(d.geo.padding[1]);
              const double* src = xc + (ti * static_cast<std::ptrdiff_t>(d.h) + hi_) * static_cast<std::ptrdiff_t>(d.w);
              double* out = dst + (to * static_cast<std::ptrdiff_t>(d.oh) + ho) * static_cast<std::ptrdiff_t>(d.ow);
              for (auto wo = w_lo; wo < w_hi; ++wo) out[wo] = src[wo * sw + w_off];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds cols back into dx (one sample).
inline void col2im(const double* cols, const ConvDims& d, double* dx) {
  const auto P = d.out_plane();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    double* xc = dx + ci * d.in_plane();
    for (std::size_t a = 0; a < d.kt; ++a) {
      std::ptrdiff_t t_lo, t_hi;
      valid_range(d.ot, d.t, a, d.geo.stride[0], d.geo.padding[0], t_lo, t_hi);
      for (std::size_t b = 0; b < d.kh; ++b) {
        std::ptrdiff_t h_lo, h_hi;
        valid_range(d.oh, d.h, b, d.geo.stride[1], d.geo.padding[1], h_lo, h_hi);
        for (std::size_t c = 0; c < d.kw; ++c, ++row) {
          std::ptrdiff_t w_lo, w_hi;
          valid_range(d.ow, d.w, c, d.geo.stride[2], d.geo.padding[2], w_lo, w_hi);
          const double* srcrow = cols + row * P;
          const auto sw = static_cast<std::ptrdiff_t>(d.geo.stride[2]);
          const auto w_off = static_cast<std::ptrdiff_t>(c) - static_cast<std::ptrdiff_t>(d.geo.padding[2]);
          for (auto to = t_lo; to < t_hi; ++to) {
            const auto ti = to * static_cast<std::ptrdiff_t>(d.geo.stride[0]) + static_cast<std::ptrdiff_t>(a) -
                            static_cast<std::ptrdiff_t>(d.geo.padding[0]);
            for (auto ho = h_lo; ho < h_hi; ++ho) {
              const auto hi_ = ho * static_cast<std::ptrdiff_t>(d.geo.stride[1]) + static_cast<std::ptrdiff_t>(b) -
                               static_cast<std::ptrdiff_t>(d.geo.padding[1]);
              double* dst = xc + (ti * static_cast<std::ptrdiff_t>(d.h) + hi_) * static_cast<std::ptrdiff_t>(d.w);
              const double* src = srcrow + (to * static_cast<std::ptrdiff_t>(d.oh) + ho) * static_cast<std::ptrdiff_t>(d.ow);
              for (auto wo = w_lo; wo < w_hi; ++wo) dst[wo * sw + w_off] += src[wo];
            }
          }
        }
      }
    }
  }
}

inline void require_rank5(const Tensor& x, const char* op) {
  if (x.rank() != 5) {
    throw ShapeError(std::string(op) + " expects (N,C,T,H,W), got " + to_string(x.shape()));
  }
}

}  // namespace detail

/// Direct 3-D cross-correlation. `weight` is (C_out, C_in, kt, kh, kw),
/// `bias` (C_out) is optional.
inline Var conv3d(Var x, Var weight, std::optional<Var> bias, Conv3dGeometry geo = {}) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  detail::require_rank5(xv, "conv3d");
  if (wv.rank() != 5) throw ShapeError("conv3d weight must be rank 5, got " + to_string(wv.shape()));
  if (wv.dim(1) != xv.dim(1)) {
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(xv.dim(1)) +
                     ", weight expects " + std::to_string(wv.dim(1)));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != wv.dim(0))) {
    throw ShapeError("conv3d bias must have C_out elements");
  }
  detail::ConvDims d{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), xv.dim(4),
                     wv.dim(0), wv.dim(2), wv.dim(3), wv.dim(4),
                     0, 0, 0, geo};
  d.ot = conv_output_dim(d.t, d.kt, geo.stride[0], geo.padding[0]);
  d.oh = conv_output_dim(d.h, d.kh, geo.stride[1], geo.padding[1]);
  d.ow = conv_output_dim(d.w, d.kw, geo.stride[2], geo.padding[2]);

  const auto K = d.patch();
  const auto P = d.out_plane();
  Tensor out = Tensor::zeros({d.n, d.cout, d.ot, d.oh, d.ow});
  std::vector<double> cols(d.pointwise() ? 0 : K * P);
  ConstMatMap wm(wv.data().data(), d.cout, K);
  for (std::size_t n = 0; n < d.n; ++n) {
    const double* xn = xv.data().data() + n * d.cin * d.in_plane();
    if (!d.pointwise()) detail::im2col(xn, d, cols.data());
    const double* cm = d.pointwise() ? xn : cols.data();
    MatMap om(out.data().data() + n * d.cout * P, d.cout, P);
    om.noalias() = wm * ConstMatMap(cm, K, P);
    if (bias) {
      const Tensor& bv = bias->value();
      for (std::size_t co = 0; co < d.cout; ++co) om.row(co).array() += bv[co];
    }
  }

  Var b = bias.value_or(weight);
  const bool has_bias = bias.has_value();
  auto adjoint = [x, weight, b, has_bias, d](Tape& t, const std::vector<double>& g) {
    const auto K = d.patch();
    const auto P = d.out_plane();
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    const bool gx = t.needs_grad(x);
    const bool gw = t.needs_grad(weight);
    const bool gb = has_bias && t.needs_grad(b);
    std::vector<double> cols(d.pointwise() ? 0 : K * P);
    std::vector<double> dcols(gx && !d.pointwise() ? K * P : 0);
    for (std::size_t n = 0; n < d.n; ++n) {
      ConstMatMap gm(g.data() + n * d.cout * P, d.cout, P);
      if (gw) {
        const double* xn = xv.data().data() + n * d.cin * d.in_plane();
        if (!d.pointwise()) detail::im2col(xn, d, cols.data());
        const double* cm = d.pointwise() ? xn : cols.data();
        MatMap(t.grad_buffer(weight).data(), d.cout, K).noalias() +=
            gm * ConstMatMap(cm, K, P).transpose();
      }
      if (gb) {
        auto& gbias = t.grad_buffer(b);
        for (std::size_t co = 0; co < d.cout; ++co) {
          const double* row = gm.data() + co * P;
          gbias[co] += std::accumulate(row, row + P, 0.0);
        }
      }
      if (gx) {
        double* dxn = t.grad_buffer(x).data() + n * d.cin * d.in_plane();
        ConstMatMap wm(wv.data().data(), d.cout, K);
        if (d.pointwise()) {
          MatMap(dxn, K, P).noalias() += wm.transpose() * gm;
        } else {
          MatMap(dcols.data(), K, P).noalias() = wm.transpose() * gm;
          detail::col2im(dcols.data(), d, dxn);
        }
      }
    }
  };
  if (bias) return x.tape->record(std::move(out), {x, weight, *bias}, std::move(adjoint));
  return x.tape->record(std::move(out), {x, weight}, std::move(adjoint));
}

/// Non-overlapping max pooling (stride == window). The gradient goes to
/// the first maximal element of each window in (t, h, w) scan order.
inline Var max_pool3d(Var x, Triple window) {
  const Tensor& xv = x.value();
  detail::require_rank5(xv, "max_pool3d");
  const auto N = xv.dim(0), C = xv.dim(1), T = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  if (window[0] == 0 || window[1] == 0 || window[2] == 0 || T % window[0] || H % window[1] ||
      W % window[2]) {
    throw ShapeError("max_pool3d window does not divide " + to_string(xv.shape()));
  }
  const auto ot = T / window[0], oh = H / window[1], ow = W / window[2];
  Tensor out = Tensor::zeros({N, C, ot, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* base = xv.data().data() + nc * T * H * W;
    for (std::size_t a = 0; a < ot; ++a)
      for (std::size_t b = 0; b < oh; ++b)
        for (std::size_t c = 0; c < ow; ++c, ++o) {
          std::size_t best = 0;
          double best_v = -std::numeric_limits<double>::infinity();
          bool first = true;
          for (std::size_t i = 0; i < window[0]; ++i)
            for (std::size_t j = 0; j < window[1]; ++j)
              for (std::size_t k = 0; k < window[2]; ++k) {
                const auto idx = ((a * window[0] + i) * H + (b * window[1] + j)) * W + c * window[2] + k;
                if (first || base[idx] > best_v) {
                  best_v = base[idx];
                  best = idx;
                  first = false;
                }
              }
          out[o] = best_v;
          argmax[o] = nc * T * H * W + best;
        }
  }
  return x.tape->record(std::move(out), {x},
                        [x, argmax = std::move(argmax)](Tape& t, const std::vector<double>& g) {
                          auto& gx = t.grad_buffer(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                        });
}

/// Nearest-neighbour upsampling by integer factors (block replication).
inline Var upsample_nearest3d(Var x, Triple factor) {
  const Tensor& xv = x.value();
  detail::require_rank5(xv, "upsample_nearest3d");
  if (factor[0] == 0 || factor[1] == 0 || factor[2] == 0) {
    throw ShapeError("upsample factors must be >= 1");
  }
  const auto N = xv.dim(0), C = xv.dim(1), T = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  const auto ot = T * factor[0], oh = H * factor[1], ow = W * factor[2];
  Tensor out = Tensor::zeros({N, C, ot, oh, ow});
  auto src_index = [=](std::size_t nc, std::size_t a, std::size_t b, std::size_t c) {
    return ((nc * T + a / factor[0]) * H + b / factor[1]) * W + c / factor[2];
  };
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t a = 0; a < ot; ++a)
      for (std::size_t b = 0; b < oh; ++b)
        for (std::size_t c = 0; c < ow; ++c, ++o) out[o] = xv[src_index(nc, a, b, c)];
  return x.tape->record(std::move(out), {x},
                        [x, N, C, ot, oh, ow, src_index](Tape& t, const std::vector<double>& g) {
                          auto& gx = t.grad_buffer(x);
                          std::size_t o = 0;
                          for (std::size_t nc = 0; nc < N * C; ++nc)
                            for (std::size_t a = 0; a < ot; ++a)
                              for (std::size_t b = 0; b < oh; ++b)
                                for (std::size_t c = 0; c < ow; ++c, ++o)
                                  gx[src_index(nc, a, b, c)] += g[o];
                        });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const std::vector<double>& g) {
    const Tensor& xv = x.value();
    auto& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalisation over (N, T, H, W) per channel.

enum class Mode { train, eval };

struct BnRunning {
  Tensor mean;
  Tensor var;

  static BnRunning init(std::size_t channels) {
    return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
  }
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

namespace detail {

inline Var batch_norm3d_impl(Var x, Var gamma, Var beta, const BnRunning& stats,
                             BnRunning* update, Mode mode) {
  const BnRunning& running = stats;
  const Tensor& xv = x.value();
  detail::require_rank5(xv, "batch_norm3d");
  const auto N = xv.dim(0), C = xv.dim(1);
  const auto plane = xv.dim(2) * xv.dim(3) * xv.dim(4);
  const auto M = N * plane;
  if (gamma.size() != C || beta.size() != C || running.mean.size() != C ||
      running.var.size() != C) {
    throw ShapeError("batch_norm3d parameters must have C=" + std::to_string(C) + " elements");
  }
  if (mode == Mode::train && M < 2) {
    throw StatError("train-mode batch norm needs at least 2 values per channel");
  }
  std::vector<double> mean(C), inv_std(C);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xv.data().data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = xv.data().data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + kBnEps);
      if (update) {
        update->mean[c] = (1.0 - kBnMomentum) * running.mean[c] + kBnMomentum * mu;
        update->var[c] = (1.0 - kBnMomentum) * running.var[c] +
                         kBnMomentum * var * static_cast<double>(M) / static_cast<double>(M - 1);
      }
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running.mean[c];
      inv_std[c] = 1.0 / std::sqrt(running.var[c] + kBnEps);
    }
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out = Tensor::zeros(xv.shape());
  std::vector<double> xhat(xv.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const auto off = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[off + i] = (xv[off + i] - mean[c]) * inv_std[c];
        out[off + i] = gv[c] * xhat[off + i] + bv[c];
      }
    }
  const bool batch_stats = mode == Mode::train;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, N, C, plane, M, batch_stats, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Tape& t, const std::vector<double>& g) {
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const auto off = (n * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g[c] += g[off + i];
              sum_gx[c] += g[off + i] * xhat[off + i];
            }
          }
        if (t.needs_grad(gamma)) {
          auto& gg = t.grad_buffer(gamma);
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (t.needs_grad(beta)) {
          auto& gb = t.grad_buffer(beta);
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (!t.needs_grad(x)) return;
        const Tensor& gv = gamma.value();
        auto& gx = t.grad_buffer(x);
        const double m = static_cast<double>(M);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const auto off = (n * C + c) * plane;
            const double scale = gv[c] * inv_std[c];
            if (batch_stats) {
              const double mg = sum_g[c] / m, mgx = sum_gx[c] / m;
              for (std::size_t i = 0; i < plane; ++i) {
                gx[off + i] += scale * (g[off + i] - mg - xhat[off + i] * mgx);
              }
            } else {
              for (std::size_t i = 0; i < plane; ++i) gx[off + i] += scale * g[off + i];
            }
          }
      });
}

}  // namespace detail

/// Train mode normalises by batch statistics and updates `running`
/// (unbiased variance, momentum 0.1). Eval mode uses `running` as is.
inline Var batch_norm3d(Var x, Var gamma, Var beta, BnRunning& running, Mode mode) {
  return detail::batch_norm3d_impl(x, gamma, beta, running, &running, mode);
}

/// Eval-mode normalisation with read-only running statistics.
inline Var batch_norm3d(Var x, Var gamma, Var beta, const BnRunning& running) {
  return detail::batch_norm3d_impl(x, gamma, beta, running, nullptr, Mode::eval);
}

// ---------------------------------------------------------------------------
// Classifier head.

/// x (N, D) * weight (K, D)^T + bias (K).
inline Var linear(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    throw ShapeError("linear: input " + to_string(xv.shape()) + " vs weight " + to_string(wv.shape()));
  }
  const auto N = xv.dim(0), D = xv.dim(1), K = wv.dim(0);
  if (bias.value().size() != K) throw ShapeError("linear bias must have K elements");
  Tensor out = Tensor::zeros({N, K});
  MatMap om(out.data().data(), N, K);
  om.noalias() = ConstMatMap(xv.data().data(), N, D) * ConstMatMap(wv.data().data(), K, D).transpose();
  const Tensor& bv = bias.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) om(n, k) += bv[k];
  return x.tape->record(std::move(out), {x, weight, bias},
                        [x, weight, bias, N, D, K](Tape& t, const std::vector<double>& g) {
                          ConstMatMap gm(g.data(), N, K);
                          if (t.needs_grad(x)) {
                            MatMap(t.grad_buffer(x).data(), N, D).noalias() +=
                                gm * ConstMatMap(weight.value().data().data(), K, D);
                          }
                          if (t.needs_grad(weight)) {
                            MatMap(t.grad_buffer(weight).data(), K, D).noalias() +=
                                gm.transpose() * ConstMatMap(x.value().data().data(), N, D);
                          }
                          if (t.needs_grad(bias)) {
                            auto& gb = t.grad_buffer(bias);
                            for (std::size_t n = 0; n < N; ++n) {
                              for (std::size_t k = 0; k < K; ++k) gb[k] += g[n * K + k];
                            }
                          }
                        });
}

/// Mean over (T, H, W): (N, C, T, H, W) -> (N, C).
inline Var global_avg_pool(Var x) {
  detail::require_rank5(x.value(), "global_avg_pool");
  return mean(x, {2, 3, 4});
}

enum class LossReduction { mean, sum };

/// Per-sample -log softmax(logits)[label], max-subtracted.
inline std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("logits must be (N, K)");
  const auto N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw LabelError("expected " + std::to_string(N) + " labels");
  std::vector<double> losses(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw LabelError("label " + std::to_string(labels[n]) + " outside [0," + std::to_string(K) + ")");
    }
    const double* row = logits.data().data() + n * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    losses[n] = std::log(z) + mx - row[labels[n]];
  }
  return losses;
}

inline Var softmax_cross_entropy(Var logits, std::span<const int> labels,
                                 LossReduction reduction = LossReduction::mean) {
  const Tensor& lv = logits.value();
  const auto losses = cross_entropy_per_sample(lv, labels);
  const auto N = lv.dim(0), K = lv.dim(1);
  double total = 0.0;
  for (double l : losses) total += l;
  const double scale = reduction == LossReduction::mean ? 1.0 / static_cast<double>(N) : 1.0;
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor::scalar(total * scale), {logits},
      [logits, y = std::move(y), N, K, scale](Tape& t, const std::vector<double>& g) {
        const Tensor& lv = logits.value();
        auto& gl = t.grad_buffer(logits);
        for (std::size_t n = 0; n < N; ++n) {
          const double* row = lv.data().data() + n * K;
          const double mx = *std::max_element(row, row + K);
          double z = 0.0;
          for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
          for (std::size_t k = 0; k < K; ++k) {
            const double p = std::exp(row[k] - mx) / z;
            gl[n * K + k] += g[0] * scale * (p - (static_cast<int>(k) == y[n] ? 1.0 : 0.0));
          }
        }
      });
}

}  // namespace oudefend
