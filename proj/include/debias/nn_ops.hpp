#pragma once

// Structured differentiable ops: conv2d, conv_transpose2d, batch_norm2d,
// maxpool2d, linear, softmax cross-entropy, the symmetric-padded window
// filter used by SSIM, and the residual block.
//
// All kernels accumulate in a fixed order per output element, so results
// are bit-identical across runs and across OpenMP thread counts.

#include <cmath>
#include <cstdint>
#include <vector>

#include "debias/tensor.hpp"

namespace debias {

namespace detail {

// Convolutions are lowered onto an im2row buffer: one row of K = C*kh*kw
// gathered values per output position. All inner loops then run over
// contiguous spans, and every accumulation has a fixed order per build, so
// results are bit-identical across runs and OpenMP thread counts.

// row[n][k], n over Ho*Wo output positions, k = (c*kh + ky)*kw + kx.
template <typename Real>
void im2row(const Real* __restrict__ x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, Real* __restrict__ row) {
    const int K = C * kh * kw;
#pragma omp parallel for schedule(static)
    for (int n = 0; n < Ho * Wo; ++n) {
        const int oy = n / Wo, ox = n % Wo;
        Real* __restrict__ r = row + static_cast<int64_t>(n) * K;
        for (int c = 0; c < C; ++c) {
            const Real* __restrict__ plane = x + static_cast<int64_t>(c) * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                Real* __restrict__ rr = r + (c * kh + ky) * kw;
                if (iy < 0 || iy >= H) {
                    for (int kx = 0; kx < kw; ++kx) rr[kx] = Real(0);
                    continue;
                }
                const Real* __restrict__ irow = plane + static_cast<int64_t>(iy) * W;
                const int ix0 = ox * stride - pad;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ix0 + kx;
                    rr[kx] = (ix >= 0 && ix < W) ? irow[ix] : Real(0);
                }
            }
        }
    }
}

// Scatter-add the row buffer back into the image; inverse of im2row.
// Parallel over channels: each channel plane is owned by one thread.
template <typename Real>
void row2im_accum(const Real* __restrict__ row, int C, int H, int W, int kh, int kw, int stride,
                  int pad, int Ho, int Wo, Real* __restrict__ x) {
    const int K = C * kh * kw;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        Real* __restrict__ plane = x + static_cast<int64_t>(c) * H * W;
        for (int n = 0; n < Ho * Wo; ++n) {
            const int oy = n / Wo, ox = n % Wo;
            const Real* __restrict__ r = row + static_cast<int64_t>(n) * K + c * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                Real* __restrict__ irow = plane + static_cast<int64_t>(iy) * W;
                const int ix0 = ox * stride - pad;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix >= 0 && ix < W) irow[ix] += r[ky * kw + kx];
                }
            }
        }
    }
}

// out[m][n] =(+)= bias[m] + sum_k a[m][k] * b[n][k]
// Four b-rows per pass share each a-row load.
template <typename Real>
void dot_rows(const Real* __restrict__ a, const Real* __restrict__ b, const Real* bias, int M,
              int N, int K, Real* __restrict__ out, bool accumulate = false) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        const Real* __restrict__ ar = a + static_cast<int64_t>(m) * K;
        Real* __restrict__ orow = out + static_cast<int64_t>(m) * N;
        const Real b0 = bias ? bias[m] : Real(0);
        int n = 0;
        for (; n + 4 <= N; n += 4) {
            const Real* __restrict__ b0r = b + static_cast<int64_t>(n) * K;
            const Real* __restrict__ b1r = b0r + K;
            const Real* __restrict__ b2r = b1r + K;
            const Real* __restrict__ b3r = b2r + K;
            Real a0 = 0, a1 = 0, a2 = 0, a3 = 0;
#pragma omp simd reduction(+ : a0, a1, a2, a3)
            for (int k = 0; k < K; ++k) {
                const Real av = ar[k];
                a0 += av * b0r[k];
                a1 += av * b1r[k];
                a2 += av * b2r[k];
                a3 += av * b3r[k];
            }
            if (accumulate) {
                orow[n] += a0;
                orow[n + 1] += a1;
                orow[n + 2] += a2;
                orow[n + 3] += a3;
            } else {
                orow[n] = b0 + a0;
                orow[n + 1] = b0 + a1;
                orow[n + 2] = b0 + a2;
                orow[n + 3] = b0 + a3;
            }
        }
        for (; n < N; ++n) {
            const Real* __restrict__ br = b + static_cast<int64_t>(n) * K;
            Real acc = 0;
#pragma omp simd reduction(+ : acc)
            for (int k = 0; k < K; ++k) acc += ar[k] * br[k];
            orow[n] = (accumulate ? orow[n] : b0) + acc;
        }
    }
}

// dw[m][k] += sum_n g[m][n] * b[n][k]
// Four b-rows per pass share each dw-row load/store.
template <typename Real>
void accum_rows(const Real* __restrict__ g, const Real* __restrict__ b, int M, int N, int K,
                Real* __restrict__ dw) {
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
        const Real* __restrict__ grow = g + static_cast<int64_t>(m) * N;
        Real* __restrict__ wrow = dw + static_cast<int64_t>(m) * K;
        int n = 0;
        for (; n + 4 <= N; n += 4) {
            const Real g0 = grow[n], g1 = grow[n + 1], g2 = grow[n + 2], g3 = grow[n + 3];
            const Real* __restrict__ b0r = b + static_cast<int64_t>(n) * K;
            const Real* __restrict__ b1r = b0r + K;
            const Real* __restrict__ b2r = b1r + K;
            const Real* __restrict__ b3r = b2r + K;
#pragma omp simd
            for (int k = 0; k < K; ++k)
                wrow[k] += g0 * b0r[k] + g1 * b1r[k] + g2 * b2r[k] + g3 * b3r[k];
        }
        for (; n < N; ++n) {
            const Real gv = grow[n];
            const Real* __restrict__ br = b + static_cast<int64_t>(n) * K;
#pragma omp simd
            for (int k = 0; k < K; ++k) wrow[k] += gv * br[k];
        }
    }
}

// row[n][k] = sum_m g[m][n] * a[m][k]
// Four a-rows per pass share each row load/store.
template <typename Real>
void expand_rows(const Real* __restrict__ g, const Real* __restrict__ a, int M, int N, int K,
                 Real* __restrict__ row) {
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        Real* __restrict__ r = row + static_cast<int64_t>(n) * K;
        for (int k = 0; k < K; ++k) r[k] = Real(0);
        int m = 0;
        for (; m + 4 <= M; m += 4) {
            const Real g0 = g[static_cast<int64_t>(m) * N + n];
            const Real g1 = g[static_cast<int64_t>(m + 1) * N + n];
            const Real g2 = g[static_cast<int64_t>(m + 2) * N + n];
            const Real g3 = g[static_cast<int64_t>(m + 3) * N + n];
            const Real* __restrict__ a0r = a + static_cast<int64_t>(m) * K;
            const Real* __restrict__ a1r = a0r + K;
            const Real* __restrict__ a2r = a1r + K;
            const Real* __restrict__ a3r = a2r + K;
#pragma omp simd
            for (int k = 0; k < K; ++k)
                r[k] += g0 * a0r[k] + g1 * a1r[k] + g2 * a2r[k] + g3 * a3r[k];
        }
        for (; m < M; ++m) {
            const Real gv = g[static_cast<int64_t>(m) * N + n];
            const Real* __restrict__ ar = a + static_cast<int64_t>(m) * K;
#pragma omp simd
            for (int k = 0; k < K; ++k) r[k] += gv * ar[k];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: input [N,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout] (optional)
// ---------------------------------------------------------------------------
template <typename Real>
TensorT<Real> conv2d(TensorT<Real> input, TensorT<Real> weight, TensorT<Real> bias,
                     int stride, int padding) {
    if (input.ndim() != 4) throw ShapeError("conv2d: input must be 4-D, got " + shape_str(input.shape()));
    if (weight.ndim() != 4) throw ShapeError("conv2d: weight must be 4-D, got " + shape_str(weight.shape()));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != Ci)
        throw ShapeError("conv2d: weight in-channel dim " + std::to_string(weight.dim(1)) +
                         " != input channel dim " + std::to_string(Ci));
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + std::to_string(H + 2 * padding) + "x" +
                         std::to_string(W + 2 * padding));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co))
        throw ShapeError("conv2d: bias dim must be [" + std::to_string(Co) + "], got " +
                         shape_str(bias.shape()));
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;

    auto out = TensorT<Real>::zeros({N, Co, Ho, Wo});
    const int K = Ci * kh * kw;
    const int Npos = Ho * Wo;
    {
        std::vector<Real> row(static_cast<size_t>(Npos) * K);
        for (int n = 0; n < N; ++n) {
            detail::im2row(input.ptr() + static_cast<int64_t>(n) * Ci * H * W, Ci, H, W, kh, kw,
                           stride, padding, Ho, Wo, row.data());
            detail::dot_rows(weight.ptr(), row.data(), bias.defined() ? bias.ptr() : nullptr, Co,
                             Npos, K, out.ptr() + static_cast<int64_t>(n) * Co * Npos);
        }
    }

    record_op<Real>(
        "conv2d", {input, weight, bias}, out,
        [input, weight, bias, out, N, Ci, Co, H, W, Ho, Wo, kh, kw, stride, padding, K,
         Npos]() mutable {
            const auto& go = out.grad();
            std::vector<Real> row(static_cast<size_t>(Npos) * K);
            for (int n = 0; n < N; ++n) {
                const Real* gp = go.data() + static_cast<int64_t>(n) * Co * Npos;
                if (input.requires_grad()) {
                    detail::expand_rows(gp, weight.ptr(), Co, Npos, K, row.data());
                    detail::row2im_accum(row.data(), Ci, H, W, kh, kw, stride, padding, Ho, Wo,
                                         input.grad().data() + static_cast<int64_t>(n) * Ci * H * W);
                }
                if (weight.requires_grad()) {
                    detail::im2row(input.ptr() + static_cast<int64_t>(n) * Ci * H * W, Ci, H, W,
                                   kh, kw, stride, padding, Ho, Wo, row.data());
                    detail::accum_rows(gp, row.data(), Co, Npos, K, weight.grad().data());
                }
                if (bias.defined() && bias.requires_grad()) {
                    auto& gb = bias.grad();
                    for (int co = 0; co < Co; ++co) {
                        const Real* gplane = gp + static_cast<int64_t>(co) * Npos;
                        Real acc = 0;
                        for (int i = 0; i < Npos; ++i) acc += gplane[i];
                        gb[co] += acc;
                    }
                }
            }
        });
    return out;
}

template <typename Real>
TensorT<Real> conv2d(const TensorT<Real>& input, const TensorT<Real>& weight, int stride,
                     int padding) {
    return conv2d(input, weight, TensorT<Real>(), stride, padding);
}

// ---------------------------------------------------------------------------
// conv_transpose2d: input [N,Cin,H,W], weight [Cin,Cout,kH,kW], bias [Cout]
//
// Adjoint of conv2d with the same weight: <conv2d(a,w), b> == <a, conv_transpose2d(b,w)>.
// Output spatial size: (H-1)*stride - 2*padding + kH.
// ---------------------------------------------------------------------------
template <typename Real>
TensorT<Real> conv_transpose2d(TensorT<Real> input, TensorT<Real> weight,
                               TensorT<Real> bias, int stride, int padding) {
    if (input.ndim() != 4) throw ShapeError("conv_transpose2d: input must be 4-D, got " + shape_str(input.shape()));
    if (weight.ndim() != 4) throw ShapeError("conv_transpose2d: weight must be 4-D, got " + shape_str(weight.shape()));
    if (stride < 1) throw ConfigError("conv_transpose2d: stride must be >= 1");
    const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(0) != Ci)
        throw ShapeError("conv_transpose2d: weight dim 0 " + std::to_string(weight.dim(0)) +
                         " != input channel dim " + std::to_string(Ci));
    const int Ho = (H - 1) * stride - 2 * padding + kh;
    const int Wo = (W - 1) * stride - 2 * padding + kw;
    if (Ho <= 0 || Wo <= 0)
        throw ShapeError("conv_transpose2d: output size " + std::to_string(Ho) + "x" +
                         std::to_string(Wo) + " not positive");
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co))
        throw ShapeError("conv_transpose2d: bias dim must be [" + std::to_string(Co) + "], got " +
                         shape_str(bias.shape()));

    auto out = TensorT<Real>::zeros({N, Co, Ho, Wo});
    // K spans the output channels: k = (co*kh + ky)*kw + kx, matching the
    // [Cin, Cout, kh, kw] weight layout flattened per input channel.
    const int K = Co * kh * kw;
    const int Npos = H * W;  // input positions drive the scatter
    {
        std::vector<Real> row(static_cast<size_t>(Npos) * K);
        for (int n = 0; n < N; ++n) {
            Real* oplane = out.ptr() + static_cast<int64_t>(n) * Co * Ho * Wo;
            if (bias.defined()) {
                for (int co = 0; co < Co; ++co) {
                    const Real bv = bias.ptr()[co];
                    Real* p = oplane + static_cast<int64_t>(co) * Ho * Wo;
                    for (int i = 0; i < Ho * Wo; ++i) p[i] = bv;
                }
            }
            detail::expand_rows(input.ptr() + static_cast<int64_t>(n) * Ci * Npos, weight.ptr(),
                                Ci, Npos, K, row.data());
            detail::row2im_accum(row.data(), Co, Ho, Wo, kh, kw, stride, padding, H, W, oplane);
        }
    }

    record_op<Real>(
        "conv_transpose2d", {input, weight, bias}, out,
        [input, weight, bias, out, N, Ci, Co, H, W, Ho, Wo, kh, kw, stride, padding, K,
         Npos]() mutable {
            const auto& go = out.grad();
            std::vector<Real> row(static_cast<size_t>(Npos) * K);
            for (int n = 0; n < N; ++n) {
                const Real* gp = go.data() + static_cast<int64_t>(n) * Co * Ho * Wo;
                const bool need_row = input.requires_grad() || weight.requires_grad();
                if (need_row)
                    detail::im2row(gp, Co, Ho, Wo, kh, kw, stride, padding, H, W, row.data());
                if (input.requires_grad()) {
                    detail::dot_rows(weight.ptr(), row.data(), static_cast<const Real*>(nullptr),
                                     Ci, Npos, K,
                                     input.grad().data() + static_cast<int64_t>(n) * Ci * Npos,
                                     /*accumulate=*/true);
                }
                if (weight.requires_grad()) {
                    detail::accum_rows(input.ptr() + static_cast<int64_t>(n) * Ci * Npos,
                                       row.data(), Ci, Npos, K, weight.grad().data());
                }
                if (bias.defined() && bias.requires_grad()) {
                    auto& gb = bias.grad();
                    for (int co = 0; co < Co; ++co) {
                        const Real* gplane = gp + static_cast<int64_t>(co) * Ho * Wo;
                        Real acc = 0;
                        for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                        gb[co] += acc;
                    }
                }
            }
        });
    return out;
}

template <typename Real>
TensorT<Real> conv_transpose2d(const TensorT<Real>& input, const TensorT<Real>& weight, int stride,
                               int padding) {
    return conv_transpose2d(input, weight, TensorT<Real>(), stride, padding);
}

// ---------------------------------------------------------------------------
// batch_norm2d
// ---------------------------------------------------------------------------
template <typename Real>
struct BnStatsT {
    std::vector<Real> running_mean;
    std::vector<Real> running_var;

    static BnStatsT init(int channels) {
        BnStatsT s;
        s.running_mean.assign(static_cast<size_t>(channels), Real(0));
        s.running_var.assign(static_cast<size_t>(channels), Real(1));
        return s;
    }
};

enum class BnMode { Train, Eval };

inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEpsilon = 1e-5;

template <typename Real>
TensorT<Real> batch_norm2d(TensorT<Real> input, TensorT<Real> gamma,
                           TensorT<Real> beta, BnStatsT<Real>& stats, BnMode mode,
                           Real epsilon = Real(kBnEpsilon), Real momentum = Real(kBnMomentum)) {
    if (input.ndim() != 4) throw ShapeError("batch_norm2d: input must be 4-D, got " + shape_str(input.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("batch_norm2d: gamma/beta must have C=" + std::to_string(C) + " elements");
    if (static_cast<int>(stats.running_mean.size()) != C)
        throw ShapeError("batch_norm2d: running stats sized for " +
                         std::to_string(stats.running_mean.size()) + " channels, input has " +
                         std::to_string(C));
    if (!(epsilon > 0)) throw ConfigError("batch_norm2d: epsilon must be > 0");
    const int64_t m = static_cast<int64_t>(N) * H * W;
    if (mode == BnMode::Train && m == 1)
        throw NumericError("batch_norm2d: degenerate batch (N*H*W == 1) in train mode");

    std::vector<Real> mu(C), invstd(C);
    if (mode == BnMode::Train) {
        for (int c = 0; c < C; ++c) {
            Real s = 0;
            for (int n = 0; n < N; ++n) {
                const Real* plane = input.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) s += plane[i];
            }
            const Real mean_c = s / static_cast<Real>(m);
            Real v = 0;
            for (int n = 0; n < N; ++n) {
                const Real* plane = input.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
                for (int i = 0; i < H * W; ++i) {
                    const Real d = plane[i] - mean_c;
                    v += d * d;
                }
            }
            const Real var_c = v / static_cast<Real>(m);
            mu[c] = mean_c;
            invstd[c] = Real(1) / std::sqrt(var_c + epsilon);
            // unbiased variance feeds the running estimate
            const Real var_unbiased = m > 1 ? v / static_cast<Real>(m - 1) : var_c;
            stats.running_mean[c] = (Real(1) - momentum) * stats.running_mean[c] + momentum * mean_c;
            stats.running_var[c] = (Real(1) - momentum) * stats.running_var[c] + momentum * var_unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[c] = stats.running_mean[c];
            invstd[c] = Real(1) / std::sqrt(stats.running_var[c] + epsilon);
        }
    }

    auto out = TensorT<Real>::zeros(input.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* iplane = input.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            Real* oplane = out.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            const Real g = gamma.ptr()[c], b = beta.ptr()[c], m_c = mu[c], is_c = invstd[c];
            for (int i = 0; i < H * W; ++i) oplane[i] = g * (iplane[i] - m_c) * is_c + b;
        }

    const bool train = mode == BnMode::Train;
    record_op<Real>(
        "batch_norm2d", {input, gamma, beta}, out,
        [input, gamma, beta, out, mu, invstd, N, C, H, W, m, train]() mutable {
            const auto& go = out.grad();
            const int64_t plane_sz = static_cast<int64_t>(H) * W;
            for (int c = 0; c < C; ++c) {
                const Real g = gamma.ptr()[c], m_c = mu[c], is_c = invstd[c];
                // per-channel reductions
                Real sum_dy = 0, sum_dy_xhat = 0;
                for (int n = 0; n < N; ++n) {
                    const Real* gp = go.data() + (static_cast<int64_t>(n) * C + c) * plane_sz;
                    const Real* ip = input.ptr() + (static_cast<int64_t>(n) * C + c) * plane_sz;
                    for (int64_t i = 0; i < plane_sz; ++i) {
                        sum_dy += gp[i];
                        sum_dy_xhat += gp[i] * (ip[i] - m_c) * is_c;
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[c] += sum_dy_xhat;
                if (beta.requires_grad()) beta.grad()[c] += sum_dy;
                if (input.requires_grad()) {
                    auto& gi = input.grad();
                    const Real inv_m = Real(1) / static_cast<Real>(m);
                    for (int n = 0; n < N; ++n) {
                        const Real* gp = go.data() + (static_cast<int64_t>(n) * C + c) * plane_sz;
                        const Real* ip = input.ptr() + (static_cast<int64_t>(n) * C + c) * plane_sz;
                        Real* gip = gi.data() + (static_cast<int64_t>(n) * C + c) * plane_sz;
                        if (train) {
                            for (int64_t i = 0; i < plane_sz; ++i) {
                                const Real xhat = (ip[i] - m_c) * is_c;
                                gip[i] += g * is_c * (gp[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                            }
                        } else {
                            for (int64_t i = 0; i < plane_sz; ++i) gip[i] += g * is_c * gp[i];
                        }
                    }
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// maxpool2d (kernel == stride, the classifier's pooling)
// ---------------------------------------------------------------------------
template <typename Real>
TensorT<Real> maxpool2d(TensorT<Real> input, int k) {
    if (input.ndim() != 4) throw ShapeError("maxpool2d: input must be 4-D");
    if (k < 1) throw ConfigError("maxpool2d: kernel must be >= 1");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Ho = H / k, Wo = W / k;
    if (Ho == 0 || Wo == 0) throw ShapeError("maxpool2d: kernel larger than input");
    auto out = TensorT<Real>::zeros({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(out.numel()));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* ip = input.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            Real* op = out.ptr() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
            int32_t* am = argmax->data() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    Real best = ip[(oy * k) * W + ox * k];
                    int32_t bi = (oy * k) * W + ox * k;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) {
                            const int32_t idx = (oy * k + dy) * W + (ox * k + dx);
                            if (ip[idx] > best) {
                                best = ip[idx];
                                bi = idx;
                            }
                        }
                    op[oy * Wo + ox] = best;
                    am[oy * Wo + ox] = bi;
                }
        }
    record_op<Real>("maxpool2d", {input}, out, [input, out, argmax, N, C, Ho, Wo, H, W]() mutable {
        if (!input.requires_grad()) return;
        const auto& go = out.grad();
        auto& gi = input.grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const int64_t obase = (static_cast<int64_t>(n) * C + c) * Ho * Wo;
                const int64_t ibase = (static_cast<int64_t>(n) * C + c) * H * W;
                for (int i = 0; i < Ho * Wo; ++i)
                    gi[ibase + (*argmax)[obase + i]] += go[obase + i];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear: input [B,F], weight [O,F], bias [O] -> [B,O]
// ---------------------------------------------------------------------------
template <typename Real>
TensorT<Real> linear(TensorT<Real> input, TensorT<Real> weight, TensorT<Real> bias) {
    if (input.ndim() != 2 || weight.ndim() != 2)
        throw ShapeError("linear: input and weight must be 2-D");
    const int B = input.dim(0), F = input.dim(1), O = weight.dim(0);
    if (weight.dim(1) != F)
        throw ShapeError("linear: weight feature dim " + std::to_string(weight.dim(1)) +
                         " != input feature dim " + std::to_string(F));
    if (bias.defined() && bias.numel() != O) throw ShapeError("linear: bias size mismatch");
    auto out = TensorT<Real>::zeros({B, O});
    for (int b = 0; b < B; ++b) {
        const Real* xr = input.ptr() + static_cast<int64_t>(b) * F;
        Real* orow = out.ptr() + static_cast<int64_t>(b) * O;
        for (int o = 0; o < O; ++o) {
            const Real* wr = weight.ptr() + static_cast<int64_t>(o) * F;
            Real acc = bias.defined() ? bias.ptr()[o] : Real(0);
            for (int f = 0; f < F; ++f) acc += xr[f] * wr[f];
            orow[o] = acc;
        }
    }
    record_op<Real>("linear", {input, weight, bias}, out, [input, weight, bias, out, B, F, O]() mutable {
        const auto& go = out.grad();
        if (input.requires_grad()) {
            auto& gi = input.grad();
            for (int b = 0; b < B; ++b)
                for (int o = 0; o < O; ++o) {
                    const Real g = go[static_cast<int64_t>(b) * O + o];
                    const Real* wr = weight.ptr() + static_cast<int64_t>(o) * F;
                    Real* gr = gi.data() + static_cast<int64_t>(b) * F;
                    for (int f = 0; f < F; ++f) gr[f] += g * wr[f];
                }
        }
        if (weight.requires_grad()) {
            auto& gw = weight.grad();
            for (int b = 0; b < B; ++b)
                for (int o = 0; o < O; ++o) {
                    const Real g = go[static_cast<int64_t>(b) * O + o];
                    const Real* xr = input.ptr() + static_cast<int64_t>(b) * F;
                    Real* gr = gw.data() + static_cast<int64_t>(o) * F;
                    for (int f = 0; f < F; ++f) gr[f] += g * xr[f];
                }
        }
        if (bias.defined() && bias.requires_grad()) {
            auto& gb = bias.grad();
            for (int b = 0; b < B; ++b)
                for (int o = 0; o < O; ++o) gb[o] += go[static_cast<int64_t>(b) * O + o];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax cross-entropy, mean over the batch
// ---------------------------------------------------------------------------
template <typename Real>
TensorT<Real> softmax_cross_entropy(TensorT<Real> logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be [B,K]");
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw ShapeError("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(B));
    for (int b = 0; b < B; ++b)
        if (labels[b] < 0 || labels[b] >= K)
            throw NumericError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                               " out of range [0," + std::to_string(K) + ")");
    auto probs = std::make_shared<std::vector<Real>>(static_cast<size_t>(B) * K);
    Real loss = 0;
    for (int b = 0; b < B; ++b) {
        const Real* row = logits.ptr() + static_cast<int64_t>(b) * K;
        Real mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        Real se = 0;
        for (int k = 0; k < K; ++k) se += std::exp(row[k] - mx);
        const Real lse = std::log(se) + mx;
        for (int k = 0; k < K; ++k) (*probs)[static_cast<int64_t>(b) * K + k] = std::exp(row[k] - lse);
        loss += lse - row[labels[b]];
    }
    auto out = TensorT<Real>::scalar(loss / static_cast<Real>(B));
    record_op<Real>("softmax_cross_entropy", {logits}, out, [logits, out, probs, labels, B, K]() mutable {
        if (!logits.requires_grad()) return;
        const Real g = out.grad()[0] / static_cast<Real>(B);
        auto& gl = logits.grad();
        for (int b = 0; b < B; ++b) {
            for (int k = 0; k < K; ++k)
                gl[static_cast<int64_t>(b) * K + k] += g * (*probs)[static_cast<int64_t>(b) * K + k];
            gl[static_cast<int64_t>(b) * K + labels[b]] -= g;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Per-channel window filter with symmetric border padding; the SSIM
// building block. The window is a fixed (non-trainable) k x k weight set.
// ---------------------------------------------------------------------------
inline int mirror_index(int i, int n) {
    if (i < 0) return -i - 1;
    if (i >= n) return 2 * n - 1 - i;
    return i;
}

template <typename Real>
TensorT<Real> window_filter(TensorT<Real> input, const std::vector<Real>& window, int k) {
    if (input.ndim() != 4) throw ShapeError("window_filter: input must be 4-D");
    if (static_cast<int>(window.size()) != k * k)
        throw ShapeError("window_filter: window size mismatch");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (k > H || k > W)
        throw ShapeError("window_filter: window " + std::to_string(k) + " larger than image " +
                         std::to_string(H) + "x" + std::to_string(W));
    const int p = (k - 1) / 2;
    auto out = TensorT<Real>::zeros(input.shape());
    const auto win = std::make_shared<std::vector<Real>>(window);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* ip = input.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            Real* op = out.ptr() + (static_cast<int64_t>(n) * C + c) * H * W;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    Real acc = 0;
                    for (int ky = 0; ky < k; ++ky) {
                        const int sy = mirror_index(y + ky - p, H);
                        for (int kx = 0; kx < k; ++kx) {
                            const int sx = mirror_index(x + kx - p, W);
                            acc += (*win)[ky * k + kx] * ip[sy * W + sx];
                        }
                    }
                    op[y * W + x] = acc;
                }
        }
    record_op<Real>("window_filter", {input}, out, [input, out, win, k, p, N, C, H, W]() mutable {
        if (!input.requires_grad()) return;
        const auto& go = out.grad();
        auto& gi = input.grad();
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const Real* gp = go.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                Real* gip = gi.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const Real g = gp[y * W + x];
                        for (int ky = 0; ky < k; ++ky) {
                            const int sy = mirror_index(y + ky - p, H);
                            for (int kx = 0; kx < k; ++kx) {
                                const int sx = mirror_index(x + kx - p, W);
                                gip[sy * W + sx] += g * (*win)[ky * k + kx];
                            }
                        }
                    }
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layer parameter bundles and the residual block
// ---------------------------------------------------------------------------
template <typename Real>
struct ConvParamsT {
    TensorT<Real> w;
    TensorT<Real> b;
};

template <typename Real>
struct BnParamsT {
    TensorT<Real> gamma;
    TensorT<Real> beta;
    BnStatsT<Real> stats;
};

template <typename Real>
struct ResidualBlockParamsT {
    ConvParamsT<Real> conv1, conv2;
    BnParamsT<Real> bn1, bn2;
    int channels = 0;
};

// input + F(input), F = conv -> bn -> relu -> conv -> bn; shape preserved.
template <typename Real>
TensorT<Real> residual_block(const TensorT<Real>& input, ResidualBlockParamsT<Real>& params,
                             BnMode mode) {
    if (input.ndim() != 4 || input.dim(1) != params.channels)
        throw ShapeError("residual_block: input channels " +
                         std::to_string(input.ndim() == 4 ? input.dim(1) : -1) +
                         " != block channels " + std::to_string(params.channels));
    auto h = conv2d(input, params.conv1.w, params.conv1.b, 1, (params.conv1.w.dim(2) - 1) / 2);
    h = batch_norm2d(h, params.bn1.gamma, params.bn1.beta, params.bn1.stats, mode);
    h = relu(h);
    h = conv2d(h, params.conv2.w, params.conv2.b, 1, (params.conv2.w.dim(2) - 1) / 2);
    h = batch_norm2d(h, params.bn2.gamma, params.bn2.beta, params.bn2.stats, mode);
    return add(input, h);
}

}  // namespace debias
