#pragma once

// Differentiable per-pixel SSIM map and the label-retention loss
// lambda_ssim * mean(1 - SSIM). Windowed statistics use symmetric border
// padding; constants follow the standard SSIM reference values.

#include <cmath>
#include <utility>
#include <vector>

#include "debias/nn_ops.hpp"
#include "debias/tensor.hpp"

namespace debias {

enum class SsimWindow { Gaussian, Uniform };

struct SsimConfig {
    int window_size = 11;
    SsimWindow window = SsimWindow::Gaussian;
    double gaussian_sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;

    void validate() const {
        if (window_size <= 0 || window_size % 2 == 0)
            throw ConfigError("ssim: window_size must be odd and positive, got " +
                              std::to_string(window_size));
        if (!(gaussian_sigma > 0)) throw ConfigError("ssim: gaussian_sigma must be > 0");
        if (!(k1 > 0 && k1 < 1 && k2 > 0 && k2 < 1))
            throw ConfigError("ssim: k1, k2 must lie in (0,1)");
        if (!(dynamic_range > 0)) throw ConfigError("ssim: dynamic_range must be > 0");
    }
};

// Normalized window weights (sum exactly renormalized to 1).
template <typename Real>
std::vector<Real> ssim_window_weights(const SsimConfig& cfg) {
    cfg.validate();
    const int k = cfg.window_size;
    std::vector<Real> w(static_cast<size_t>(k) * k);
    if (cfg.window == SsimWindow::Uniform) {
        std::fill(w.begin(), w.end(), Real(1));
    } else {
        const double c = (k - 1) / 2.0;
        const double inv2s2 = 1.0 / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma);
        for (int y = 0; y < k; ++y)
            for (int x = 0; x < k; ++x)
                w[static_cast<size_t>(y) * k + x] =
                    static_cast<Real>(std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) * inv2s2));
    }
    Real s = 0;
    for (Real v : w) s += v;
    for (Real& v : w) v /= s;
    return w;
}

// Per-pixel SSIM in [-1, 1]; differentiable w.r.t. both inputs. The
// expression is built symmetrically in (a, b) so ssim_map(a,b) and
// ssim_map(b,a) are bitwise equal.
template <typename Real>
TensorT<Real> ssim_map(TensorT<Real> a, TensorT<Real> b, const SsimConfig& cfg) {
    check_same_shape("ssim_map", a, b);
    if (a.ndim() != 4) throw ShapeError("ssim_map: inputs must be [N,C,H,W]");
    cfg.validate();
    const int k = cfg.window_size;
    if (k > a.dim(2) || k > a.dim(3))
        throw ShapeError("ssim_map: window " + std::to_string(k) + " larger than image " +
                         std::to_string(a.dim(2)) + "x" + std::to_string(a.dim(3)));
    const auto win = ssim_window_weights<Real>(cfg);
    const Real c1 = static_cast<Real>(cfg.k1 * cfg.dynamic_range) *
                    static_cast<Real>(cfg.k1 * cfg.dynamic_range);
    const Real c2 = static_cast<Real>(cfg.k2 * cfg.dynamic_range) *
                    static_cast<Real>(cfg.k2 * cfg.dynamic_range);

    auto mu_a = window_filter(a, win, k);
    auto mu_b = window_filter(b, win, k);
    auto s_aa = window_filter(mul(a, a), win, k);
    auto s_bb = window_filter(mul(b, b), win, k);
    auto s_ab = window_filter(mul(a, b), win, k);

    auto mu_ab = mul(mu_a, mu_b);
    auto var_a = sub(s_aa, mul(mu_a, mu_a));
    auto var_b = sub(s_bb, mul(mu_b, mu_b));
    auto cov = sub(s_ab, mu_ab);

    auto num = mul(affine(mu_ab, Real(2), c1), affine(cov, Real(2), c2));
    auto den = mul(affine(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), Real(1), c1),
                   affine(add(var_a, var_b), Real(1), c2));
    return div(num, den);
}

// Eq. 3: lambda_ssim * mean over all pixels of (1 - SSIM(p)), summed over
// the given (x, g) pairs. Zero lambda disables the term entirely: the
// result is an exact constant 0 with no gradient.
template <typename Real>
TensorT<Real> ssim_loss(const std::vector<std::pair<TensorT<Real>, TensorT<Real>>>& pairs,
                        const SsimConfig& cfg, Real lambda_ssim) {
    if (pairs.empty()) throw ConfigError("ssim_loss: empty pair set");
    if (lambda_ssim < 0) throw ConfigError("ssim_loss: lambda_ssim must be >= 0");
    if (lambda_ssim == Real(0)) return TensorT<Real>::scalar(Real(0));
    for (size_t i = 1; i < pairs.size(); ++i) check_same_shape("ssim_loss", pairs[0].first, pairs[i].first);
    TensorT<Real> acc;
    int64_t total_pixels = 0;
    for (const auto& [x, g] : pairs) {
        check_same_shape("ssim_loss", x, g);
        auto one_minus = affine(ssim_map(x, g, cfg), Real(-1), Real(1));
        auto s = sum(one_minus);
        acc = acc.defined() ? add(acc, s) : s;
        total_pixels += x.numel();
    }
    return mul_scalar(acc, lambda_ssim / static_cast<Real>(total_pixels));
}

// Mean SSIM of one pair; the `debias ssim` CLI value.
template <typename Real>
Real mean_ssim(const TensorT<Real>& a, const TensorT<Real>& b, const SsimConfig& cfg) {
    auto m = ssim_map<Real>(a, b, cfg);
    Real s = 0;
    for (Real v : m.data()) s += v;
    return s / static_cast<Real>(m.numel());
}

}  // namespace debias
