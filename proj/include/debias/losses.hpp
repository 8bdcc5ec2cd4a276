#pragma once

// Adversarial, cycle-consistency and total objectives.
//
// The printed adversarial equation in the source method is taken in its
// standard cross-entropy form: a perfect discriminator drives its loss to
// 0, and generators use the non-saturating -log D(G(x)) objective.

#include <utility>
#include <vector>

#include "debias/ssim.hpp"
#include "debias/tensor.hpp"

namespace debias {

inline constexpr double kProbEps = 1e-7;

// Per-iteration scalar summary; total is the generator-side objective.
struct LossReport {
    double adv_g = 0;
    double adv_d1 = 0;
    double adv_d2 = 0;
    double cycle = 0;
    double ssim = 0;
    double total = 0;

    double adv_d() const { return adv_d1 + adv_d2; }
};

// Clamp probabilities into [eps, 1-eps]. Values at exactly 0 or 1 would
// put log() out of domain; they are clamped and reported once per call.
template <typename Real>
TensorT<Real> clamp_prob(TensorT<Real> p) {
    const Real lo = Real(kProbEps), hi = Real(1) - Real(kProbEps);
    auto out = TensorT<Real>::zeros(p.shape());
    bool clamped = false;
    for (int64_t i = 0; i < p.numel(); ++i) {
        const Real v = p.ptr()[i];
        out.ptr()[i] = v < lo ? lo : (v > hi ? hi : v);
        clamped = clamped || (v <= Real(0) || v >= Real(1));
    }
    if (clamped) DEBIAS_DEBUG("clamp_prob: probabilities clamped into [%g, 1-%g]", kProbEps, kProbEps);
    record_op<Real>("clamp_prob", {p}, out, [p, out, lo, hi]() mutable {
        if (!p.requires_grad()) return;
        const auto& go = out.grad();
        auto& gp = p.grad();
        for (size_t i = 0; i < go.size(); ++i) {
            const Real v = p.ptr()[i];
            if (v > lo && v < hi) gp[i] += go[i];
        }
    });
    return out;
}

// -1/2 * mean[log D(real) + log(1 - D(fake))]; optimum 0 for a perfect
// discriminator, log 2 at chance.
template <typename Real>
TensorT<Real> discriminator_loss(TensorT<Real> d_real, TensorT<Real> d_fake) {
    auto lr = mean(log_(clamp_prob(d_real)));
    auto lf = mean(log_(clamp_prob(affine(d_fake, Real(-1), Real(1)))));
    return mul_scalar(add(lr, lf), Real(-0.5));
}

// Non-saturating generator objective: -mean[log D(fake)].
template <typename Real>
TensorT<Real> generator_adv_loss(TensorT<Real> d_fake) {
    return mul_scalar(mean(log_(clamp_prob(d_fake))), Real(-1));
}

// Saturating textbook form, kept for the gradient-comparison tests only.
template <typename Real>
TensorT<Real> generator_adv_loss_saturating(TensorT<Real> d_fake) {
    return mean(log_(clamp_prob(affine(d_fake, Real(-1), Real(1)))));
}

// lambda * (mean|x_rec - x| + mean|y_rec - y|). Zero lambda yields an
// exact constant 0 outside the graph.
template <typename Real>
TensorT<Real> cycle_loss(TensorT<Real> x, TensorT<Real> x_rec, TensorT<Real> y,
                         TensorT<Real> y_rec, Real lambda) {
    if (lambda < 0) throw ConfigError("cycle_loss: lambda must be >= 0");
    check_same_shape("cycle_loss", x, x_rec);
    check_same_shape("cycle_loss", y, y_rec);
    if (lambda == Real(0)) return TensorT<Real>::scalar(Real(0));
    auto l1x = mean(abs_(sub(x_rec, x)));
    auto l1y = mean(abs_(sub(y_rec, y)));
    return mul_scalar(add(l1x, l1y), lambda);
}

// Everything the Eq. 4 composition needs for one iteration. Cycle tensors
// are expected range-normalized (pixel / dynamic_range) by the caller;
// SSIM pairs stay at pixel scale.
template <typename Real>
struct ObjectiveInputs {
    TensorT<Real> d1_fake_g;  // D1(G1(x)), generator update path
    TensorT<Real> d2_fake_g;  // D2(G2(y))
    TensorT<Real> d1_real, d1_fake;  // D1(y), D1(buffered fake y)
    TensorT<Real> d2_real, d2_fake;  // D2(x), D2(buffered fake x)
    TensorT<Real> x, x_rec, y, y_rec;
    std::vector<std::pair<TensorT<Real>, TensorT<Real>>> ssim_pairs;  // P then Q
};

template <typename Real>
struct Objective {
    TensorT<Real> generator;  // scalar, owns adv_g + cycle + ssim
    TensorT<Real> d1, d2;     // scalar discriminator objectives
    LossReport report;
};

template <typename Real>
Objective<Real> total_objective(const ObjectiveInputs<Real>& in, const SsimConfig& ssim_cfg,
                                Real lambda, Real lambda_ssim) {
    Objective<Real> out;
    auto adv = add(generator_adv_loss(in.d1_fake_g), generator_adv_loss(in.d2_fake_g));
    auto cyc = cycle_loss(in.x, in.x_rec, in.y, in.y_rec, lambda);
    auto ssm = ssim_loss(in.ssim_pairs, ssim_cfg, lambda_ssim);
    auto total = add(adv, cyc);
    if (ssm.requires_grad() || ssm.item() != Real(0)) total = add(total, ssm);
    out.generator = total;
    out.d1 = discriminator_loss(in.d1_real, in.d1_fake);
    out.d2 = discriminator_loss(in.d2_real, in.d2_fake);
    out.report.adv_g = static_cast<double>(adv.item());
    out.report.cycle = static_cast<double>(cyc.item());
    out.report.ssim = static_cast<double>(ssm.item());
    out.report.total = static_cast<double>(out.generator.item());
    out.report.adv_d1 = static_cast<double>(out.d1.item());
    out.report.adv_d2 = static_cast<double>(out.d2.item());
    return out;
}

}  // namespace debias
