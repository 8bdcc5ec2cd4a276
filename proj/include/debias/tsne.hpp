#pragma once

// Exact (O(n^2)) t-SNE for small point sets, with the KL objective and its
// analytic gradient exposed separately so they can be cross-checked by
// finite differences.

#include <cmath>
#include <cstdint>
#include <vector>

#include "debias/tensor.hpp"

namespace debias {

struct TsneConfig {
    double perplexity = 30.0;
    int n_iter = 1000;
    double learning_rate = 100.0;
    double early_exaggeration = 4.0;
    int exaggeration_iters = 100;
    double momentum_start = 0.5;
    double momentum_final = 0.8;
    int momentum_switch_iter = 250;
};

namespace tsne_detail {

// Symmetrized input affinities from a perplexity-calibrated Gaussian per
// row; returns a flat n*n matrix with zero diagonal summing to 1.
inline std::vector<double> joint_probabilities(const std::vector<std::vector<double>>& x,
                                               double perplexity) {
    const size_t n = x.size();
    std::vector<double> d2(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double s = 0;
            for (size_t k = 0; k < x[i].size(); ++k) {
                const double d = x[i][k] - x[j][k];
                s += d * d;
            }
            d2[i * n + j] = d2[j * n + i] = s;
        }
    const double target_entropy = std::log(perplexity);
    std::vector<double> p(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double beta = 1.0, beta_lo = 0.0, beta_hi = 1e300;
        for (int it = 0; it < 64; ++it) {
            double sum = 0, h_num = 0;
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double e = std::exp(-d2[i * n + j] * beta);
                sum += e;
                h_num += beta * d2[i * n + j] * e;
            }
            if (sum <= 0) {
                beta /= 2;
                beta_hi = beta * 2;
                continue;
            }
            const double entropy = std::log(sum) + h_num / sum;
            if (std::abs(entropy - target_entropy) < 1e-7) break;
            if (entropy > target_entropy) {
                beta_lo = beta;
                beta = beta_hi >= 1e300 ? beta * 2 : (beta + beta_hi) / 2;
            } else {
                beta_hi = beta;
                beta = (beta + beta_lo) / 2;
            }
        }
        double sum = 0;
        for (size_t j = 0; j < n; ++j)
            if (j != i) sum += std::exp(-d2[i * n + j] * beta);
        for (size_t j = 0; j < n; ++j)
            if (j != i) p[i * n + j] = std::exp(-d2[i * n + j] * beta) / sum;
    }
    // symmetrize and normalize to a joint distribution
    std::vector<double> pj(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            pj[i * n + j] = (p[i * n + j] + p[j * n + i]) / (2.0 * static_cast<double>(n));
    for (auto& v : pj) v = std::max(v, 1e-12);
    for (size_t i = 0; i < n; ++i) pj[i * n + i] = 0.0;
    return pj;
}

// Student-t affinities of the embedding; also returns the normalizer.
inline std::vector<double> q_matrix(const std::vector<double>& y, size_t n, double& z_out) {
    std::vector<double> num(n * n, 0.0);
    double z = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double dx = y[2 * i] - y[2 * j];
            const double dy = y[2 * i + 1] - y[2 * j + 1];
            const double v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = num[j * n + i] = v;
            z += 2 * v;
        }
    z_out = std::max(z, 1e-12);
    return num;
}

}  // namespace tsne_detail

// KL(P || Q) for a flat 2-D embedding y (size 2n).
inline double tsne_objective(const std::vector<double>& p, const std::vector<double>& y, size_t n) {
    double z = 0;
    auto num = tsne_detail::q_matrix(y, n, z);
    double kl = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j || p[i * n + j] <= 0) continue;
            const double q = std::max(num[i * n + j] / z, 1e-12);
            kl += p[i * n + j] * std::log(p[i * n + j] / q);
        }
    return kl;
}

// dKL/dy: 4 * sum_j (p_ij - q_ij) (y_i - y_j) / (1 + ||y_i - y_j||^2).
inline std::vector<double> tsne_gradient(const std::vector<double>& p, const std::vector<double>& y,
                                         size_t n) {
    double z = 0;
    auto num = tsne_detail::q_matrix(y, n, z);
    std::vector<double> grad(2 * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double q = num[i * n + j] / z;
            const double mult = 4.0 * (p[i * n + j] - q) * num[i * n + j];
            grad[2 * i] += mult * (y[2 * i] - y[2 * j]);
            grad[2 * i + 1] += mult * (y[2 * i + 1] - y[2 * j + 1]);
        }
    return grad;
}

// Full run; returns the 2-D embedding flat (x0,y0,x1,y1,...).
inline std::vector<double> tsne_embed(const std::vector<std::vector<double>>& features,
                                      RngState& rng, TsneConfig cfg = {}) {
    const size_t n = features.size();
    if (n < 4) throw ConfigError("tsne: need at least 4 points");
    // perplexity must stay meaningful for tiny point sets
    cfg.perplexity = std::min(cfg.perplexity, (static_cast<double>(n) - 1) / 3.0);
    auto p = tsne_detail::joint_probabilities(features, cfg.perplexity);
    std::vector<double> y(2 * n);
    for (auto& v : y) v = rng.normal() * 1e-4;
    std::vector<double> vel(2 * n, 0.0), gains(2 * n, 1.0);
    auto p_run = p;
    for (auto& v : p_run) v *= cfg.early_exaggeration;
    for (int it = 0; it < cfg.n_iter; ++it) {
        if (it == cfg.exaggeration_iters) p_run = p;
        auto grad = tsne_gradient(p_run, y, n);
        const double momentum =
            it < cfg.momentum_switch_iter ? cfg.momentum_start : cfg.momentum_final;
        for (size_t k = 0; k < 2 * n; ++k) {
            gains[k] = (grad[k] > 0) == (vel[k] > 0) ? std::max(gains[k] * 0.8, 0.01)
                                                     : gains[k] + 0.2;
            vel[k] = momentum * vel[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += vel[k];
        }
        // recenter
        double mx = 0, my = 0;
        for (size_t i = 0; i < n; ++i) {
            mx += y[2 * i];
            my += y[2 * i + 1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }
    }
    return y;
}

// Top-2 principal components via power iteration with deflation; signs
// fixed so the first nonzero loading is positive.
inline std::vector<double> pca_embed(const std::vector<std::vector<double>>& features) {
    const size_t n = features.size();
    if (n < 2) throw ConfigError("pca: need at least 2 points");
    const size_t d = features[0].size();
    std::vector<double> mean(d, 0.0);
    for (const auto& f : features)
        for (size_t k = 0; k < d; ++k) mean[k] += f[k];
    for (auto& v : mean) v /= static_cast<double>(n);
    std::vector<std::vector<double>> centered(n, std::vector<double>(d));
    for (size_t i = 0; i < n; ++i)
        for (size_t k = 0; k < d; ++k) centered[i][k] = features[i][k] - mean[k];

    auto matvec = [&](const std::vector<double>& v) {
        // (X^T X / n) v without forming the covariance
        std::vector<double> xv(n, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t k = 0; k < d; ++k) xv[i] += centered[i][k] * v[k];
        std::vector<double> out(d, 0.0);
        for (size_t i = 0; i < n; ++i)
            for (size_t k = 0; k < d; ++k) out[k] += centered[i][k] * xv[i];
        for (auto& o : out) o /= static_cast<double>(n);
        return out;
    };
    std::vector<std::vector<double>> comps;
    for (int c = 0; c < 2; ++c) {
        std::vector<double> v(d, 0.0);
        v[static_cast<size_t>(c) % d] = 1.0;
        for (int it = 0; it < 300; ++it) {
            auto w = matvec(v);
            for (const auto& prev : comps) {
                double dot = 0;
                for (size_t k = 0; k < d; ++k) dot += w[k] * prev[k];
                for (size_t k = 0; k < d; ++k) w[k] -= dot * prev[k];
            }
            double norm = 0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-30) break;
            for (auto& x : w) x /= norm;
            v = w;
        }
        for (size_t k = 0; k < d; ++k)
            if (std::abs(v[k]) > 1e-12) {
                if (v[k] < 0)
                    for (auto& x : v) x = -x;
                break;
            }
        comps.push_back(v);
    }
    std::vector<double> y(2 * n);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 2; ++c) {
            double s = 0;
            for (size_t k = 0; k < d; ++k) s += centered[i][k] * comps[static_cast<size_t>(c)][k];
            y[2 * i + static_cast<size_t>(c)] = s;
        }
    return y;
}

}  // namespace debias
