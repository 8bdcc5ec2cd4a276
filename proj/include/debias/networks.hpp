#pragma once

// Generator (Johnson-style residual encoder/decoder ending in a scaled
// inverse-tangent output) and PatchGAN discriminator, configurable from
// desk scale up to the full 70x70-receptive-field stack.

#include <functional>
#include <string>
#include <vector>

#include "debias/nn_ops.hpp"
#include "debias/tensor.hpp"

namespace debias {

struct GeneratorConfig {
    int in_channels = 3;
    int base_channels = 16;
    int n_residual_blocks = 3;
    int n_down = 2;
    int image_size = 32;
    double pixel_max = 255.0;

    void validate() const {
        if (in_channels < 1) throw ConfigError("generator.in_channels must be >= 1");
        if (base_channels < 1) throw ConfigError("generator.base_channels must be >= 1");
        if (n_residual_blocks < 1) throw ConfigError("generator.n_residual_blocks must be >= 1");
        if (n_down < 1) throw ConfigError("generator.n_down must be >= 1");
        if (image_size < 1) throw ConfigError("generator.image_size must be >= 1");
        if (image_size % (1 << n_down) != 0)
            throw ConfigError("generator.image_size must be divisible by 2^n_down");
        if (!(pixel_max > 0)) throw ConfigError("generator.pixel_max must be > 0");
    }
};

struct DiscriminatorConfig {
    int in_channels = 3;
    int n_layers = 2;  // stride-2 stages; 3 reproduces the 70x70 PatchGAN
    int base_channels = 16;

    void validate() const {
        if (in_channels < 1) throw ConfigError("discriminator.in_channels must be >= 1");
        if (n_layers < 1) throw ConfigError("discriminator.n_layers must be >= 1");
        if (base_channels < 1) throw ConfigError("discriminator.base_channels must be >= 1");
    }

    // Closed-form recurrence over the layer stack, walked output-to-input:
    // rf = (rf - 1) * stride + kernel. Stack: n_layers stride-2 convs, one
    // stride-1 conv, one stride-1 output conv, all kernel 4.
    int receptive_field() const {
        int rf = 1;
        rf = (rf - 1) * 1 + 4;  // output conv
        rf = (rf - 1) * 1 + 4;  // penultimate conv
        for (int i = 0; i < n_layers; ++i) rf = (rf - 1) * 2 + 4;
        return rf;
    }
};

inline constexpr double kWeightInitStd = 0.02;
inline constexpr double kLeakySlope = 0.2;

namespace detail {

template <typename Real>
ConvParamsT<Real> init_conv(int out_ch, int in_ch, int k, RngState& rng,
                            double std_dev = kWeightInitStd) {
    ConvParamsT<Real> c;
    c.w = TensorT<Real>::randn({out_ch, in_ch, k, k}, rng, static_cast<Real>(std_dev), true);
    c.b = TensorT<Real>::zeros({out_ch}, true);
    return c;
}

// conv_transpose weight layout is [in_ch, out_ch, k, k]
template <typename Real>
ConvParamsT<Real> init_deconv(int in_ch, int out_ch, int k, RngState& rng,
                              double std_dev = kWeightInitStd) {
    ConvParamsT<Real> c;
    c.w = TensorT<Real>::randn({in_ch, out_ch, k, k}, rng, static_cast<Real>(std_dev), true);
    c.b = TensorT<Real>::zeros({out_ch}, true);
    return c;
}

template <typename Real>
BnParamsT<Real> init_bn(int ch) {
    return {TensorT<Real>::full({ch}, Real(1), true), TensorT<Real>::zeros({ch}, true),
            BnStatsT<Real>::init(ch)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------
template <typename Real>
struct GeneratorParamsT {
    GeneratorConfig cfg;
    ConvParamsT<Real> head;
    BnParamsT<Real> head_bn;
    std::vector<ConvParamsT<Real>> down;
    std::vector<BnParamsT<Real>> down_bn;
    std::vector<ResidualBlockParamsT<Real>> blocks;
    std::vector<ConvParamsT<Real>> up;
    std::vector<BnParamsT<Real>> up_bn;
    ConvParamsT<Real> out;

    // Fixed traversal order; checkpoints and optimizers rely on it.
    void visit_params(const std::function<void(const std::string&, TensorT<Real>&)>& fn) {
        auto conv = [&](const std::string& name, ConvParamsT<Real>& c) {
            fn(name + ".w", c.w);
            fn(name + ".b", c.b);
        };
        auto bn = [&](const std::string& name, BnParamsT<Real>& p) {
            fn(name + ".gamma", p.gamma);
            fn(name + ".beta", p.beta);
        };
        conv("head", head);
        bn("head_bn", head_bn);
        for (size_t i = 0; i < down.size(); ++i) {
            conv("down" + std::to_string(i), down[i]);
            bn("down" + std::to_string(i) + "_bn", down_bn[i]);
        }
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string b = "res" + std::to_string(i);
            conv(b + ".conv1", blocks[i].conv1);
            bn(b + ".bn1", blocks[i].bn1);
            conv(b + ".conv2", blocks[i].conv2);
            bn(b + ".bn2", blocks[i].bn2);
        }
        for (size_t i = 0; i < up.size(); ++i) {
            conv("up" + std::to_string(i), up[i]);
            bn("up" + std::to_string(i) + "_bn", up_bn[i]);
        }
        conv("out", out);
    }

    void visit_buffers(const std::function<void(const std::string&, std::vector<Real>&)>& fn) {
        auto bn = [&](const std::string& name, BnParamsT<Real>& p) {
            fn(name + ".running_mean", p.stats.running_mean);
            fn(name + ".running_var", p.stats.running_var);
        };
        bn("head_bn", head_bn);
        for (size_t i = 0; i < down.size(); ++i) bn("down" + std::to_string(i) + "_bn", down_bn[i]);
        for (size_t i = 0; i < blocks.size(); ++i) {
            bn("res" + std::to_string(i) + ".bn1", blocks[i].bn1);
            bn("res" + std::to_string(i) + ".bn2", blocks[i].bn2);
        }
        for (size_t i = 0; i < up.size(); ++i) bn("up" + std::to_string(i) + "_bn", up_bn[i]);
    }

    int64_t param_count() {
        int64_t n = 0;
        visit_params([&](const std::string&, TensorT<Real>& t) { n += t.numel(); });
        return n;
    }

    void set_requires_grad(bool rg) {
        visit_params([rg](const std::string&, TensorT<Real>& t) { t.set_requires_grad(rg); });
    }
};

template <typename Real>
GeneratorParamsT<Real> build_generator(const GeneratorConfig& cfg, RngState& rng) {
    cfg.validate();
    GeneratorParamsT<Real> g;
    g.cfg = cfg;
    int ch = cfg.base_channels;
    g.head = detail::init_conv<Real>(ch, cfg.in_channels, 7, rng);
    g.head_bn = detail::init_bn<Real>(ch);
    for (int i = 0; i < cfg.n_down; ++i) {
        g.down.push_back(detail::init_conv<Real>(ch * 2, ch, 3, rng));
        g.down_bn.push_back(detail::init_bn<Real>(ch * 2));
        ch *= 2;
    }
    for (int i = 0; i < cfg.n_residual_blocks; ++i) {
        ResidualBlockParamsT<Real> blk;
        blk.channels = ch;
        blk.conv1 = detail::init_conv<Real>(ch, ch, 3, rng);
        blk.bn1 = detail::init_bn<Real>(ch);
        blk.conv2 = detail::init_conv<Real>(ch, ch, 3, rng);
        blk.bn2 = detail::init_bn<Real>(ch);
        g.blocks.push_back(std::move(blk));
    }
    for (int i = 0; i < cfg.n_down; ++i) {
        // kernel 4 doubles the resolution exactly under stride 2, pad 1
        g.up.push_back(detail::init_deconv<Real>(ch, ch / 2, 4, rng));
        g.up_bn.push_back(detail::init_bn<Real>(ch / 2));
        ch /= 2;
    }
    g.out = detail::init_conv<Real>(cfg.in_channels, ch, 7, rng);
    return g;
}

// Pixel-scale in, pixel-scale out: inputs in [0, pixel_max] are mapped to
// [-1, 1] before the stack; the scaled atan maps back into (0, pixel_max).
template <typename Real>
TensorT<Real> generator_forward(GeneratorParamsT<Real>& p, TensorT<Real> batch, BnMode mode) {
    if (batch.ndim() != 4 || batch.dim(1) != p.cfg.in_channels)
        throw ShapeError("generator_forward: expected [N," + std::to_string(p.cfg.in_channels) +
                         ",H,W], got " + shape_str(batch.shape()));
    if (batch.dim(2) != p.cfg.image_size || batch.dim(3) != p.cfg.image_size)
        throw ShapeError("generator_forward: configured for " + std::to_string(p.cfg.image_size) +
                         "x" + std::to_string(p.cfg.image_size) + " images, got " +
                         shape_str(batch.shape()));
    const Real half = static_cast<Real>(p.cfg.pixel_max / 2);
    auto h = affine(batch, Real(1) / half, Real(-1));
    h = relu(batch_norm2d(conv2d(h, p.head.w, p.head.b, 1, 3), p.head_bn.gamma, p.head_bn.beta,
                          p.head_bn.stats, mode));
    for (size_t i = 0; i < p.down.size(); ++i)
        h = relu(batch_norm2d(conv2d(h, p.down[i].w, p.down[i].b, 2, 1), p.down_bn[i].gamma,
                              p.down_bn[i].beta, p.down_bn[i].stats, mode));
    for (auto& blk : p.blocks) h = residual_block(h, blk, mode);
    for (size_t i = 0; i < p.up.size(); ++i)
        h = relu(batch_norm2d(conv_transpose2d(h, p.up[i].w, p.up[i].b, 2, 1), p.up_bn[i].gamma,
                              p.up_bn[i].beta, p.up_bn[i].stats, mode));
    h = conv2d(h, p.out.w, p.out.b, 1, 3);
    return scaled_atan(h, static_cast<Real>(p.cfg.pixel_max));
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------
template <typename Real>
struct DiscriminatorParamsT {
    DiscriminatorConfig cfg;
    int receptive_field = 0;
    std::vector<ConvParamsT<Real>> convs;  // n_layers stride-2, then stride-1, then output
    std::vector<BnParamsT<Real>> bns;      // none for the first conv, none for the output
    double pixel_max = 255.0;

    void visit_params(const std::function<void(const std::string&, TensorT<Real>&)>& fn) {
        for (size_t i = 0; i < convs.size(); ++i) {
            fn("conv" + std::to_string(i) + ".w", convs[i].w);
            fn("conv" + std::to_string(i) + ".b", convs[i].b);
        }
        for (size_t i = 0; i < bns.size(); ++i) {
            fn("bn" + std::to_string(i + 1) + ".gamma", bns[i].gamma);
            fn("bn" + std::to_string(i + 1) + ".beta", bns[i].beta);
        }
    }

    void visit_buffers(const std::function<void(const std::string&, std::vector<Real>&)>& fn) {
        for (size_t i = 0; i < bns.size(); ++i) {
            fn("bn" + std::to_string(i + 1) + ".running_mean", bns[i].stats.running_mean);
            fn("bn" + std::to_string(i + 1) + ".running_var", bns[i].stats.running_var);
        }
    }

    int64_t param_count() {
        int64_t n = 0;
        visit_params([&](const std::string&, TensorT<Real>& t) { n += t.numel(); });
        return n;
    }

    void set_requires_grad(bool rg) {
        visit_params([rg](const std::string&, TensorT<Real>& t) { t.set_requires_grad(rg); });
    }
};

template <typename Real>
DiscriminatorParamsT<Real> build_discriminator(const DiscriminatorConfig& cfg, RngState& rng,
                                               double init_std = kWeightInitStd) {
    cfg.validate();
    DiscriminatorParamsT<Real> d;
    d.cfg = cfg;
    d.receptive_field = cfg.receptive_field();
    int ch = cfg.base_channels;
    d.convs.push_back(detail::init_conv<Real>(ch, cfg.in_channels, 4, rng, init_std));
    // first layer deliberately has no batch norm
    for (int i = 1; i < cfg.n_layers; ++i) {
        d.convs.push_back(detail::init_conv<Real>(ch * 2, ch, 4, rng, init_std));
        d.bns.push_back(detail::init_bn<Real>(ch * 2));
        ch *= 2;
    }
    d.convs.push_back(detail::init_conv<Real>(ch * 2, ch, 4, rng, init_std));
    d.bns.push_back(detail::init_bn<Real>(ch * 2));
    ch *= 2;
    d.convs.push_back(detail::init_conv<Real>(1, ch, 4, rng, init_std));
    return d;
}

// Patch logits; sigmoid of this is the probability grid.
template <typename Real>
TensorT<Real> discriminator_forward_logits(DiscriminatorParamsT<Real>& p, TensorT<Real> batch,
                                           BnMode mode) {
    if (batch.ndim() != 4 || batch.dim(1) != p.cfg.in_channels)
        throw ShapeError("discriminator_forward: expected [N," +
                         std::to_string(p.cfg.in_channels) + ",H,W], got " +
                         shape_str(batch.shape()));
    const Real half = static_cast<Real>(p.pixel_max / 2);
    auto h = affine(batch, Real(1) / half, Real(-1));
    size_t bn_idx = 0;
    for (size_t i = 0; i < p.convs.size(); ++i) {
        const bool last = i + 1 == p.convs.size();
        const int stride = i < static_cast<size_t>(p.cfg.n_layers) ? 2 : 1;
        h = conv2d(h, p.convs[i].w, p.convs[i].b, stride, 1);
        if (last) break;
        if (i > 0) {
            h = batch_norm2d(h, p.bns[bn_idx].gamma, p.bns[bn_idx].beta, p.bns[bn_idx].stats, mode);
            ++bn_idx;
        }
        h = leaky_relu(h, Real(kLeakySlope));
    }
    return h;
}

template <typename Real>
TensorT<Real> discriminator_forward(DiscriminatorParamsT<Real>& p, TensorT<Real> batch,
                                    BnMode mode) {
    return sigmoid(discriminator_forward_logits(p, batch, mode));
}

}  // namespace debias
