// Network construction, shape preservation, receptive-field metadata vs
// the gradient-footprint probe, and the end-to-end Eq. 4 gradient check.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "debias/losses.hpp"
#include "debias/networks.hpp"
#include "oracles.hpp"

using namespace debias;
using Catch::Approx;
using DTensor = TensorT<double>;
using DTape = TapeT<double>;

namespace {

GeneratorConfig desk_gen() {
    GeneratorConfig cfg;
    cfg.image_size = 32;
    cfg.base_channels = 16;
    cfg.n_residual_blocks = 3;
    return cfg;
}

// Independent parameter-count formula, summed term by term.
int64_t expected_gen_params(const GeneratorConfig& c) {
    auto conv = [](int co, int ci, int k) { return int64_t(co) * ci * k * k + co; };
    int64_t n = 0;
    int ch = c.base_channels;
    n += conv(ch, c.in_channels, 7) + 2 * ch;
    for (int i = 0; i < c.n_down; ++i) {
        n += conv(ch * 2, ch, 3) + 2 * (ch * 2);
        ch *= 2;
    }
    n += c.n_residual_blocks * (2 * conv(ch, ch, 3) + 4 * ch);
    for (int i = 0; i < c.n_down; ++i) {
        n += int64_t(ch) * (ch / 2) * 16 + ch / 2 + 2 * (ch / 2);
        ch /= 2;
    }
    n += conv(c.in_channels, ch, 7);
    return n;
}

}  // namespace

TEST_CASE("build_generator: deterministic, correct parameter count, desk golden value") {
    RngState r1(5), r2(5);
    auto g1 = build_generator<float>(desk_gen(), r1);
    auto g2 = build_generator<float>(desk_gen(), r2);
    bool identical = true;
    g1.visit_params([&](const std::string& name, Tensor& t) {
        g2.visit_params([&](const std::string& name2, Tensor& t2) {
            if (name == name2)
                identical = identical &&
                            std::memcmp(t.ptr(), t2.ptr(), sizeof(float) * t.numel()) == 0;
        });
    });
    REQUIRE(identical);
    REQUIRE(g1.param_count() == expected_gen_params(desk_gen()));
    REQUIRE(g1.param_count() == 291523);  // desk preset regression value
}

TEST_CASE("build_generator: invalid config names the field") {
    GeneratorConfig cfg = desk_gen();
    cfg.image_size = 30;  // not divisible by 2^n_down
    RngState rng(1);
    REQUIRE_THROWS_AS(build_generator<float>(cfg, rng), ConfigError);
    REQUIRE_THROWS_WITH(build_generator<float>(cfg, rng),
                        Catch::Matchers::ContainsSubstring("image_size"));
    cfg = desk_gen();
    cfg.n_residual_blocks = 0;
    REQUIRE_THROWS_AS(build_generator<float>(cfg, rng), ConfigError);
}

TEST_CASE("generator: downsampled resolution matches the 256->64 ratio, scaled") {
    // 32 with two stride-2 stages bottoms out at 8x8, a factor of 4 like
    // the full-scale 256 -> 64
    GeneratorConfig cfg = desk_gen();
    REQUIRE(cfg.image_size / (1 << cfg.n_down) == 8);
}

TEST_CASE("generator_forward: output shape equals input shape, range inside (0, 255)") {
    RngState rng(7);
    for (int size : {16, 32}) {
        GeneratorConfig cfg = desk_gen();
        cfg.image_size = size;
        cfg.base_channels = 8;
        auto g = build_generator<float>(cfg, rng);
        auto x = Tensor::zeros({2, 3, size, size});
        for (auto& v : x.data()) v = static_cast<float>(rng.uniform(0, 255));
        auto y = generator_forward(g, x, BnMode::Train);
        REQUIRE(y.shape() == x.shape());
        for (auto v : y.data()) {
            REQUIRE(v > 0.0f);
            REQUIRE(v < 255.0f);
        }
    }
}

TEST_CASE("generator_forward: eval mode forward is bit-deterministic") {
    RngState rng(9);
    GeneratorConfig cfg = desk_gen();
    cfg.base_channels = 8;
    auto g = build_generator<float>(cfg, rng);
    auto x = Tensor::zeros({1, 3, 32, 32});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(0, 255));
    auto y1 = generator_forward(g, x, BnMode::Eval);
    auto y2 = generator_forward(g, x, BnMode::Eval);
    for (int64_t i = 0; i < y1.numel(); ++i) REQUIRE(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("generator_forward: rejects mismatched image size") {
    RngState rng(11);
    auto g = build_generator<float>(desk_gen(), rng);
    auto wrong = Tensor::zeros({1, 3, 16, 16});
    REQUIRE_THROWS_AS(generator_forward(g, wrong, BnMode::Eval), ShapeError);
}

TEST_CASE("discriminator: receptive field metadata, 70x70 at full scale") {
    DiscriminatorConfig full;
    full.n_layers = 3;
    full.base_channels = 64;
    REQUIRE(full.receptive_field() == 70);  // the PatchGAN figure

    DiscriminatorConfig desk;
    desk.n_layers = 2;
    REQUIRE(desk.receptive_field() == 34);
    DiscriminatorConfig one;
    one.n_layers = 1;
    REQUIRE(one.receptive_field() == 16);
}

TEST_CASE("discriminator: output grid values in (0,1); desk parameter count") {
    RngState rng(13);
    DiscriminatorConfig cfg;
    cfg.n_layers = 2;
    cfg.base_channels = 16;
    auto d = build_discriminator<float>(cfg, rng);
    REQUIRE(d.param_count() == 43057);  // desk preset regression value
    auto x = Tensor::zeros({1, 3, 32, 32});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(0, 255));
    auto p = discriminator_forward(d, x, BnMode::Train);
    REQUIRE(p.dim(1) == 1);
    REQUIRE(p.dim(2) == 6);  // 32 -> 16 -> 8 -> 7 -> 6
    for (auto v : p.data()) {
        REQUIRE(v > 0.0f);
        REQUIRE(v < 1.0f);
    }
}

namespace {

// Counts input rows whose perturbation reaches one interior patch logit.
int measured_receptive_field(int n_layers) {
    DiscriminatorConfig cfg;
    cfg.n_layers = n_layers;
    cfg.base_channels = 8;
    RngState rng(17);
    auto d = build_discriminator<double>(cfg, rng, 0.2);
    const int size = 96;
    auto x = DTensor::zeros({1, 3, size, size});
    for (auto& v : x.data()) v = rng.uniform(80, 175);
    auto base = discriminator_forward_logits(d, x, BnMode::Eval);
    const int gh = base.dim(2), gw = base.dim(3);
    const int cy = gh / 2, cx = gw / 2;
    const double ref = base.data()[cy * gw + cx];
    int changed = 0;
    bool contiguous = true;
    int first = -1, last = -1;
    for (int y = 0; y < size; ++y) {
        const int64_t idx = static_cast<int64_t>(y) * size + size / 2;  // channel 0 plane
        const double orig = x.data()[idx];
        x.data()[idx] = orig + 1.0;
        auto probe = discriminator_forward_logits(d, x, BnMode::Eval);
        x.data()[idx] = orig;
        if (probe.data()[cy * gw + cx] != ref) {
            ++changed;
            if (first < 0) first = y;
            last = y;
        }
    }
    contiguous = (last - first + 1) == changed;
    REQUIRE(contiguous);
    return changed;
}

}  // namespace

TEST_CASE("discriminator: gradient-footprint probe matches the closed form") {
    for (int n_layers : {1, 2}) {
        DiscriminatorConfig cfg;
        cfg.n_layers = n_layers;
        REQUIRE(measured_receptive_field(n_layers) == cfg.receptive_field());
    }
}

TEST_CASE("end-to-end: Eq. 4 gradient through both networks at 8x8") {
    RngState rng(23);
    GeneratorConfig gcfg;
    gcfg.image_size = 8;
    gcfg.base_channels = 4;
    gcfg.n_residual_blocks = 1;
    DiscriminatorConfig dcfg;
    dcfg.n_layers = 1;
    dcfg.base_channels = 4;
    auto g1 = build_generator<double>(gcfg, rng);
    auto g2 = build_generator<double>(gcfg, rng);
    auto d1 = build_discriminator<double>(dcfg, rng);
    auto d2 = build_discriminator<double>(dcfg, rng);
    auto x = DTensor::zeros({1, 3, 8, 8});
    auto y = DTensor::zeros({1, 3, 8, 8});
    for (auto& v : x.data()) v = rng.uniform(40, 215);
    for (auto& v : y.data()) v = rng.uniform(40, 215);
    SsimConfig scfg;
    scfg.window_size = 5;

    auto forward = [&]() {
        auto gp1 = g1;  // running stats isolated per evaluation
        auto gp2 = g2;
        auto dp1 = d1;
        auto dp2 = d2;
        auto fake_y = generator_forward(gp1, x, BnMode::Train);
        auto x_rec = generator_forward(gp2, fake_y, BnMode::Train);
        auto fake_x = generator_forward(gp2, y, BnMode::Train);
        auto y_rec = generator_forward(gp1, fake_x, BnMode::Train);
        ObjectiveInputs<double> in;
        in.d1_fake_g = discriminator_forward(dp1, fake_y, BnMode::Train);
        in.d2_fake_g = discriminator_forward(dp2, fake_x, BnMode::Train);
        in.d1_real = discriminator_forward(dp1, y, BnMode::Train);
        in.d1_fake = in.d1_fake_g;
        in.d2_real = discriminator_forward(dp2, x, BnMode::Train);
        in.d2_fake = in.d2_fake_g;
        const double inv = 1.0 / 255.0;
        in.x = affine(x, inv, 0.0);
        in.x_rec = affine(x_rec, inv, 0.0);
        in.y = affine(y, inv, 0.0);
        in.y_rec = affine(y_rec, inv, 0.0);
        in.ssim_pairs = {{x, fake_y}, {y, fake_x}};
        auto obj = total_objective(in, scfg, 10.0, 0.02);
        return obj.generator;
    };

    // h = 1e-5: the composed objective's curvature through the batch-norm
    // bottleneck makes 1e-3 steps truncation-dominated; FD converges to the
    // analytic value as h shrinks
    const double h = 1e-5;
    RngState pick(29);
    REQUIRE(oracle::grad_check_sample(g1.head.w, forward, 6, pick, h).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check_sample(g1.blocks[0].conv1.w, forward, 6, pick, h).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check_sample(g1.up[0].w, forward, 6, pick, h).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check_sample(g1.out.w, forward, 6, pick, h).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check_sample(g2.head.w, forward, 6, pick, h).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check_sample(d1.convs[0].w, forward, 6, pick, h).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check_sample(g1.head_bn.gamma, forward, 4, pick, h).max_rel_err < 1e-3);
}
