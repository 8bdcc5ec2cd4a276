// SSIM map vs the direct windowed-statistics oracle, symmetry and
// boundedness properties, loss semantics, gradients.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "debias/ssim.hpp"
#include "oracles.hpp"

using namespace debias;
using Catch::Approx;
using DTensor = TensorT<double>;
using DTape = TapeT<double>;

namespace {

DTensor random_image(Shape shape, RngState& rng, double lo = 0.0, double hi = 255.0) {
    auto t = DTensor::zeros(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

SsimConfig small_cfg(int window = 5) {
    SsimConfig cfg;
    cfg.window_size = window;
    return cfg;
}

}  // namespace

TEST_CASE("ssim window weights sum to 1") {
    for (auto kind : {SsimWindow::Gaussian, SsimWindow::Uniform}) {
        SsimConfig cfg;
        cfg.window = kind;
        auto w = ssim_window_weights<double>(cfg);
        double s = 0;
        for (auto v : w) s += v;
        REQUIRE(s == Approx(1.0).margin(1e-12));
        REQUIRE(w.size() == 121);
    }
}

TEST_CASE("ssim_map: identical images give the all-ones map") {
    RngState rng(101);
    auto a = random_image({1, 3, 16, 16}, rng);
    auto m = ssim_map(a, a, small_cfg());
    for (auto v : m.data()) REQUIRE(v == Approx(1.0).margin(1e-6));
}

TEST_CASE("ssim_map: matches the direct windowed-statistics oracle") {
    RngState rng(103);
    auto cfg = small_cfg(5);
    auto a = random_image({1, 2, 16, 16}, rng);
    auto b = random_image({1, 2, 16, 16}, rng);
    auto m = ssim_map(a, b, cfg);
    auto win = ssim_window_weights<double>(cfg);
    const double c1 = std::pow(cfg.k1 * cfg.dynamic_range, 2);
    const double c2 = std::pow(cfg.k2 * cfg.dynamic_range, 2);
    auto want = oracle::ssim_map_direct(a.data(), b.data(), 1, 2, 16, 16, win, 5, c1, c2);
    for (size_t i = 0; i < want.size(); ++i)
        REQUIRE(m.data()[i] == Approx(want[i]).margin(1e-5));
}

TEST_CASE("ssim_map: photographic negative has negative values where covariance flips") {
    // checkerboard centered at 127.5 has zero-mean windows; the negative
    // image then has strongly negative local covariance
    auto a = DTensor::zeros({1, 1, 12, 12});
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) a.data()[y * 12 + x] = ((x + y) % 2) ? 200.0 : 55.0;
    auto b = affine(a, -1.0, 255.0);  // dynamic_range - a
    auto m = ssim_map(a, b, small_cfg(5));
    int negatives = 0;
    for (auto v : m.data()) negatives += v < 0.0;
    REQUIRE(negatives == m.numel());  // covariance negative everywhere here
}

TEST_CASE("ssim_map: symmetry is exact and values stay in [-1, 1]") {
    RngState rng(107);
    auto a = random_image({2, 3, 14, 14}, rng);
    auto b = random_image({2, 3, 14, 14}, rng);
    auto mab = ssim_map(a, b, small_cfg());
    auto mba = ssim_map(b, a, small_cfg());
    for (int64_t i = 0; i < mab.numel(); ++i) REQUIRE(mab.data()[i] == mba.data()[i]);
    for (auto v : mab.data()) {
        REQUIRE(v <= 1.0 + 1e-6);
        REQUIRE(v >= -1.0 - 1e-6);
    }
}

TEST_CASE("ssim_map: shape and window errors") {
    auto a = DTensor::zeros({1, 1, 8, 8});
    auto b = DTensor::zeros({1, 1, 9, 9});
    REQUIRE_THROWS_AS(ssim_map(a, b, small_cfg()), ShapeError);
    auto c = DTensor::zeros({1, 1, 4, 4});
    REQUIRE_THROWS_AS(ssim_map(c, c, small_cfg(11)), ShapeError);
}

TEST_CASE("ssim_loss: identical pairs give exactly zero with zero gradient") {
    RngState rng(109);
    auto x = random_image({1, 1, 10, 10}, rng);
    x.set_requires_grad(true);
    DTape tape;
    DTape::Scope scope(tape);
    auto g = affine(x, 1.0, 0.0);  // same values, separate node
    auto loss = ssim_loss<double>({{x, g}}, small_cfg(), 0.02);
    REQUIRE(loss.item() == Approx(0.0).margin(1e-9));
    tape.backward(loss);
    for (auto gv : x.grad()) REQUIRE(std::abs(gv) < 1e-6);
}

TEST_CASE("ssim_loss: zero lambda disables the term with no gradient") {
    RngState rng(113);
    auto x = random_image({1, 1, 8, 8}, rng);
    auto g = random_image({1, 1, 8, 8}, rng);
    x.set_requires_grad(true);
    DTape tape;
    DTape::Scope scope(tape);
    auto loss = ssim_loss<double>({{x, g}}, small_cfg(), 0.0);
    REQUIRE(loss.item() == 0.0);
    REQUIRE_FALSE(loss.requires_grad());
    REQUIRE(tape.empty());  // nothing recorded at all
}

TEST_CASE("ssim_loss: paper weight 0.02 scales the mean dissimilarity") {
    RngState rng(127);
    auto x = random_image({1, 1, 12, 12}, rng);
    auto g = random_image({1, 1, 12, 12}, rng);
    auto cfg = small_cfg();
    auto m = ssim_map(x, g, cfg);
    double mean_map = 0;
    for (auto v : m.data()) mean_map += v;
    mean_map /= m.numel();
    auto loss = ssim_loss<double>({{x, g}}, cfg, 0.02);
    REQUIRE(loss.item() == Approx(0.02 * (1.0 - mean_map)).margin(1e-9));
    // a pair with mean SSIM 0.5 would therefore score 0.02 * 0.5 = 0.01
    REQUIRE(0.02 * (1.0 - 0.5) == Approx(0.01));
    // bound: loss in [0, 2*lambda]
    REQUIRE(loss.item() >= 0.0);
    REQUIRE(loss.item() <= 0.04);
}

TEST_CASE("ssim_loss: empty pair set rejected") {
    REQUIRE_THROWS_AS(ssim_loss<double>({}, small_cfg(), 0.02), ConfigError);
}

TEST_CASE("ssim_loss: gradient matches finite differences on 8x8 inputs") {
    RngState rng(131);
    auto x = random_image({1, 1, 8, 8}, rng, 40.0, 215.0);
    auto g = random_image({1, 1, 8, 8}, rng, 40.0, 215.0);
    x.set_requires_grad(true);
    g.set_requires_grad(true);
    auto cfg = small_cfg(5);
    auto fwd = [&]() { return ssim_loss<double>({{x, g}}, cfg, 1.0); };
    REQUIRE(oracle::grad_check(x, fwd).max_rel_err < 1e-3);
    REQUIRE(oracle::grad_check(g, fwd).max_rel_err < 1e-3);
}

TEST_CASE("ssim_loss: multiple pairs average over all pixels") {
    RngState rng(137);
    auto x1 = random_image({1, 1, 8, 8}, rng);
    auto x2 = random_image({1, 1, 8, 8}, rng);
    auto g1 = random_image({1, 1, 8, 8}, rng);
    auto cfg = small_cfg(5);
    auto both = ssim_loss<double>({{x1, g1}, {x2, x2}}, cfg, 1.0);
    auto first = ssim_loss<double>({{x1, g1}}, cfg, 1.0);
    // second pair is identical, so it contributes zero dissimilarity
    REQUIRE(both.item() == Approx(first.item() / 2.0).margin(1e-9));
}
