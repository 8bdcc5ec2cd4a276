// Image buffer policy and statistics, config round-trip, checkpoint
// bit-exactness, resume equivalence, determinism of the training loop, and
// a short seed-pinned convergence run.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "debias/trainer.hpp"

using namespace debias;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("debias_trainer_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_config(uint64_t seed = 7) {
    TrainConfig cfg;
    cfg.gen.image_size = 16;
    cfg.gen.base_channels = 4;
    cfg.gen.n_residual_blocks = 1;
    cfg.disc.n_layers = 1;
    cfg.disc.base_channels = 4;
    cfg.ssim.window_size = 5;
    cfg.epochs = 1;
    cfg.seed = seed;
    cfg.buffer_capacity = 4;
    return cfg;
}

std::pair<DomainDataset, DomainDataset> tiny_pair(int n, int size) {
    RenderConfig rc;
    rc.image_size = size;
    auto base = render_digit_base(n, 77, rc);
    BiasSpec src;
    src.seed = 1;
    BiasSpec tgt;
    tgt.hue_shift = 90.0;
    tgt.seed = 2;
    auto [x, y] = synth_biased_pair(base, src, tgt);
    return {std::move(x), std::move(y)};
}

std::vector<float> all_params(TrainerState& st) {
    std::vector<float> out;
    auto grab = [&](const std::string&, Tensor& t) {
        out.insert(out.end(), t.data().begin(), t.data().end());
    };
    st.g1.visit_params(grab);
    st.g2.visit_params(grab);
    st.d1.visit_params(grab);
    st.d2.visit_params(grab);
    auto grab_buf = [&](const std::string&, std::vector<float>& v) {
        out.insert(out.end(), v.begin(), v.end());
    };
    st.g1.visit_buffers(grab_buf);
    st.g2.visit_buffers(grab_buf);
    st.d1.visit_buffers(grab_buf);
    st.d2.visit_buffers(grab_buf);
    return out;
}

}  // namespace

TEST_CASE("image buffer: first push returns the image and stores it") {
    ImageBuffer buf(50, RngState(1));
    auto img = Tensor::full({1, 3, 4, 4}, 9.0f);
    auto out = buf.push_sample(img);
    REQUIRE(buf.size() == 1);
    REQUIRE(out.data() == img.data());
}

TEST_CASE("image buffer: capacity invariant over 1000 pushes") {
    ImageBuffer buf(50, RngState(2));
    RngState rng(3);
    for (int i = 0; i < 1000; ++i) {
        auto img = Tensor::randn({1, 1, 2, 2}, rng);
        buf.push_sample(img);
        REQUIRE(buf.size() <= 50);
    }
    REQUIRE(buf.size() == 50);
}

TEST_CASE("image buffer: stale-return probability 0.5 +- 0.02 over 1e4 pushes") {
    ImageBuffer buf(50, RngState(5));
    RngState rng(6);
    for (int i = 0; i < 50; ++i) buf.push_sample(Tensor::full({1}, static_cast<float>(i)));
    int stale = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto img = Tensor::full({1}, static_cast<float>(1000 + i));
        auto out = buf.push_sample(img);
        if (out.data()[0] != img.data()[0]) ++stale;
    }
    const double p = static_cast<double>(stale) / n;
    REQUIRE(p == Approx(0.5).margin(0.02));
}

TEST_CASE("train config: serialize/parse round-trip and preset resolution") {
    auto cfg = desk_config();
    cfg.lambda = 12.5;
    cfg.seed = 99;
    cfg.ssim.window = SsimWindow::Uniform;
    auto back = parse_train_config_text(cfg.serialize());
    REQUIRE(back.hash() == cfg.hash());
    REQUIRE(back.lambda == 12.5);
    REQUIRE(back.seed == 99);
    REQUIRE(back.ssim.window == SsimWindow::Uniform);

    auto desk = resolve_config("desk");
    REQUIRE(desk.gen.image_size == 32);
    REQUIRE(desk.lambda == 10.0);
    REQUIRE(desk.lambda_ssim == 0.02);
    REQUIRE(desk.lr == 0.001);
    REQUIRE(desk.buffer_capacity == 50);
    auto paper = resolve_config("paper-256");
    REQUIRE(paper.gen.image_size == 256);
    REQUIRE(paper.gen.n_residual_blocks == 5);
    REQUIRE(paper.disc.receptive_field() == 70);
    REQUIRE(paper.epochs == 60);
    REQUIRE_THROWS_AS(resolve_config("no-such-preset"), ConfigError);
    REQUIRE_THROWS_AS(parse_train_config_text("bogus.key=1"), ConfigError);
}

TEST_CASE("checkpoint: save/load round-trip is bit-exact") {
    TempDir tmp("ckpt");
    auto cfg = tiny_config();
    auto st = init_trainer(cfg);
    auto [x, y] = tiny_pair(20, 16);
    for (int i = 0; i < 3; ++i) train_step(st, x, y);
    const auto dir = (tmp.path / "ck").string();
    save_checkpoint(dir, st);
    auto st2 = load_checkpoint(dir);
    auto a = all_params(st), b = all_params(st2);
    REQUIRE(a.size() == b.size());
    REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    REQUIRE(st2.step == st.step);
    REQUIRE(st2.rng.seed == st.rng.seed);
    REQUIRE(st2.rng.counter == st.rng.counter);
    REQUIRE(st2.buffer_x.size() == st.buffer_x.size());
    REQUIRE(st2.opt_g.step_count() == st.opt_g.step_count());

    // a second save of the loaded state produces identical files
    const auto dir2 = (tmp.path / "ck2").string();
    save_checkpoint(dir2, st2);
    auto read_file = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    REQUIRE(read_file(dir + "/params.bin") == read_file(dir2 + "/params.bin"));
    REQUIRE(read_file(dir + "/manifest.json") == read_file(dir2 + "/manifest.json"));
}

TEST_CASE("checkpoint: resume equivalence, k + k steps == 2k steps bit-exact") {
    TempDir tmp("resume");
    auto cfg = tiny_config(11);
    auto [x, y] = tiny_pair(20, 16);
    const int k = 4;

    auto straight = init_trainer(cfg);
    for (int i = 0; i < 2 * k; ++i) train_step(straight, x, y);

    auto first = init_trainer(cfg);
    for (int i = 0; i < k; ++i) train_step(first, x, y);
    const auto dir = (tmp.path / "ck").string();
    save_checkpoint(dir, first);
    auto resumed = load_checkpoint(dir);
    for (int i = 0; i < k; ++i) train_step(resumed, x, y);

    auto a = all_params(straight), b = all_params(resumed);
    REQUIRE(a.size() == b.size());
    REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    REQUIRE(straight.rng.counter == resumed.rng.counter);
}

TEST_CASE("trainer: epochs = 0 checkpoints the initialization") {
    TempDir tmp("zeroep");
    auto cfg = tiny_config(13);
    cfg.epochs = 0;
    auto [x, y] = tiny_pair(20, 16);
    auto res = train_augmenter(x, y, cfg, (tmp.path / "run").string());
    auto loaded = load_checkpoint(res.checkpoint_dir);
    auto fresh = init_trainer(cfg);
    auto a = all_params(loaded), b = all_params(fresh);
    REQUIRE(a == b);
    REQUIRE(loaded.step == 0);
}

TEST_CASE("trainer: two runs with the same seed produce bit-identical train logs") {
    TempDir tmp("det");
    auto cfg = tiny_config(17);
    auto [x, y] = tiny_pair(20, 16);
    auto r1 = train_augmenter(x, y, cfg, (tmp.path / "a").string());
    auto r2 = train_augmenter(x, y, cfg, (tmp.path / "b").string());
    auto read_file = [](const fs::path& p) {
        std::ifstream in(p);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    const auto log_a = read_file(tmp.path / "a" / "train_log.csv");
    const auto log_b = read_file(tmp.path / "b" / "train_log.csv");
    REQUIRE(!log_a.empty());
    REQUIRE(log_a == log_b);
    REQUIRE(log_a.substr(0, log_a.find('\n')) == "step,adv_g,adv_d1,adv_d2,cycle,ssim,total");
    // params identical too
    auto ck_a = load_checkpoint(r1.checkpoint_dir);
    auto ck_b = load_checkpoint(r2.checkpoint_dir);
    REQUIRE(all_params(ck_a) == all_params(ck_b));
}

TEST_CASE("trainer: empty dataset rejected") {
    auto cfg = tiny_config();
    DomainDataset empty;
    auto [x, y] = tiny_pair(20, 16);
    REQUIRE_THROWS_AS(train_augmenter(empty, y, cfg, "/tmp/never"), ConfigError);
    REQUIRE_THROWS_AS(train_augmenter(x, empty, cfg, "/tmp/never"), ConfigError);
}

TEST_CASE("trainer: high-lambda run halves the cycle error within 200 steps") {
    // seed-pinned training-run oracle on a trivial pair
    auto cfg = tiny_config(23);
    cfg.lambda = 100.0;
    cfg.lambda_ssim = 0.0;
    cfg.augment = false;
    auto [x, y] = tiny_pair(20, 16);
    auto st = init_trainer(cfg);
    double first10 = 0, last10 = 0;
    const int steps = 200;
    for (int i = 0; i < steps; ++i) {
        auto r = train_step(st, x, y);
        const double cyc = r.cycle / cfg.lambda;  // mean L1, lambda factored out
        if (i < 10) first10 += cyc;
        if (i >= steps - 10) last10 += cyc;
    }
    REQUIRE(last10 / first10 <= 0.5);
}

TEST_CASE("generate_intermediate: labels carried over, order kept, provenance written") {
    auto cfg = tiny_config(29);
    auto [x, y] = tiny_pair(20, 16);
    auto st = init_trainer(cfg);
    for (int i = 0; i < 2; ++i) train_step(st, x, y);
    std::map<std::string, double> ssim_by_id;
    auto z = generate_intermediate(st, x, &ssim_by_id);
    REQUIRE(z.size() == x.size());
    for (size_t i = 0; i < z.size(); ++i) {
        REQUIRE(z.images[i].label == x.images[i].label);
        REQUIRE(z.images[i].id == x.images[i].id);
        REQUIRE(z.provenance.at(z.images[i].id) == x.images[i].id);
        REQUIRE(ssim_by_id.count(z.images[i].id) == 1);
        for (auto v : z.images[i].pixels.data()) {
            REQUIRE(v > 0.0f);
            REQUIRE(v < 255.0f);
        }
    }
    // config mismatch: wrong image size
    auto [bigx, bigy] = tiny_pair(20, 32);
    REQUIRE_THROWS_AS(generate_intermediate(st, bigx), ConfigError);
}
