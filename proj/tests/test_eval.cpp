// Classifier training sanity, retention audit fixtures, embedding
// properties, the t-SNE gradient check, and centroid-gap invariances.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "debias/eval.hpp"
#include "oracles.hpp"

using namespace debias;
using Catch::Approx;

namespace {

ClassifierConfig quick_clf(int n_classes = 10) {
    ClassifierConfig cfg;
    cfg.image_size = 16;
    cfg.base_channels = 4;
    cfg.hidden = 32;
    cfg.n_classes = n_classes;
    cfg.epochs = 5;
    cfg.augment = false;
    cfg.seed = 3;
    return cfg;
}

// Two linearly separable classes: bright-top vs bright-bottom images.
DomainDataset toy_two_class(int n, uint64_t seed, int size = 16) {
    DomainDataset ds;
    ds.name = "toy";
    ds.n_classes = 2;
    RngState rng(seed);
    for (int i = 0; i < n; ++i) {
        LabeledImage img;
        img.label = i % 2;
        img.id = "toy_" + std::to_string(i);
        img.pixels = Tensor::zeros({3, size, size});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const bool bright = img.label == 0 ? y < size / 2 : y >= size / 2;
                    img.pixels.data()[(c * size + y) * size + x] =
                        static_cast<float>((bright ? 200 : 40) + rng.uniform(-20, 20));
                }
        ds.images.push_back(std::move(img));
    }
    return ds;
}

}  // namespace

TEST_CASE("train_classifier: separable toy set above 95% within 5 epochs") {
    auto ds = toy_two_class(60, 5);
    auto cfg = quick_clf(2);
    auto clf = train_classifier(ds, cfg);
    REQUIRE(cross_accuracy(clf, ds) > 0.95);
}

TEST_CASE("train_classifier: deterministic under seed") {
    auto ds = toy_two_class(30, 7);
    auto cfg = quick_clf(2);
    auto c1 = train_classifier(ds, cfg);
    auto c2 = train_classifier(ds, cfg);
    bool identical = true;
    c1.visit_params([&](const std::string& name, Tensor& t) {
        c2.visit_params([&](const std::string& name2, Tensor& t2) {
            if (name == name2) identical = identical && t.data() == t2.data();
        });
    });
    REQUIRE(identical);
}

TEST_CASE("train_classifier: single-class dataset rejected") {
    DomainDataset ds = toy_two_class(20, 9);
    for (auto& img : ds.images) img.label = 0;
    REQUIRE_THROWS_AS(train_classifier(ds, quick_clf(2)), ConfigError);
    REQUIRE_THROWS_WITH(train_classifier(ds, quick_clf(2)),
                        Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("cross_accuracy: memorization bound and chance level") {
    auto ds = toy_two_class(40, 11);
    auto clf = train_classifier(ds, quick_clf(2));
    REQUIRE(cross_accuracy(clf, ds) >= 0.95);  // own training set

    // random-init classifier on 10 balanced classes is near chance
    RenderConfig rc;
    rc.image_size = 16;
    auto digits = render_digit_base(400, 13, rc);
    RngState rng(17);
    auto cfg = quick_clf(10);
    auto fresh = build_classifier(cfg, rng);
    const double acc = cross_accuracy(fresh, digits);
    REQUIRE(acc == Approx(0.1).margin(0.05));

    // class-space mismatch raises
    auto two = quick_clf(2);
    auto clf2 = train_classifier(toy_two_class(20, 19), two);
    REQUIRE_THROWS_AS(cross_accuracy(clf2, digits), ConfigError);
}

TEST_CASE("accuracy_trials: reports mean and stdev over 15 seeds, reproducibly") {
    auto train = toy_two_class(30, 21);
    auto test = toy_two_class(20, 23);
    auto cfg = quick_clf(2);
    cfg.epochs = 2;
    auto s1 = accuracy_trials(train, test, cfg, 5);
    auto s2 = accuracy_trials(train, test, cfg, 5);
    REQUIRE(s1.values.size() == 5);
    REQUIRE(s1.values == s2.values);  // bit-exact under the pinned seed list
    REQUIRE(s1.mean >= 0.0);
    REQUIRE(s1.stdev >= 0.0);
}

TEST_CASE("label_retention_audit: Z == X retains 100%") {
    RenderConfig rc;
    rc.image_size = 16;
    auto base = render_digit_base(60, 25, rc);
    ClassifierConfig ocfg = quick_clf(10);
    ocfg.epochs = 8;
    ocfg.augment = true;
    auto oracle = train_classifier(base, ocfg);

    DomainDataset z = base;
    z.name = "Z";
    for (const auto& img : base.images) z.provenance[img.id] = img.id;
    SsimConfig scfg;
    scfg.window_size = 5;
    auto report = label_retention_audit(base, z, AuditMode::GroundTruth, 0.3, &oracle, scfg);
    // oracle is imperfect; identical copies must still agree with it highly
    const double oracle_self_acc = cross_accuracy(oracle, base);
    REQUIRE(report.retention == Approx(oracle_self_acc).margin(1e-9));
    for (const auto& row : report.rows) REQUIRE(row.mean_ssim == Approx(1.0).margin(1e-5));

    // ssim_proxy mode: identical pairs are never suspect
    auto proxy = label_retention_audit(base, z, AuditMode::SsimProxy, 0.3, nullptr, scfg);
    REQUIRE(proxy.retention == 1.0);
}

TEST_CASE("label_retention_audit: permuted labels are detected") {
    RenderConfig rc;
    rc.image_size = 16;
    auto base = render_digit_base(100, 27, rc);
    ClassifierConfig ocfg = quick_clf(10);
    ocfg.epochs = 10;
    auto oracle = train_classifier(base, ocfg);
    DomainDataset z = base;
    for (const auto& img : base.images) z.provenance[img.id] = img.id;
    // adversarial fixture: shift every label by one class
    for (auto& img : z.images) img.label = (img.label + 1) % 10;
    SsimConfig scfg;
    scfg.window_size = 5;
    auto report = label_retention_audit(base, z, AuditMode::GroundTruth, 0.3, &oracle, scfg);
    REQUIRE(report.retention <= 2.0 / 10.0);
}

TEST_CASE("label_retention_audit: missing provenance raises") {
    auto base = render_digit_base(20, 29);
    DomainDataset z = base;  // no provenance map
    REQUIRE_THROWS_AS(label_retention_audit(base, z, AuditMode::SsimProxy), ConfigError);
}

TEST_CASE("tsne: objective gradient matches finite differences on a 10-point fixture") {
    RngState rng(31);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 10; ++i) {
        std::vector<double> p(4);
        for (auto& v : p) v = rng.uniform(-1, 1) + (i < 5 ? 2.0 : -2.0);
        pts.push_back(std::move(p));
    }
    auto p = tsne_detail::joint_probabilities(pts, 3.0);
    std::vector<double> y(20);
    for (auto& v : y) v = rng.uniform(-1, 1);
    auto grad = tsne_gradient(p, y, 10);
    double max_rel = 0;
    for (size_t k = 0; k < y.size(); ++k) {
        const double h = 1e-5;
        const double orig = y[k];
        y[k] = orig + h;
        const double f1 = tsne_objective(p, y, 10);
        y[k] = orig - h;
        const double f2 = tsne_objective(p, y, 10);
        y[k] = orig;
        const double numeric = (f1 - f2) / (2 * h);
        const double scale = std::max({std::abs(numeric), std::abs(grad[k]), 1e-8});
        max_rel = std::max(max_rel, std::abs(numeric - grad[k]) / scale);
    }
    REQUIRE(max_rel < 1e-3);
}

TEST_CASE("tsne: separates a two-cluster fixture") {
    RngState rng(33);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 30; ++i) {
        std::vector<double> p(8);
        for (auto& v : p) v = rng.normal() * 0.3 + (i < 15 ? 4.0 : -4.0);
        pts.push_back(std::move(p));
    }
    RngState embed_rng(35);
    auto y = tsne_embed(pts, embed_rng);
    double c1x = 0, c1y = 0, c2x = 0, c2y = 0;
    for (int i = 0; i < 15; ++i) {
        c1x += y[2 * i] / 15;
        c1y += y[2 * i + 1] / 15;
        c2x += y[2 * (i + 15)] / 15;
        c2y += y[2 * (i + 15) + 1] / 15;
    }
    const double inter = std::hypot(c1x - c2x, c1y - c2y);
    double intra = 0;
    for (int i = 0; i < 15; ++i) {
        intra += std::hypot(y[2 * i] - c1x, y[2 * i + 1] - c1y) / 30;
        intra += std::hypot(y[2 * (i + 15)] - c2x, y[2 * (i + 15) + 1] - c2y) / 30;
    }
    REQUIRE(inter > 3.0 * intra);
}

TEST_CASE("pca: first output dimension carries at least as much variance") {
    RngState rng(37);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 50; ++i) {
        const double t = rng.normal();
        pts.push_back({3.0 * t + 0.1 * rng.normal(), t + 0.1 * rng.normal(), 0.3 * rng.normal()});
    }
    auto y = pca_embed(pts);
    double v1 = 0, v2 = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        v1 += y[2 * i] * y[2 * i];
        v2 += y[2 * i + 1] * y[2 * i + 1];
    }
    REQUIRE(v1 >= v2);
}

TEST_CASE("embed_domains: identical domains give near-zero centroid gaps") {
    RenderConfig rc;
    rc.image_size = 16;
    auto base = render_digit_base(40, 39, rc);
    auto cfg = quick_clf(10);
    cfg.epochs = 3;
    auto clf = train_classifier(base, cfg);
    RngState rng(41);
    auto pts = embed_domains(clf, base, base, base, 20, EmbedMethod::Pca, rng);
    REQUIRE(pts.size() == 60);
    auto gap = centroid_gap(pts);
    double spread = 0;
    for (const auto& p : pts) spread += std::hypot(p.x, p.y) / static_cast<double>(pts.size());
    REQUIRE(gap.d_intermediate_target < 0.35 * std::max(spread, 1e-12));
    REQUIRE(gap.d_source_target < 0.35 * std::max(spread, 1e-12));

    REQUIRE_THROWS_AS(embed_domains(clf, base, base, base, 100, EmbedMethod::Pca, rng),
                      ConfigError);
}

TEST_CASE("centroid_gap: invariant to rotation and translation; missing tag raises") {
    RngState rng(43);
    std::vector<EmbeddingPoint> pts;
    for (int i = 0; i < 30; ++i) {
        EmbeddingPoint p;
        p.tag = static_cast<DomainTag>(i % 3);
        p.x = rng.uniform(-5, 5) + (i % 3 == 2 ? 10.0 : 0.0);
        p.y = rng.uniform(-5, 5);
        pts.push_back(p);
    }
    auto g0 = centroid_gap(pts);
    const double th = 0.83;
    auto moved = pts;
    for (auto& p : moved) {
        const double x = p.x * std::cos(th) - p.y * std::sin(th) + 7.0;
        const double y = p.x * std::sin(th) + p.y * std::cos(th) - 3.0;
        p.x = x;
        p.y = y;
    }
    auto g1 = centroid_gap(moved);
    REQUIRE(g1.d_source_target == Approx(g0.d_source_target).margin(1e-9));
    REQUIRE(g1.d_intermediate_target == Approx(g0.d_intermediate_target).margin(1e-9));

    std::vector<EmbeddingPoint> missing = {{DomainTag::Source, 0, 0}, {DomainTag::Target, 1, 1}};
    REQUIRE_THROWS_AS(centroid_gap(missing), ConfigError);
}

TEST_CASE("null pipeline: intermediate == source gives equal gaps within noise") {
    RenderConfig rc;
    rc.image_size = 16;
    auto base = render_digit_base(60, 45, rc);
    BiasSpec s1;
    s1.seed = 1;
    BiasSpec s2;
    s2.hue_shift = 120;
    s2.seed = 2;
    auto [x, y] = synth_biased_pair(base, s1, s2);
    auto cfg = quick_clf(10);
    cfg.epochs = 3;
    auto clf = train_classifier(x, cfg);
    RngState rng(47);
    auto pts = embed_domains(clf, x, x, y, 25, EmbedMethod::Pca, rng);
    auto gap = centroid_gap(pts);
    // same sample set for source and intermediate differs only by draw order
    REQUIRE(gap.d_intermediate_target ==
            Approx(gap.d_source_target).margin(0.35 * std::max(gap.d_source_target, 1e-9)));
}
