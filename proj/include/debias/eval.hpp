#pragma once

// Downstream evaluation: the two-conv-block classifier, cross-domain
// accuracy over repeated trials, the automated label-retention audit, and
// 2-D domain embeddings.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "debias/adam.hpp"
#include "debias/data.hpp"
#include "debias/nn_ops.hpp"
#include "debias/ssim.hpp"
#include "debias/tsne.hpp"

namespace debias {

struct ClassifierConfig {
    int image_size = 32;
    int base_channels = 8;
    int hidden = 64;
    int n_classes = 10;
    int epochs = 10;
    int batch_size = 32;
    double lr = 0.001;
    uint64_t seed = 0;
    bool augment = true;        // rotation/flip during training
    bool style_augment = false;  // random hue/noise/contrast/texture; the
                                 // audit oracle uses this to judge content
                                 // rather than style

    void validate() const {
        if (image_size < 8) throw ConfigError("classifier.image_size must be >= 8");
        if (image_size % 4 != 0) throw ConfigError("classifier.image_size must be divisible by 4");
        if (base_channels < 1 || hidden < 1) throw ConfigError("classifier channels must be >= 1");
        if (n_classes < 2) throw ConfigError("classifier.n_classes must be >= 2");
        if (epochs < 1) throw ConfigError("classifier.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("classifier.batch_size must be >= 1");
        if (!(lr > 0)) throw ConfigError("classifier.lr must be > 0");
    }
};

// Two conv blocks (conv + relu + maxpool stride 2) and a small fc head.
struct ClassifierParams {
    ClassifierConfig cfg;
    ConvParamsT<float> conv1, conv2;
    ConvParamsT<float> fc1, fc2;  // weights [O,F] stored in .w, bias in .b

    void visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
        fn("conv1.w", conv1.w);
        fn("conv1.b", conv1.b);
        fn("conv2.w", conv2.w);
        fn("conv2.b", conv2.b);
        fn("fc1.w", fc1.w);
        fn("fc1.b", fc1.b);
        fn("fc2.w", fc2.w);
        fn("fc2.b", fc2.b);
    }

    int feature_dim() const { return cfg.hidden; }
};

inline ClassifierParams build_classifier(const ClassifierConfig& cfg, RngState& rng) {
    cfg.validate();
    ClassifierParams p;
    p.cfg = cfg;
    const int c1 = cfg.base_channels, c2 = 2 * cfg.base_channels;
    const int flat = c2 * (cfg.image_size / 4) * (cfg.image_size / 4);
    p.conv1 = {Tensor::randn({c1, 3, 3, 3}, rng, 0.1f, true), Tensor::zeros({c1}, true)};
    p.conv2 = {Tensor::randn({c2, c1, 3, 3}, rng, 0.1f, true), Tensor::zeros({c2}, true)};
    const float s1 = 1.0f / std::sqrt(static_cast<float>(flat));
    const float s2 = 1.0f / std::sqrt(static_cast<float>(cfg.hidden));
    p.fc1 = {Tensor::randn({cfg.hidden, flat}, rng, s1, true), Tensor::zeros({cfg.hidden}, true)};
    p.fc2 = {Tensor::randn({cfg.n_classes, cfg.hidden}, rng, s2, true),
             Tensor::zeros({cfg.n_classes}, true)};
    return p;
}

// Logits, and optionally the penultimate (fc1, post-relu) features.
inline Tensor classifier_forward(ClassifierParams& p, Tensor batch, Tensor* features = nullptr) {
    if (batch.ndim() != 4 || batch.dim(1) != 3)
        throw ShapeError("classifier_forward: expected [N,3,H,W], got " + shape_str(batch.shape()));
    const float inv = 1.0f / 255.0f;
    auto h = affine(batch, inv, 0.0f);
    h = maxpool2d(relu(conv2d(h, p.conv1.w, p.conv1.b, 1, 1)), 2);
    h = maxpool2d(relu(conv2d(h, p.conv2.w, p.conv2.b, 1, 1)), 2);
    const int flat = h.dim(1) * h.dim(2) * h.dim(3);
    h = reshape(h, {h.dim(0), flat});
    auto feat = relu(linear(h, p.fc1.w, p.fc1.b));
    if (features) *features = feat;
    return linear(feat, p.fc2.w, p.fc2.b);
}

namespace detail {

inline BiasSpec random_style_spec(RngState& rng) {
    BiasSpec spec;
    spec.hue_shift = rng.uniform(-180.0, 180.0);
    spec.noise_sigma = rng.uniform(0.0, 20.0);
    spec.contrast = rng.uniform(0.7, 1.25);
    spec.background = static_cast<int>(rng.below(4));
    spec.seed = rng.next_u64();
    return spec;
}

}  // namespace detail

// Cross-entropy training with Adam; deterministic under cfg.seed.
inline ClassifierParams train_classifier(const DomainDataset& train, const ClassifierConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw ConfigError("train_classifier: empty dataset");
    std::map<int, int> classes;
    for (const auto& img : train.images) ++classes[img.label];
    if (classes.size() < 2)
        throw ConfigError("train_classifier: degenerate labels, only " +
                          std::to_string(classes.size()) + " class present");
    RngState init_rng(derive_seed(cfg.seed, "clf-init"));
    auto p = build_classifier(cfg, init_rng);
    std::vector<Tensor> params;
    p.visit_params([&](const std::string&, Tensor& t) { params.push_back(t); });
    AdamConfig ac;
    ac.lr = cfg.lr;
    Adam opt(params, ac);
    RngState order_rng(derive_seed(cfg.seed, "clf-order"));
    RngState aug_rng(derive_seed(cfg.seed, "clf-aug"));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        BatchStream stream(train, cfg.batch_size, RngState(order_rng.next_u64()));
        Batch batch;
        while (stream.next(batch)) {
            Tensor images = batch.images;
            if (cfg.augment || cfg.style_augment) {
                std::vector<Tensor> singles;
                for (int i = 0; i < images.dim(0); ++i) {
                    LabeledImage li;
                    li.pixels = Tensor::zeros({images.dim(1), images.dim(2), images.dim(3)});
                    const int64_t sz = li.pixels.numel();
                    std::copy(images.data().begin() + i * sz, images.data().begin() + (i + 1) * sz,
                              li.pixels.data().begin());
                    li.label = batch.labels[static_cast<size_t>(i)];
                    li.id = batch.ids[static_cast<size_t>(i)];
                    if (cfg.style_augment) li = apply_bias(li, detail::random_style_spec(aug_rng));
                    if (cfg.augment) li = preprocess(li, true, aug_rng, cfg.image_size);
                    singles.push_back(single_batch(li.pixels));
                }
                auto joined = Tensor::zeros(images.shape());
                const int64_t sz = singles[0].numel();
                for (size_t i = 0; i < singles.size(); ++i)
                    std::copy(singles[i].data().begin(), singles[i].data().end(),
                              joined.data().begin() + static_cast<int64_t>(i) * sz);
                images = joined;
            }
            Tape tape;
            Tape::Scope scope(tape);
            auto logits = classifier_forward(p, images);
            auto loss = softmax_cross_entropy(logits, batch.labels);
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
    }
    return p;
}

inline std::vector<int> classifier_predict(ClassifierParams& p, const DomainDataset& ds) {
    std::vector<int> out;
    const int bs = 64;
    for (size_t start = 0; start < ds.size(); start += bs) {
        const size_t take = std::min(static_cast<size_t>(bs), ds.size() - start);
        auto batch = Tensor::zeros({static_cast<int>(take), 3, p.cfg.image_size, p.cfg.image_size});
        for (size_t i = 0; i < take; ++i) {
            RngState unused;
            auto prep = preprocess(ds.images[start + i], false, unused, p.cfg.image_size);
            std::copy(prep.pixels.data().begin(), prep.pixels.data().end(),
                      batch.data().begin() + static_cast<int64_t>(i) * prep.pixels.numel());
        }
        auto logits = classifier_forward(p, batch);
        const int k = logits.dim(1);
        for (size_t i = 0; i < take; ++i) {
            const float* row = logits.ptr() + static_cast<int64_t>(i) * k;
            out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
        }
    }
    return out;
}

// Fraction of correct argmax predictions.
inline double cross_accuracy(ClassifierParams& clf, const DomainDataset& test) {
    if (test.empty()) throw ConfigError("cross_accuracy: empty test set");
    int max_label = 0;
    for (const auto& img : test.images) max_label = std::max(max_label, img.label);
    if (max_label >= clf.cfg.n_classes)
        throw ConfigError("cross_accuracy: test label " + std::to_string(max_label) +
                          " outside classifier's " + std::to_string(clf.cfg.n_classes) + " classes");
    auto preds = classifier_predict(clf, test);
    int correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        correct += preds[i] == test.images[i].label;
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

struct TrialStats {
    double mean = 0;
    double stdev = 0;
    std::vector<double> values;
};

// Repeats train+test varying the classifier-training seed; the protocol
// behind every reported accuracy.
inline TrialStats accuracy_trials(const DomainDataset& train, const DomainDataset& test,
                                  ClassifierConfig cfg, int n_trials) {
    TrialStats stats;
    for (int t = 0; t < n_trials; ++t) {
        ClassifierConfig trial_cfg = cfg;
        trial_cfg.seed = derive_seed(cfg.seed, static_cast<uint64_t>(t));
        auto clf = train_classifier(train, trial_cfg);
        stats.values.push_back(cross_accuracy(clf, test));
    }
    for (double v : stats.values) stats.mean += v;
    stats.mean /= static_cast<double>(stats.values.size());
    double var = 0;
    for (double v : stats.values) var += (v - stats.mean) * (v - stats.mean);
    stats.stdev = stats.values.size() > 1
                      ? std::sqrt(var / static_cast<double>(stats.values.size() - 1))
                      : 0.0;
    return stats;
}

// ---------------------------------------------------------------------------
// Label-retention audit
// ---------------------------------------------------------------------------
enum class AuditMode { GroundTruth, SsimProxy };

struct RetentionRow {
    std::string id;
    int carried_label = 0;
    int oracle_label = -1;  // -1 in ssim_proxy mode
    double mean_ssim = 0.0;
    bool suspect = false;
};

struct RetentionReport {
    double retention = 0.0;
    AuditMode mode = AuditMode::GroundTruth;
    std::vector<RetentionRow> rows;
};

// ground_truth: re-classify Z with the oracle; retention = agreement with
// carried labels. ssim_proxy: flag pairs whose mean SSIM to their source
// falls below the threshold.
inline RetentionReport label_retention_audit(const DomainDataset& X, const DomainDataset& Z,
                                             AuditMode mode, double threshold = 0.3,
                                             ClassifierParams* oracle = nullptr,
                                             const SsimConfig& ssim_cfg = {}) {
    if (X.size() != Z.size())
        throw ConfigError("label_retention_audit: |X| = " + std::to_string(X.size()) +
                          " but |Z| = " + std::to_string(Z.size()));
    std::map<std::string, const LabeledImage*> x_by_id;
    for (const auto& img : X.images) x_by_id[img.id] = &img;
    for (const auto& img : Z.images) {
        const auto prov = Z.provenance.find(img.id);
        if (prov == Z.provenance.end())
            throw ConfigError("label_retention_audit: missing provenance for " + img.id);
        if (!x_by_id.count(prov->second))
            throw ConfigError("label_retention_audit: provenance of " + img.id +
                              " names unknown source " + prov->second);
    }
    RetentionReport report;
    report.mode = mode;
    std::vector<int> oracle_labels;
    if (mode == AuditMode::GroundTruth) {
        if (!oracle) throw ConfigError("label_retention_audit: ground_truth mode needs an oracle");
        oracle_labels = classifier_predict(*oracle, Z);
    }
    int good = 0;
    for (size_t i = 0; i < Z.images.size(); ++i) {
        const auto& z = Z.images[i];
        const auto& x = *x_by_id.at(Z.provenance.at(z.id));
        RetentionRow row;
        row.id = z.id;
        row.carried_label = z.label;
        row.mean_ssim = static_cast<double>(
            mean_ssim<float>(single_batch(to_three_channels(x.pixels)),
                             single_batch(to_three_channels(z.pixels)), ssim_cfg));
        if (mode == AuditMode::GroundTruth) {
            row.oracle_label = oracle_labels[i];
            row.suspect = row.oracle_label != row.carried_label;
        } else {
            row.suspect = row.mean_ssim < threshold;
        }
        good += row.suspect ? 0 : 1;
        report.rows.push_back(std::move(row));
    }
    report.retention = static_cast<double>(good) / static_cast<double>(Z.size());
    return report;
}

// ---------------------------------------------------------------------------
// Domain embedding
// ---------------------------------------------------------------------------
enum class DomainTag { Source, Intermediate, Target };
enum class EmbedMethod { Pca, Tsne };

struct EmbeddingPoint {
    DomainTag tag;
    double x = 0, y = 0;
};

inline const char* domain_tag_name(DomainTag t) {
    switch (t) {
        case DomainTag::Source: return "source";
        case DomainTag::Intermediate: return "intermediate";
        default: return "target";
    }
}

// Penultimate-layer features for n_samples random images per domain,
// reduced to 2-D.
inline std::vector<EmbeddingPoint> embed_domains(ClassifierParams& clf, const DomainDataset& X,
                                                 const DomainDataset& Z, const DomainDataset& Y,
                                                 int n_samples, EmbedMethod method, RngState& rng) {
    for (const auto* ds : {&X, &Z, &Y})
        if (static_cast<int>(ds->size()) < n_samples)
            throw ConfigError("embed_domains: need " + std::to_string(n_samples) +
                              " samples per domain, " + ds->name + " has " +
                              std::to_string(ds->size()));
    std::vector<std::vector<double>> features;
    std::vector<DomainTag> tags;
    const DomainTag tag_of[3] = {DomainTag::Source, DomainTag::Intermediate, DomainTag::Target};
    const DomainDataset* domains[3] = {&X, &Z, &Y};
    for (int d = 0; d < 3; ++d) {
        // sample without replacement
        std::vector<size_t> idx(domains[d]->size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        for (int s = 0; s < n_samples; ++s) {
            RngState unused;
            auto prep = preprocess(domains[d]->images[idx[static_cast<size_t>(s)]], false, unused,
                                   clf.cfg.image_size);
            Tensor feat;
            classifier_forward(clf, single_batch(prep.pixels), &feat);
            features.emplace_back(feat.data().begin(), feat.data().end());
            tags.push_back(tag_of[d]);
        }
    }
    std::vector<double> coords;
    if (method == EmbedMethod::Pca) {
        coords = pca_embed(features);
    } else {
        coords = tsne_embed(features, rng);
    }
    std::vector<EmbeddingPoint> points;
    for (size_t i = 0; i < tags.size(); ++i)
        points.push_back({tags[i], coords[2 * i], coords[2 * i + 1]});
    return points;
}

struct CentroidGap {
    double d_source_target = 0;
    double d_intermediate_target = 0;
};

inline CentroidGap centroid_gap(const std::vector<EmbeddingPoint>& points) {
    double cx[3] = {0, 0, 0}, cy[3] = {0, 0, 0};
    int count[3] = {0, 0, 0};
    for (const auto& p : points) {
        const int t = static_cast<int>(p.tag);
        cx[t] += p.x;
        cy[t] += p.y;
        ++count[t];
    }
    for (int t = 0; t < 3; ++t) {
        if (count[t] == 0)
            throw ConfigError(std::string("centroid_gap: no points tagged ") +
                              domain_tag_name(static_cast<DomainTag>(t)));
        cx[t] /= count[t];
        cy[t] /= count[t];
    }
    auto dist = [&](int a, int b) {
        return std::sqrt((cx[a] - cx[b]) * (cx[a] - cx[b]) + (cy[a] - cy[b]) * (cy[a] - cy[b]));
    };
    const int s = static_cast<int>(DomainTag::Source);
    const int i = static_cast<int>(DomainTag::Intermediate);
    const int t = static_cast<int>(DomainTag::Target);
    return {dist(s, t), dist(i, t)};
}

}  // namespace debias
