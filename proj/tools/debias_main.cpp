// debias: training-set debiasing pipeline in one binary.
//
// Subcommands: render, synth, train, generate, eval, audit, embed, ssim.
// Every command takes a --seed, writes its outputs plus a run_manifest.json
// and is bit-reproducible given identical inputs and seed (manifests differ
// only in timestamps).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "debias/config.hpp"
#include "debias/data.hpp"
#include "debias/eval.hpp"
#include "debias/ssim.hpp"
#include "debias/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace debias;

namespace {

constexpr const char* kVersion = "debias 0.1.0";

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

struct ManifestScope {
    json manifest;
    fs::path out_dir;

    ManifestScope(const std::string& command, const fs::path& dir, uint64_t seed,
                  uint64_t config_hash) : out_dir(dir) {
        manifest["command"] = command;
        manifest["version"] = kVersion;
        manifest["seed"] = seed;
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(config_hash));
        manifest["config_hash"] = hex;
        manifest["started_at"] = timestamp_utc();
    }

    void input(const std::string& key, const std::string& path) { manifest["inputs"][key] = path; }
    void output(const std::string& key, const std::string& path) { manifest["outputs"][key] = path; }

    void finish() {
        manifest["finished_at"] = timestamp_utc();
        fs::create_directories(out_dir);
        std::ofstream out(out_dir / "run_manifest.json");
        if (!out) throw IoError("cannot write " + (out_dir / "run_manifest.json").string());
        out << manifest.dump(2) << "\n";
    }
};

json stats_json(const TrialStats& s) {
    json j;
    j["mean"] = s.mean;
    j["stdev"] = s.stdev;
    j["values"] = s.values;
    return j;
}

int n_classes_of(const DomainDataset& ds) {
    int mx = 0;
    for (const auto& img : ds.images) mx = std::max(mx, img.label);
    return mx + 1;
}

// ---------------------------------------------------------------------------
int cmd_render(int n, int size, uint64_t seed, const std::string& out) {
    RenderConfig rc;
    rc.image_size = size;
    auto ds = render_digit_base(n, seed, rc);
    ManifestScope m("render", out, seed, fnv1a64(std::to_string(n) + ":" + std::to_string(size)));
    save_dataset(ds, out);
    m.output("dataset", out);
    m.finish();
    std::printf("rendered %d images (%dx%d) into %s\n", n, size, size, out.c_str());
    return 0;
}

int cmd_synth(const std::string& base_dir, const std::string& out, const std::string& source_bias,
              const std::string& target_bias, uint64_t seed, double test_fraction) {
    auto src_spec = BiasSpec::parse(source_bias);
    auto tgt_spec = BiasSpec::parse(target_bias);
    if (src_spec.seed == 0) src_spec.seed = derive_seed(seed, "source-bias");
    if (tgt_spec.seed == 0) tgt_spec.seed = derive_seed(seed, "target-bias");
    if (test_fraction < 0.0 || test_fraction >= 1.0)
        throw ConfigError("synth: --test-fraction must lie in [0, 1)");
    auto base = load_dataset(base_dir);
    auto [x, y] = synth_biased_pair(base, src_spec, tgt_spec);

    ManifestScope m("synth", out, seed, fnv1a64(src_spec.str() + "|" + tgt_spec.str()));
    m.input("base", base_dir);
    auto split_off = [&](DomainDataset& ds, const std::string& name) {
        DomainDataset test;
        test.name = name;
        test.n_classes = ds.n_classes;
        if (test_fraction > 0.0) {
            const auto keep = static_cast<size_t>(
                std::llround(static_cast<double>(ds.size()) * (1.0 - test_fraction)));
            for (size_t i = keep; i < ds.size(); ++i) {
                test.images.push_back(ds.images[i]);
                test.provenance[ds.images[i].id] = ds.provenance.at(ds.images[i].id);
            }
            ds.images.resize(keep);
        }
        return test;
    };
    auto x_test = split_off(x, "Xtest");
    auto y_test = split_off(y, "Ytest");
    save_dataset(x, (fs::path(out) / "X").string());
    save_dataset(y, (fs::path(out) / "Y").string());
    m.output("X", (fs::path(out) / "X").string());
    m.output("Y", (fs::path(out) / "Y").string());
    if (!x_test.empty()) {
        save_dataset(x_test, (fs::path(out) / "Xtest").string());
        save_dataset(y_test, (fs::path(out) / "Ytest").string());
        m.output("Xtest", (fs::path(out) / "Xtest").string());
        m.output("Ytest", (fs::path(out) / "Ytest").string());
    }
    m.finish();
    std::printf("synthesized X (%zu), Y (%zu)%s from %zu base images\n", x.size(), y.size(),
                test_fraction > 0 ? " plus held-out test splits" : "", base.size());
    return 0;
}

int cmd_train(const std::string& source, const std::string& target, const std::string& config,
              const std::string& out, uint64_t seed, int override_epochs) {
    TrainConfig cfg = resolve_config(config);
    cfg.seed = seed;
    if (override_epochs >= 0) cfg.epochs = override_epochs;
    cfg.validate();
    auto x = load_dataset(source);
    auto y = load_dataset(target);
    ManifestScope m("train", out, seed, cfg.hash());
    m.input("source", source);
    m.input("target", target);
    auto res = train_augmenter(x, y, cfg, out);
    m.output("checkpoint", res.checkpoint_dir);
    m.output("train_log", (fs::path(out) / "train_log.csv").string());
    m.finish();
    std::printf("trained %d epochs; checkpoint at %s\n", cfg.epochs, res.checkpoint_dir.c_str());
    return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& source, const std::string& out,
                 uint64_t seed) {
    auto st = load_checkpoint(checkpoint);
    auto x = load_dataset(source);
    ManifestScope m("generate", out, seed, st.cfg.hash());
    m.input("checkpoint", checkpoint);
    m.input("source", source);
    std::map<std::string, double> ssim_by_id;
    auto z = generate_intermediate(st, x, &ssim_by_id);
    save_dataset(z, out, &ssim_by_id);
    m.output("dataset", out);
    m.finish();
    double mean = 0;
    for (const auto& [id, v] : ssim_by_id) mean += v;
    std::printf("generated %zu images; mean SSIM to source %.4f\n", z.size(),
                ssim_by_id.empty() ? 0.0 : mean / static_cast<double>(ssim_by_id.size()));
    return 0;
}

int cmd_eval(const std::string& source, const std::string& debiased, const std::string& target,
             const std::string& test, const std::string& out, uint64_t seed, int trials,
             int epochs) {
    auto x = load_dataset(source);
    auto z = load_dataset(debiased);
    auto y = load_dataset(target);
    auto t = load_dataset(test);
    ClassifierConfig cfg;
    cfg.image_size = x.images.empty() ? 32 : x.images[0].pixels.dim(1);
    cfg.n_classes = std::max({n_classes_of(x), n_classes_of(z), n_classes_of(y), n_classes_of(t)});
    cfg.epochs = epochs;
    cfg.seed = seed;
    ManifestScope m("eval", out, seed, fnv1a64(std::to_string(trials) + ":" + std::to_string(epochs)));
    m.input("source", source);
    m.input("debiased", debiased);
    m.input("target", target);
    m.input("test", test);

    // Table-4-style rows: source only / our method / trained on target
    auto source_only = accuracy_trials(x, t, cfg, trials);
    auto our_method = accuracy_trials(z, t, cfg, trials);
    auto on_target = accuracy_trials(y, t, cfg, trials);
    json results;
    results["trials"] = trials;
    results["classifier_epochs"] = epochs;
    results["feature_dim"] = cfg.hidden;
    results["tasks"]["source_only"] = stats_json(source_only);
    results["tasks"]["debiased"] = stats_json(our_method);
    results["tasks"]["trained_on_target"] = stats_json(on_target);
    fs::create_directories(out);
    {
        std::ofstream f(fs::path(out) / "results.json");
        f << results.dump(2) << "\n";
    }
    m.output("results", (fs::path(out) / "results.json").string());
    m.finish();
    std::printf("source only        %.4f +- %.4f\n", source_only.mean, source_only.stdev);
    std::printf("our method         %.4f +- %.4f\n", our_method.mean, our_method.stdev);
    std::printf("trained on target  %.4f +- %.4f\n", on_target.mean, on_target.stdev);
    return 0;
}

int cmd_audit(const std::string& source, const std::string& generated, const std::string& mode,
              const std::string& base, double threshold, const std::string& out, uint64_t seed,
              int oracle_epochs) {
    auto x = load_dataset(source);
    auto z = load_dataset(generated);
    AuditMode audit_mode;
    if (mode == "ground_truth")
        audit_mode = AuditMode::GroundTruth;
    else if (mode == "ssim_proxy")
        audit_mode = AuditMode::SsimProxy;
    else
        throw ConfigError("audit: --mode must be ground_truth or ssim_proxy");
    ClassifierParams oracle;
    SsimConfig scfg;
    ManifestScope m("audit", out, seed, fnv1a64(mode));
    m.input("source", source);
    m.input("generated", generated);
    if (audit_mode == AuditMode::GroundTruth) {
        if (base.empty()) throw ConfigError("audit: ground_truth mode needs --base");
        auto base_ds = load_dataset(base);
        ClassifierConfig ocfg;
        ocfg.image_size = base_ds.images[0].pixels.dim(1);
        ocfg.n_classes = n_classes_of(base_ds);
        ocfg.epochs = oracle_epochs;
        ocfg.seed = derive_seed(seed, "oracle");
        ocfg.augment = true;
        ocfg.style_augment = true;  // judge content, not styling
        oracle = train_classifier(base_ds, ocfg);
        m.input("base", base);
    }
    auto report = label_retention_audit(x, z, audit_mode, threshold,
                                        audit_mode == AuditMode::GroundTruth ? &oracle : nullptr,
                                        scfg);
    fs::create_directories(out);
    {
        std::ofstream f(fs::path(out) / "retention.csv");
        f << "id,carried_label,oracle_label,mean_ssim,suspect\n";
        for (const auto& row : report.rows) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.6f,%d\n", row.id.c_str(),
                          row.carried_label, row.oracle_label, row.mean_ssim, row.suspect ? 1 : 0);
            f << buf;
        }
    }
    m.output("retention", (fs::path(out) / "retention.csv").string());
    m.manifest["retention"] = report.retention;
    m.finish();
    std::printf("retention %.4f (%s mode, %zu pairs)\n", report.retention, mode.c_str(),
                report.rows.size());
    return 0;
}

int cmd_embed(const std::string& source, const std::string& intermediate, const std::string& target,
              const std::string& train_on, const std::string& method_name, int samples,
              const std::string& out, uint64_t seed, int epochs) {
    auto x = load_dataset(source);
    auto z = load_dataset(intermediate);
    auto y = load_dataset(target);
    EmbedMethod method;
    if (method_name == "pca")
        method = EmbedMethod::Pca;
    else if (method_name == "tsne")
        method = EmbedMethod::Tsne;
    else
        throw ConfigError("embed: --method must be pca or tsne");
    const std::string feat_dir = train_on.empty() ? source : train_on;
    auto feat_ds = load_dataset(feat_dir);
    ClassifierConfig cfg;
    cfg.image_size = feat_ds.images[0].pixels.dim(1);
    cfg.n_classes = n_classes_of(feat_ds);
    cfg.epochs = epochs;
    cfg.seed = derive_seed(seed, "embed-clf");
    auto clf = train_classifier(feat_ds, cfg);

    ManifestScope m("embed", out, seed, fnv1a64(method_name + ":" + std::to_string(samples)));
    m.input("source", source);
    m.input("intermediate", intermediate);
    m.input("target", target);
    m.input("features_trained_on", feat_dir);
    RngState rng(derive_seed(seed, "embed"));
    auto points = embed_domains(clf, x, z, y, samples, method, rng);
    auto gap = centroid_gap(points);
    fs::create_directories(out);
    {
        std::ofstream f(fs::path(out) / "embedding.csv");
        f << "domain,x,y\n";
        for (const auto& p : points) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%s,%.8g,%.8g\n", domain_tag_name(p.tag), p.x, p.y);
            f << buf;
        }
    }
    m.output("embedding", (fs::path(out) / "embedding.csv").string());
    m.manifest["feature_dim"] = clf.feature_dim();
    m.manifest["d_source_target"] = gap.d_source_target;
    m.manifest["d_intermediate_target"] = gap.d_intermediate_target;
    m.finish();
    std::printf("d(source, target)       %.4f\n", gap.d_source_target);
    std::printf("d(intermediate, target) %.4f\n", gap.d_intermediate_target);
    return 0;
}

int cmd_ssim(const std::string& a_path, const std::string& b_path, int window) {
    SsimConfig cfg;
    cfg.window_size = window;
    auto a = read_ppm(a_path);
    auto b = read_ppm(b_path);
    const double v = mean_ssim<float>(single_batch(a), single_batch(b), cfg);
    std::printf("%.6f\n", v);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GAN-based training-set debiasing pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    uint64_t seed = 0;
    int workers = 0;
    app.add_option("--workers", workers, "worker lanes for data/compute kernels (0 = default)");

    auto* render = app.add_subcommand("render", "render the synthetic digit base set");
    int render_n = 1000, render_size = 32;
    std::string render_out;
    render->add_option("--n", render_n, "number of images");
    render->add_option("--size", render_size, "image side length");
    render->add_option("--out", render_out, "output dataset directory")->required();
    render->add_option("--seed", seed, "rng seed");

    auto* synth = app.add_subcommand("synth", "synthesize a biased source/target domain pair");
    std::string synth_base, synth_out, synth_src = "hue=0", synth_tgt = "hue=60";
    double test_fraction = 0.0;
    synth->add_option("--base", synth_base, "base dataset directory")->required();
    synth->add_option("--out", synth_out, "output directory (X/, Y/)")->required();
    synth->add_option("--source-bias", synth_src, "source bias spec, e.g. hue=-90,noise=5");
    synth->add_option("--target-bias", synth_tgt, "target bias spec");
    synth->add_option("--seed", seed, "rng seed");
    synth->add_option("--test-fraction", test_fraction, "held-out fraction written to Xtest/, Ytest/");

    auto* train = app.add_subcommand("train", "train the augmentation network");
    std::string train_src, train_tgt, train_cfg = "desk", train_out;
    int train_epochs = -1;
    train->add_option("--source", train_src, "labeled source dataset (X)")->required();
    train->add_option("--target", train_tgt, "unlabeled target dataset (Y)")->required();
    train->add_option("--config", train_cfg, "preset name (desk, paper-256) or config file");
    train->add_option("--out", train_out, "run output directory")->required();
    train->add_option("--seed", seed, "rng seed");
    train->add_option("--epochs", train_epochs, "override configured epoch count");

    auto* generate = app.add_subcommand("generate", "generate the intermediate domain Z = G1(X)");
    std::string gen_ckpt, gen_src, gen_out;
    generate->add_option("--checkpoint", gen_ckpt, "checkpoint directory")->required();
    generate->add_option("--source", gen_src, "source dataset (X)")->required();
    generate->add_option("--out", gen_out, "output dataset directory")->required();
    generate->add_option("--seed", seed, "rng seed");

    auto* eval_cmd = app.add_subcommand("eval", "three-way cross-generalization comparison");
    std::string eval_src, eval_deb, eval_tgt, eval_test, eval_out;
    int trials = 15, clf_epochs = 10;
    eval_cmd->add_option("--source", eval_src, "source training set (X)")->required();
    eval_cmd->add_option("--debiased", eval_deb, "intermediate training set (Z)")->required();
    eval_cmd->add_option("--target", eval_tgt, "target training set (Y, labels used here)")->required();
    eval_cmd->add_option("--test", eval_test, "held-out target test set")->required();
    eval_cmd->add_option("--out", eval_out, "output directory")->required();
    eval_cmd->add_option("--trials", trials, "successive trials to average");
    eval_cmd->add_option("--clf-epochs", clf_epochs, "classifier training epochs");
    eval_cmd->add_option("--seed", seed, "rng seed");

    auto* audit = app.add_subcommand("audit", "label-retention audit of a generated domain");
    std::string audit_src, audit_gen, audit_mode = "ground_truth", audit_base, audit_out;
    double threshold = 0.3;
    int oracle_epochs = 12;
    audit->add_option("--source", audit_src, "source dataset (X)")->required();
    audit->add_option("--generated", audit_gen, "generated dataset (Z)")->required();
    audit->add_option("--mode", audit_mode, "ground_truth or ssim_proxy");
    audit->add_option("--base", audit_base, "unbiased base set (oracle training, ground_truth mode)");
    audit->add_option("--threshold", threshold, "ssim_proxy suspect threshold");
    audit->add_option("--out", audit_out, "output directory")->required();
    audit->add_option("--seed", seed, "rng seed");
    audit->add_option("--oracle-epochs", oracle_epochs, "oracle classifier epochs");

    auto* embed = app.add_subcommand("embed", "2-D embedding of source/intermediate/target");
    std::string emb_src, emb_int, emb_tgt, emb_train_on, emb_method = "tsne", emb_out;
    int samples = 100, emb_epochs = 10;
    embed->add_option("--source", emb_src, "source dataset")->required();
    embed->add_option("--intermediate", emb_int, "intermediate dataset")->required();
    embed->add_option("--target", emb_tgt, "target dataset")->required();
    embed->add_option("--train-on", emb_train_on, "feature-extractor training set (default: source)");
    embed->add_option("--method", emb_method, "pca or tsne");
    embed->add_option("--samples", samples, "samples per domain");
    embed->add_option("--out", emb_out, "output directory")->required();
    embed->add_option("--seed", seed, "rng seed");
    embed->add_option("--clf-epochs", emb_epochs, "feature-extractor training epochs");

    auto* ssim_cmd = app.add_subcommand("ssim", "mean SSIM between two images");
    std::string ssim_a, ssim_b;
    int ssim_window = 11;
    ssim_cmd->add_option("--a", ssim_a, "first image (ppm)")->required();
    ssim_cmd->add_option("--b", ssim_b, "second image (ppm)")->required();
    ssim_cmd->add_option("--window", ssim_window, "ssim window size");

    try {
        app.parse(argc, argv);
#ifdef _OPENMP
        if (workers > 0) omp_set_num_threads(workers);
#endif
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*render) return cmd_render(render_n, render_size, seed, render_out);
        if (*synth) return cmd_synth(synth_base, synth_out, synth_src, synth_tgt, seed, test_fraction);
        if (*train) return cmd_train(train_src, train_tgt, train_cfg, train_out, seed, train_epochs);
        if (*generate) return cmd_generate(gen_ckpt, gen_src, gen_out, seed);
        if (*eval_cmd)
            return cmd_eval(eval_src, eval_deb, eval_tgt, eval_test, eval_out, seed, trials, clf_epochs);
        if (*audit)
            return cmd_audit(audit_src, audit_gen, audit_mode, audit_base, threshold, audit_out,
                             seed, oracle_epochs);
        if (*embed)
            return cmd_embed(emb_src, emb_int, emb_tgt, emb_train_on, emb_method, samples, emb_out,
                             seed, emb_epochs);
        if (*ssim_cmd) return cmd_ssim(ssim_a, ssim_b, ssim_window);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
