#pragma once

// Augmentation-network training loop: per-iteration generator and
// discriminator updates under the total objective, the replay image
// buffer, per-epoch checkpoints, and intermediate-domain generation with
// label carry-over.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "debias/adam.hpp"
#include "debias/config.hpp"
#include "debias/checkpoint.hpp"
#include "debias/data.hpp"
#include "debias/losses.hpp"
#include "debias/networks.hpp"
#include "debias/ssim.hpp"

namespace debias {

// ---------------------------------------------------------------------------
// Replay buffer of previously generated images
// ---------------------------------------------------------------------------
class ImageBuffer {
  public:
    ImageBuffer() = default;
    ImageBuffer(int capacity, RngState rng) : capacity_(capacity), rng_(rng) {
        if (capacity < 1) throw ConfigError("image buffer: capacity must be >= 1");
    }

    // Not full: store and return the fresh image. Full: with p = 0.5 return
    // it unchanged, otherwise swap it for a uniformly chosen stored one.
    Tensor push_sample(const Tensor& img) {
        if (static_cast<int>(slots_.size()) < capacity_) {
            slots_.push_back(img.detach());
            return img;
        }
        if (rng_.coin(0.5)) return img;
        const auto j = static_cast<size_t>(rng_.below(slots_.size()));
        Tensor stale = slots_[j];
        slots_[j] = img.detach();
        return stale;
    }

    size_t size() const { return slots_.size(); }
    int capacity() const { return capacity_; }
    std::vector<Tensor>& slots() { return slots_; }
    RngState& rng() { return rng_; }

  private:
    int capacity_ = 1;
    std::vector<Tensor> slots_;
    RngState rng_;
};

// ---------------------------------------------------------------------------
// Trainer state and checkpointing
// ---------------------------------------------------------------------------
struct TrainerState {
    TrainConfig cfg;
    GeneratorParamsT<float> g1, g2;  // G1: X -> Y, G2: Y -> X
    DiscriminatorParamsT<float> d1, d2;  // D1 judges Y, D2 judges X
    Adam opt_g, opt_d1, opt_d2;
    ImageBuffer buffer_x, buffer_y;  // stores of fake X / fake Y images
    RngState rng;                    // sampling + augmentation stream
    int64_t step = 0;
    int epoch = 0;
};

inline std::vector<Tensor> collect_params(TrainerState& st, bool generators) {
    std::vector<Tensor> out;
    auto grab = [&](const std::string&, Tensor& t) { out.push_back(t); };
    if (generators) {
        st.g1.visit_params(grab);
        st.g2.visit_params(grab);
    }
    return out;
}

inline TrainerState init_trainer(const TrainConfig& cfg) {
    cfg.validate();
    TrainerState st;
    st.cfg = cfg;
    RngState init_rng(derive_seed(cfg.seed, "init"));
    st.g1 = build_generator<float>(cfg.gen, init_rng);
    st.g2 = build_generator<float>(cfg.gen, init_rng);
    st.d1 = build_discriminator<float>(cfg.disc, init_rng);
    st.d2 = build_discriminator<float>(cfg.disc, init_rng);
    AdamConfig ac;
    ac.lr = cfg.lr;
    std::vector<Tensor> gp;
    auto grab = [&](const std::string&, Tensor& t) { gp.push_back(t); };
    st.g1.visit_params(grab);
    st.g2.visit_params(grab);
    st.opt_g = Adam(gp, ac);
    std::vector<Tensor> d1p, d2p;
    st.d1.visit_params([&](const std::string&, Tensor& t) { d1p.push_back(t); });
    st.d2.visit_params([&](const std::string&, Tensor& t) { d2p.push_back(t); });
    st.opt_d1 = Adam(d1p, ac);
    st.opt_d2 = Adam(d2p, ac);
    st.buffer_x = ImageBuffer(cfg.buffer_capacity, RngState(derive_seed(cfg.seed, "buffer_x")));
    st.buffer_y = ImageBuffer(cfg.buffer_capacity, RngState(derive_seed(cfg.seed, "buffer_y")));
    st.rng = RngState(derive_seed(cfg.seed, "train"));
    return st;
}

namespace detail {

inline void add_network_entries(CheckpointWriter& w, const std::string& prefix,
                                GeneratorParamsT<float>& g) {
    g.visit_params([&](const std::string& n, Tensor& t) { w.add(prefix + "." + n, "param", t); });
    g.visit_buffers(
        [&](const std::string& n, std::vector<float>& v) { w.add(prefix + "." + n, "buffer", v); });
}

inline void add_network_entries(CheckpointWriter& w, const std::string& prefix,
                                DiscriminatorParamsT<float>& d) {
    d.visit_params([&](const std::string& n, Tensor& t) { w.add(prefix + "." + n, "param", t); });
    d.visit_buffers(
        [&](const std::string& n, std::vector<float>& v) { w.add(prefix + "." + n, "buffer", v); });
}

inline void add_adam_entries(CheckpointWriter& w, const std::string& prefix, Adam& opt) {
    for (size_t i = 0; i < opt.n_params(); ++i) {
        w.add(prefix + ".m1." + std::to_string(i), "opt", opt.moment1(i));
        w.add(prefix + ".m2." + std::to_string(i), "opt", opt.moment2(i));
    }
}

inline void add_buffer_entries(CheckpointWriter& w, const std::string& prefix, ImageBuffer& buf) {
    for (size_t i = 0; i < buf.slots().size(); ++i)
        w.add(prefix + ".slot" + std::to_string(i), "buffer", buf.slots()[i]);
}

inline json rng_json(const RngState& r) {
    json j;
    j["seed"] = r.seed;
    j["counter"] = r.counter;
    return j;
}

inline RngState rng_from_json(const json& j) {
    return RngState{j.at("seed").get<uint64_t>(), j.at("counter").get<uint64_t>()};
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir, TrainerState& st) {
    CheckpointWriter w;
    detail::add_network_entries(w, "g1", st.g1);
    detail::add_network_entries(w, "g2", st.g2);
    detail::add_network_entries(w, "d1", st.d1);
    detail::add_network_entries(w, "d2", st.d2);
    detail::add_adam_entries(w, "adam.g", st.opt_g);
    detail::add_adam_entries(w, "adam.d1", st.opt_d1);
    detail::add_adam_entries(w, "adam.d2", st.opt_d2);
    detail::add_buffer_entries(w, "buffer_x", st.buffer_x);
    detail::add_buffer_entries(w, "buffer_y", st.buffer_y);
    auto& meta = w.meta();
    meta["step"] = st.step;
    meta["epoch"] = st.epoch;
    char hash_hex[32];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(st.cfg.hash()));
    meta["config_hash"] = hash_hex;
    meta["config"] = st.cfg.serialize();
    meta["rng"]["train"] = detail::rng_json(st.rng);
    meta["rng"]["buffer_x"] = detail::rng_json(st.buffer_x.rng());
    meta["rng"]["buffer_y"] = detail::rng_json(st.buffer_y.rng());
    meta["adam_steps"]["g"] = st.opt_g.step_count();
    meta["adam_steps"]["d1"] = st.opt_d1.step_count();
    meta["adam_steps"]["d2"] = st.opt_d2.step_count();
    w.write(dir);
}

inline TrainerState load_checkpoint(const std::string& dir) {
    CheckpointReader r(dir);
    const TrainConfig cfg = parse_train_config_text(r.meta().at("config").get<std::string>());
    TrainerState st = init_trainer(cfg);
    char hash_hex[32];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(cfg.hash()));
    if (r.meta().at("config_hash").get<std::string>() != hash_hex)
        throw IoError("checkpoint: config hash mismatch in " + dir);
    auto read_gen = [&](const std::string& prefix, GeneratorParamsT<float>& g) {
        g.visit_params([&](const std::string& n, Tensor& t) { r.read_into(prefix + "." + n, t); });
        g.visit_buffers(
            [&](const std::string& n, std::vector<float>& v) { r.read_into(prefix + "." + n, v); });
    };
    auto read_disc = [&](const std::string& prefix, DiscriminatorParamsT<float>& d) {
        d.visit_params([&](const std::string& n, Tensor& t) { r.read_into(prefix + "." + n, t); });
        d.visit_buffers(
            [&](const std::string& n, std::vector<float>& v) { r.read_into(prefix + "." + n, v); });
    };
    read_gen("g1", st.g1);
    read_gen("g2", st.g2);
    read_disc("d1", st.d1);
    read_disc("d2", st.d2);
    auto read_adam = [&](const std::string& prefix, Adam& opt, int64_t steps) {
        for (size_t i = 0; i < opt.n_params(); ++i) {
            r.read_into(prefix + ".m1." + std::to_string(i), opt.moment1(i));
            r.read_into(prefix + ".m2." + std::to_string(i), opt.moment2(i));
        }
        opt.set_step_count(steps);
    };
    read_adam("adam.g", st.opt_g, r.meta().at("adam_steps").at("g").get<int64_t>());
    read_adam("adam.d1", st.opt_d1, r.meta().at("adam_steps").at("d1").get<int64_t>());
    read_adam("adam.d2", st.opt_d2, r.meta().at("adam_steps").at("d2").get<int64_t>());
    auto read_buffer = [&](const std::string& prefix, ImageBuffer& buf) {
        for (const auto& name : r.names_with_prefix(prefix + ".slot"))
            buf.slots().push_back(r.read_tensor(name));
    };
    read_buffer("buffer_x", st.buffer_x);
    read_buffer("buffer_y", st.buffer_y);
    st.rng = detail::rng_from_json(r.meta().at("rng").at("train"));
    st.buffer_x.rng() = detail::rng_from_json(r.meta().at("rng").at("buffer_x"));
    st.buffer_y.rng() = detail::rng_from_json(r.meta().at("rng").at("buffer_y"));
    st.step = r.meta().at("step").get<int64_t>();
    st.epoch = r.meta().at("epoch").get<int>();
    return st;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
namespace detail {

inline Tensor sample_image(const DomainDataset& ds, TrainerState& st) {
    const auto idx = static_cast<size_t>(st.rng.below(ds.size()));
    const auto& img = ds.images[idx];
    if (st.cfg.augment) {
        auto aug = preprocess(img, true, st.rng, st.cfg.gen.image_size);
        return single_batch(aug.pixels);
    }
    RngState unused;
    auto ev = preprocess(img, false, unused, st.cfg.gen.image_size);
    return single_batch(ev.pixels);
}

inline std::vector<Tensor> split_batch(const Tensor& batch) {
    const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<Tensor> out;
    for (int i = 0; i < n; ++i) {
        auto t = Tensor::zeros({1, c, h, w});
        const int64_t sz = static_cast<int64_t>(c) * h * w;
        std::copy(batch.data().begin() + i * sz, batch.data().begin() + (i + 1) * sz,
                  t.data().begin());
        out.push_back(std::move(t));
    }
    return out;
}

inline Tensor join_batch(const std::vector<Tensor>& imgs) {
    const int c = imgs[0].dim(1), h = imgs[0].dim(2), w = imgs[0].dim(3);
    auto out = Tensor::zeros({static_cast<int>(imgs.size()), c, h, w});
    const int64_t sz = static_cast<int64_t>(c) * h * w;
    for (size_t i = 0; i < imgs.size(); ++i)
        std::copy(imgs[i].data().begin(), imgs[i].data().end(),
                  out.data().begin() + static_cast<int64_t>(i) * sz);
    return out;
}

}  // namespace detail

// One iteration: generator update on Eq. 4, then discriminator updates on
// real images and buffer-sampled fakes.
inline LossReport train_step(TrainerState& st, const DomainDataset& X, const DomainDataset& Y) {
    if (X.empty() || Y.empty()) throw ConfigError("train_step: dataset empty");
    auto x = detail::sample_image(X, st);
    auto y = detail::sample_image(Y, st);
    const float inv_range = 1.0f / static_cast<float>(st.cfg.gen.pixel_max);

    LossReport report;
    Tensor fake_y_detached, fake_x_detached;
    {
        // generator update; discriminators frozen so their weight grads are
        // skipped while gradients still flow through them
        st.d1.set_requires_grad(false);
        st.d2.set_requires_grad(false);
        Tape tape;
        Tape::Scope scope(tape);
        auto fake_y = generator_forward(st.g1, x, BnMode::Train);
        auto x_rec = generator_forward(st.g2, fake_y, BnMode::Train);
        auto fake_x = generator_forward(st.g2, y, BnMode::Train);
        auto y_rec = generator_forward(st.g1, fake_x, BnMode::Train);
        ObjectiveInputs<float> in;
        in.d1_fake_g = discriminator_forward(st.d1, fake_y, BnMode::Train);
        in.d2_fake_g = discriminator_forward(st.d2, fake_x, BnMode::Train);
        in.d1_real = in.d1_fake_g;  // placeholders; D losses recomputed below
        in.d1_fake = in.d1_fake_g;
        in.d2_real = in.d2_fake_g;
        in.d2_fake = in.d2_fake_g;
        in.x = affine(x, inv_range, 0.0f);
        in.x_rec = affine(x_rec, inv_range, 0.0f);
        in.y = affine(y, inv_range, 0.0f);
        in.y_rec = affine(y_rec, inv_range, 0.0f);
        in.ssim_pairs = {{x, fake_y}, {y, fake_x}};
        auto obj = total_objective(in, st.cfg.ssim, static_cast<float>(st.cfg.lambda),
                                   static_cast<float>(st.cfg.lambda_ssim));
        st.opt_g.zero_grad();
        tape.backward(obj.generator);
        st.opt_g.step();
        report = obj.report;
        fake_y_detached = fake_y.detach();
        fake_x_detached = fake_x.detach();
        st.d1.set_requires_grad(true);
        st.d2.set_requires_grad(true);
    }

    for (int k = 0; k < st.cfg.d_steps_per_g_step; ++k) {
        // replay buffers serve the discriminators per generated image
        std::vector<Tensor> fy, fx;
        for (auto& img : detail::split_batch(fake_y_detached)) fy.push_back(st.buffer_y.push_sample(img));
        for (auto& img : detail::split_batch(fake_x_detached)) fx.push_back(st.buffer_x.push_sample(img));
        auto fake_y_d = detail::join_batch(fy);
        auto fake_x_d = detail::join_batch(fx);
        {
            Tape tape;
            Tape::Scope scope(tape);
            auto loss = discriminator_loss(discriminator_forward(st.d1, y, BnMode::Train),
                                           discriminator_forward(st.d1, fake_y_d, BnMode::Train));
            st.opt_d1.zero_grad();
            tape.backward(loss);
            st.opt_d1.step();
            report.adv_d1 = static_cast<double>(loss.item());
        }
        {
            Tape tape;
            Tape::Scope scope(tape);
            auto loss = discriminator_loss(discriminator_forward(st.d2, x, BnMode::Train),
                                           discriminator_forward(st.d2, fake_x_d, BnMode::Train));
            st.opt_d2.zero_grad();
            tape.backward(loss);
            st.opt_d2.step();
            report.adv_d2 = static_cast<double>(loss.item());
        }
    }
    ++st.step;
    return report;
}

// train_log.csv rows, format pinned by the losses interface.
class TrainLogWriter {
  public:
    explicit TrainLogWriter(const std::string& path) : out_(path) {
        if (!out_) throw IoError("train log: cannot open " + path);
        out_ << "step,adv_g,adv_d1,adv_d2,cycle,ssim,total\n";
    }

    void row(int64_t step, const LossReport& r) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%lld,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n",
                      static_cast<long long>(step), r.adv_g, r.adv_d1, r.adv_d2, r.cycle, r.ssim,
                      r.total);
        out_ << buf;
    }

    void flush() { out_.flush(); }

  private:
    std::ofstream out_;
};

struct TrainResult {
    std::string checkpoint_dir;  // last epoch
    std::vector<LossReport> log;
};

// Full run: per-iteration logging, checkpoint each epoch, NaN abort keeps
// the last epoch's checkpoint in place.
inline TrainResult train_augmenter(const DomainDataset& X, const DomainDataset& Y,
                                   const TrainConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    if (X.empty() || Y.empty()) throw ConfigError("train_augmenter: dataset empty");
    fs::create_directories(out_dir);
    TrainerState st = init_trainer(cfg);
    TrainResult res;
    const std::string ckpt_dir = (fs::path(out_dir) / "checkpoints" / "last").string();
    TrainLogWriter log((fs::path(out_dir) / "train_log.csv").string());
    if (cfg.epochs == 0) {
        save_checkpoint(ckpt_dir, st);
        res.checkpoint_dir = ckpt_dir;
        return res;
    }
    const int64_t steps_per_epoch =
        (static_cast<int64_t>(X.size()) + cfg.batch_size - 1) / cfg.batch_size;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double epoch_total = 0;
        for (int64_t i = 0; i < steps_per_epoch; ++i) {
            LossReport r;
            try {
                r = train_step(st, X, Y);
            } catch (const NumericError& e) {
                log.flush();
                throw NumericError(std::string(e.what()) + " (aborted at step " +
                                   std::to_string(st.step) + "; last-good checkpoint: " +
                                   (st.epoch > 0 ? ckpt_dir : "none") + ")");
            }
            log.row(st.step, r);
            epoch_total += r.total;
            res.log.push_back(r);
        }
        st.epoch = epoch;
        save_checkpoint(ckpt_dir, st);
        log.flush();
        DEBIAS_INFO("epoch %d/%d done, mean generator loss %.4f", epoch, cfg.epochs,
                    epoch_total / static_cast<double>(steps_per_epoch));
    }
    res.checkpoint_dir = ckpt_dir;
    return res;
}

// Z = G1(X) in X order, labels carried over; provenance records mean SSIM
// of each (x, z) pair. Batch size 1 generation, eval mode.
inline DomainDataset generate_intermediate(TrainerState& st, const DomainDataset& X,
                                           std::map<std::string, double>* ssim_out = nullptr) {
    DomainDataset z;
    z.name = "Z";
    z.n_classes = X.n_classes;
    for (const auto& img : X.images) {
        if (img.pixels.dim(1) != st.cfg.gen.image_size || img.pixels.dim(2) != st.cfg.gen.image_size)
            throw ConfigError("generate_intermediate: image " + img.id + " is " +
                              std::to_string(img.pixels.dim(1)) + "x" +
                              std::to_string(img.pixels.dim(2)) + ", trained for " +
                              std::to_string(st.cfg.gen.image_size));
        auto batch = single_batch(to_three_channels(img.pixels));
        auto gen = generator_forward(st.g1, batch, BnMode::Eval);
        LabeledImage out;
        out.id = img.id;
        out.label = img.label;
        out.pixels = Tensor::zeros({gen.dim(1), gen.dim(2), gen.dim(3)});
        std::copy(gen.data().begin(), gen.data().end(), out.pixels.data().begin());
        const double ms = static_cast<double>(mean_ssim<float>(batch, gen, st.cfg.ssim));
        if (ssim_out) (*ssim_out)[out.id] = ms;
        z.provenance[out.id] = img.id;
        z.images.push_back(std::move(out));
    }
    return z;
}

}  // namespace debias
