#pragma once

// TrainConfig, the flat key=value config-file format and the named presets
// (`desk`, `paper-256`).

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "debias/networks.hpp"
#include "debias/ssim.hpp"

namespace debias {

struct TrainConfig {
    double lambda = 10.0;
    double lambda_ssim = 0.02;
    double lr = 0.001;
    int epochs = 30;
    int batch_size = 1;
    int buffer_capacity = 50;
    uint64_t seed = 0;
    int d_steps_per_g_step = 1;
    bool augment = true;
    GeneratorConfig gen;
    DiscriminatorConfig disc;
    SsimConfig ssim;

    void validate() const {
        if (lambda < 0) throw ConfigError("train.lambda must be >= 0");
        if (lambda_ssim < 0) throw ConfigError("train.lambda_ssim must be >= 0");
        if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
        if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (buffer_capacity < 1) throw ConfigError("train.buffer_capacity must be >= 1");
        if (d_steps_per_g_step < 1) throw ConfigError("train.d_steps_per_g_step must be >= 1");
        gen.validate();
        disc.validate();
        ssim.validate();
    }

    // Flat key=value form; also the config-file format.
    std::string serialize() const {
        char buf[1024];
        std::snprintf(buf, sizeof(buf),
                      "train.lambda=%.17g\ntrain.lambda_ssim=%.17g\ntrain.lr=%.17g\n"
                      "train.epochs=%d\ntrain.batch_size=%d\ntrain.buffer_capacity=%d\n"
                      "train.seed=%llu\ntrain.d_steps_per_g_step=%d\ntrain.augment=%d\n"
                      "generator.in_channels=%d\ngenerator.base_channels=%d\n"
                      "generator.n_residual_blocks=%d\ngenerator.n_down=%d\n"
                      "generator.image_size=%d\ngenerator.pixel_max=%.17g\n"
                      "discriminator.in_channels=%d\ndiscriminator.n_layers=%d\n"
                      "discriminator.base_channels=%d\n"
                      "ssim.window_size=%d\nssim.window=%s\nssim.gaussian_sigma=%.17g\n"
                      "ssim.k1=%.17g\nssim.k2=%.17g\nssim.dynamic_range=%.17g\n",
                      lambda, lambda_ssim, lr, epochs, batch_size, buffer_capacity,
                      static_cast<unsigned long long>(seed), d_steps_per_g_step, augment ? 1 : 0,
                      gen.in_channels, gen.base_channels, gen.n_residual_blocks, gen.n_down,
                      gen.image_size, gen.pixel_max, disc.in_channels, disc.n_layers,
                      disc.base_channels, ssim.window_size,
                      ssim.window == SsimWindow::Gaussian ? "gaussian" : "uniform",
                      ssim.gaussian_sigma, ssim.k1, ssim.k2, ssim.dynamic_range);
        return buf;
    }

    uint64_t hash() const { return fnv1a64(serialize()); }
};

// Desk preset: CPU-feasible sizes, the paper's loss weights and optimizer.
inline TrainConfig desk_config() {
    TrainConfig cfg;
    cfg.gen.image_size = 32;
    cfg.gen.base_channels = 16;
    cfg.gen.n_residual_blocks = 3;
    cfg.disc.n_layers = 2;
    cfg.disc.base_channels = 16;
    cfg.epochs = 30;
    return cfg;
}

// Full-scale preset matching the reported architecture: 256x256 images,
// 5 residual blocks, two stride-2 stages, 70x70-receptive-field PatchGAN,
// 60 epochs.
inline TrainConfig paper256_config() {
    TrainConfig cfg;
    cfg.gen.image_size = 256;
    cfg.gen.base_channels = 64;
    cfg.gen.n_residual_blocks = 5;
    cfg.disc.n_layers = 3;
    cfg.disc.base_channels = 64;
    cfg.epochs = 60;
    return cfg;
}

// Applies one key=value assignment; unknown keys are errors naming the key.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& val) {
    auto as_int = [&](const std::string& v) {
        try {
            return std::stoi(v);
        } catch (const std::exception&) {
            throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
        }
    };
    auto as_double = [&](const std::string& v) {
        try {
            return std::stod(v);
        } catch (const std::exception&) {
            throw ConfigError("config: bad number for " + key + ": '" + v + "'");
        }
    };
    if (key == "train.lambda")
        cfg.lambda = as_double(val);
    else if (key == "train.lambda_ssim")
        cfg.lambda_ssim = as_double(val);
    else if (key == "train.lr")
        cfg.lr = as_double(val);
    else if (key == "train.epochs")
        cfg.epochs = as_int(val);
    else if (key == "train.batch_size")
        cfg.batch_size = as_int(val);
    else if (key == "train.buffer_capacity")
        cfg.buffer_capacity = as_int(val);
    else if (key == "train.seed")
        cfg.seed = std::stoull(val);
    else if (key == "train.d_steps_per_g_step")
        cfg.d_steps_per_g_step = as_int(val);
    else if (key == "train.augment")
        cfg.augment = as_int(val) != 0;
    else if (key == "generator.in_channels")
        cfg.gen.in_channels = as_int(val);
    else if (key == "generator.base_channels")
        cfg.gen.base_channels = as_int(val);
    else if (key == "generator.n_residual_blocks")
        cfg.gen.n_residual_blocks = as_int(val);
    else if (key == "generator.n_down")
        cfg.gen.n_down = as_int(val);
    else if (key == "generator.image_size")
        cfg.gen.image_size = as_int(val);
    else if (key == "generator.pixel_max")
        cfg.gen.pixel_max = as_double(val);
    else if (key == "discriminator.in_channels")
        cfg.disc.in_channels = as_int(val);
    else if (key == "discriminator.n_layers")
        cfg.disc.n_layers = as_int(val);
    else if (key == "discriminator.base_channels")
        cfg.disc.base_channels = as_int(val);
    else if (key == "ssim.window_size")
        cfg.ssim.window_size = as_int(val);
    else if (key == "ssim.window") {
        if (val == "gaussian")
            cfg.ssim.window = SsimWindow::Gaussian;
        else if (val == "uniform")
            cfg.ssim.window = SsimWindow::Uniform;
        else
            throw ConfigError("config: ssim.window must be gaussian or uniform");
    } else if (key == "ssim.gaussian_sigma")
        cfg.ssim.gaussian_sigma = as_double(val);
    else if (key == "ssim.k1")
        cfg.ssim.k1 = as_double(val);
    else if (key == "ssim.k2")
        cfg.ssim.k2 = as_double(val);
    else if (key == "ssim.dynamic_range")
        cfg.ssim.dynamic_range = as_double(val);
    else
        throw ConfigError("config: unknown key '" + key + "'");
}

// key=value lines; '#' comments and blank lines ignored. `base` supplies
// defaults (a preset, usually).
inline TrainConfig parse_train_config_text(const std::string& text,
                                           TrainConfig base = TrainConfig()) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t')) line.pop_back();
        size_t start = 0;
        while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
        line = line.substr(start);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        apply_config_entry(base, line.substr(0, eq), line.substr(eq + 1));
    }
    return base;
}

// Accepts a preset name or a config file path.
inline TrainConfig resolve_config(const std::string& name_or_path) {
    if (name_or_path.empty() || name_or_path == "desk") return desk_config();
    if (name_or_path == "paper-256") return paper256_config();
    std::ifstream in(name_or_path);
    if (!in) throw ConfigError("config: no preset or file named '" + name_or_path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_train_config_text(buf.str(), desk_config());
}

}  // namespace debias
