#pragma once

// Domain datasets, deterministic preprocessing, the synthetic digit base
// set and the label-preserving bias transforms that manufacture a biased
// source/target domain pair at desk scale.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "debias/image.hpp"
#include "debias/tensor.hpp"

namespace debias {

namespace fs = std::filesystem;

struct LabeledImage {
    Tensor pixels;  // [C,H,W] in [0,255]
    int label = 0;
    std::string id;
};

struct DomainDataset {
    std::string name;
    std::vector<LabeledImage> images;
    int n_classes = 0;
    // id -> source id; carried through synthesis and generation for audits
    std::map<std::string, std::string> provenance;

    size_t size() const { return images.size(); }
    bool empty() const { return images.empty(); }
};

// Low-level bias applied uniformly to one domain. Every transform maps a
// labeled image to a labeled image with the same label.
struct BiasSpec {
    double hue_shift = 0.0;    // degrees
    double noise_sigma = 0.0;  // pixel units
    int background = 0;        // 0 = none, else texture id (1..3)
    double contrast = 1.0;     // multiplier about 127.5
    uint64_t seed = 0;

    void validate() const {
        if (background < 0 || background > 3)
            throw ConfigError("bias spec: background texture id must be 0..3");
        if (noise_sigma < 0) throw ConfigError("bias spec: noise_sigma must be >= 0");
    }

    bool is_identity() const {
        return hue_shift == 0.0 && noise_sigma == 0.0 && background == 0 && contrast == 1.0;
    }

    // "hue=60,noise=12,contrast=0.9,texture=1,seed=7"; unknown keys are errors.
    static BiasSpec parse(const std::string& text) {
        BiasSpec spec;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            const auto eq = item.find('=');
            if (eq == std::string::npos)
                throw ConfigError("bias spec: expected key=value, got '" + item + "'");
            const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
            try {
                if (key == "hue")
                    spec.hue_shift = std::stod(val);
                else if (key == "noise")
                    spec.noise_sigma = std::stod(val);
                else if (key == "contrast")
                    spec.contrast = std::stod(val);
                else if (key == "texture")
                    spec.background = std::stoi(val);
                else if (key == "seed")
                    spec.seed = std::stoull(val);
                else
                    throw ConfigError("bias spec: unknown key '" + key + "'");
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception&) {
                throw ConfigError("bias spec: bad value for '" + key + "': '" + val + "'");
            }
        }
        spec.validate();
        return spec;
    }

    std::string str() const {
        std::ostringstream out;
        out << "hue=" << hue_shift << ",noise=" << noise_sigma << ",contrast=" << contrast
            << ",texture=" << background << ",seed=" << seed;
        return out.str();
    }
};

// Applies one spec to one image; per-image rng derived from (spec.seed, id)
// so datasets are reproducible regardless of processing order.
inline LabeledImage apply_bias(const LabeledImage& img, const BiasSpec& spec) {
    spec.validate();
    LabeledImage out{img.pixels.detach(), img.label, img.id};
    auto& px = out.pixels;
    const int h = px.dim(1), w = px.dim(2);
    if (spec.contrast != 1.0) {
        for (auto& v : px.data())
            v = clamp_px(static_cast<float>((v - 127.5) * spec.contrast + 127.5));
    }
    if (spec.hue_shift != 0.0) shift_hue(px, static_cast<float>(spec.hue_shift));
    if (spec.background != 0) {
        const uint64_t tex_seed = mix64(spec.seed ^ fnv1a64(img.id));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float alpha = std::min(1.0f, luminance_at(px, y, x) / 200.0f);
                const float tex = texture_value(spec.background, tex_seed, y, x);
                for (int c = 0; c < 3; ++c) {
                    float& v = px.data()[(static_cast<int64_t>(c) * h + y) * w + x];
                    v = clamp_px(v * alpha + tex * (1.0f - alpha));
                }
            }
    }
    if (spec.noise_sigma > 0.0) {
        RngState rng(derive_seed(spec.seed, img.id));
        for (auto& v : px.data())
            v = clamp_px(v + static_cast<float>(rng.normal() * spec.noise_sigma));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Disk layout: <dir>/images/*.ppm + <dir>/labels.csv (filename,label),
// optional <dir>/provenance.csv.
// ---------------------------------------------------------------------------
inline DomainDataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    const fs::path csv = root / "labels.csv";
    std::ifstream in(csv);
    if (!in) throw IoError("load_dataset: missing " + csv.string());
    DomainDataset ds;
    ds.name = root.filename().string();
    std::string line;
    int row = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (row == 1 && line == "filename,label") continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos)
            throw IoError("load_dataset: row " + std::to_string(row) + " of " + csv.string() +
                          " is not 'filename,label'");
        const std::string fname = line.substr(0, comma);
        int label = 0;
        try {
            label = std::stoi(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw IoError("load_dataset: row " + std::to_string(row) + ": bad label '" +
                          line.substr(comma + 1) + "' for " + fname);
        }
        if (label < 0)
            throw IoError("load_dataset: row " + std::to_string(row) + ": negative label for " + fname);
        const fs::path img_path = root / "images" / fname;
        if (!fs::exists(img_path))
            throw IoError("load_dataset: row " + std::to_string(row) + ": missing file " +
                          img_path.string());
        LabeledImage img;
        img.pixels = read_ppm(img_path.string());
        img.label = label;
        img.id = img_path.stem().string();
        max_label = std::max(max_label, label);
        ds.images.push_back(std::move(img));
    }
    ds.n_classes = max_label + 1;
    // ids must be unique
    std::vector<std::string> ids;
    for (const auto& im : ds.images) ids.push_back(im.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw IoError("load_dataset: duplicate image ids in " + dir);
    const fs::path prov = root / "provenance.csv";
    if (fs::exists(prov)) {
        std::ifstream pin(prov);
        std::string pline;
        bool first = true;
        while (std::getline(pin, pline)) {
            if (pline.empty()) continue;
            if (first) {
                first = false;
                if (pline.rfind("id,", 0) == 0) continue;
            }
            const auto c1 = pline.find(',');
            if (c1 == std::string::npos) continue;
            const auto c2 = pline.find(',', c1 + 1);
            ds.provenance[pline.substr(0, c1)] =
                pline.substr(c1 + 1, c2 == std::string::npos ? std::string::npos : c2 - c1 - 1);
        }
    }
    return ds;
}

// Extra per-pair column (mean SSIM) is written when provided.
inline void save_dataset(const DomainDataset& ds, const std::string& dir,
                         const std::map<std::string, double>* mean_ssim = nullptr) {
    const fs::path root(dir);
    fs::create_directories(root / "images");
    std::ofstream csv(root / "labels.csv");
    if (!csv) throw IoError("save_dataset: cannot write " + (root / "labels.csv").string());
    csv << "filename,label\n";
    for (const auto& img : ds.images) {
        const std::string fname = img.id + ".ppm";
        write_ppm((root / "images" / fname).string(), img.pixels);
        csv << fname << "," << img.label << "\n";
    }
    if (!ds.provenance.empty()) {
        std::ofstream prov(root / "provenance.csv");
        prov << "id,source_id,mean_ssim\n";
        for (const auto& img : ds.images) {
            const auto it = ds.provenance.find(img.id);
            const std::string src = it == ds.provenance.end() ? "" : it->second;
            if (mean_ssim && mean_ssim->count(img.id)) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.6f", mean_ssim->at(img.id));
                prov << img.id << "," << src << "," << buf << "\n";
            } else {
                prov << img.id << "," << src << ",\n";
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic digit base set: 5x7 glyphs rasterized with per-image jitter and
// a configurable foreground palette. Self-contained stand-in for a digit
// corpus.
// ---------------------------------------------------------------------------
namespace detail {

inline const char* digit_glyph(int d) {
    static const char* glyphs[10] = {
        "01110" "10001" "10011" "10101" "11001" "10001" "01110",  // 0
        "00100" "01100" "00100" "00100" "00100" "00100" "01110",  // 1
        "01110" "10001" "00001" "00010" "00100" "01000" "11111",  // 2
        "11111" "00010" "00100" "00010" "00001" "10001" "01110",  // 3
        "00010" "00110" "01010" "10010" "11111" "00010" "00010",  // 4
        "11111" "10000" "11110" "00001" "00001" "10001" "01110",  // 5
        "00110" "01000" "10000" "11110" "10001" "10001" "01110",  // 6
        "11111" "00001" "00010" "00100" "01000" "01000" "01000",  // 7
        "01110" "10001" "10001" "01110" "10001" "10001" "01110",  // 8
        "01110" "10001" "10001" "01111" "00001" "00010" "01100",  // 9
    };
    return glyphs[d];
}

// Bilinear sample of the 5x7 bitmap at glyph coordinates (gu in [0,5),
// gv in [0,7)); outside cells read 0.
inline float glyph_sample(const char* bits, float gv, float gu) {
    auto cell = [&](int v, int u) -> float {
        if (v < 0 || v >= 7 || u < 0 || u >= 5) return 0.0f;
        return bits[v * 5 + u] == '1' ? 1.0f : 0.0f;
    };
    const float fv = gv - 0.5f, fu = gu - 0.5f;
    const int v0 = static_cast<int>(std::floor(fv)), u0 = static_cast<int>(std::floor(fu));
    const float av = fv - v0, au = fu - u0;
    return cell(v0, u0) * (1 - av) * (1 - au) + cell(v0, u0 + 1) * (1 - av) * au +
           cell(v0 + 1, u0) * av * (1 - au) + cell(v0 + 1, u0 + 1) * av * au;
}

}  // namespace detail

struct RenderConfig {
    int image_size = 32;
    double hue_lo = 90.0, hue_hi = 130.0;  // concentrated palette; bias specs rotate it
    double sat_lo = 0.5, sat_hi = 0.9;
    double val_lo = 0.75, val_hi = 1.0;
    double bg_val_lo = 0.04, bg_val_hi = 0.14;
    double bg_noise = 3.0;
};

inline LabeledImage render_digit(int digit, const std::string& id, RngState& rng,
                                 const RenderConfig& cfg = {}) {
    const int s = cfg.image_size;
    LabeledImage out;
    out.label = digit;
    out.id = id;
    out.pixels = Tensor::zeros({3, s, s});
    const char* bits = detail::digit_glyph(digit);

    const float scale = static_cast<float>(rng.uniform(0.65, 0.9));   // glyph height / image
    const float angle = static_cast<float>(rng.uniform(-8.0, 8.0)) * static_cast<float>(kPi / 180.0);
    const float jx = static_cast<float>(rng.uniform(-2.0, 2.0));
    const float jy = static_cast<float>(rng.uniform(-2.0, 2.0));
    float fr, fg, fb;
    hsv_to_rgb(static_cast<float>(rng.uniform(cfg.hue_lo, cfg.hue_hi)),
               static_cast<float>(rng.uniform(cfg.sat_lo, cfg.sat_hi)),
               static_cast<float>(rng.uniform(cfg.val_lo, cfg.val_hi)), fr, fg, fb);
    const float bgv = static_cast<float>(rng.uniform(cfg.bg_val_lo, cfg.bg_val_hi)) * 255.0f;

    const float glyph_h = s * scale, glyph_w = glyph_h * 5.0f / 7.0f;
    const float cy = (s - 1) / 2.0f + jy, cx = (s - 1) / 2.0f + jx;
    const float cs = std::cos(angle), sn = std::sin(angle);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            // 2x2 supersampling
            float cov = 0.0f;
            for (int sy = 0; sy < 2; ++sy)
                for (int sx = 0; sx < 2; ++sx) {
                    const float py = y + 0.25f + 0.5f * sy - cy;
                    const float px = x + 0.25f + 0.5f * sx - cx;
                    const float ry = cs * py + sn * px;
                    const float rx = -sn * py + cs * px;
                    const float gv = (ry / glyph_h + 0.5f) * 7.0f;
                    const float gu = (rx / glyph_w + 0.5f) * 5.0f;
                    cov += detail::glyph_sample(bits, gv, gu);
                }
            cov *= 0.25f;
            const float bg = clamp_px(bgv + static_cast<float>(rng.normal() * cfg.bg_noise));
            float* px0 = out.pixels.ptr();
            px0[(0 * s + y) * s + x] = clamp_px(bg + cov * (fr - bg));
            px0[(1 * s + y) * s + x] = clamp_px(bg + cov * (fg - bg));
            px0[(2 * s + y) * s + x] = clamp_px(bg + cov * (fb - bg));
        }
    return out;
}

// n images, class-balanced, order shuffled deterministically by the seed.
inline DomainDataset render_digit_base(int n, uint64_t seed, const RenderConfig& cfg = {}) {
    if (n < 10) throw ConfigError("render_digit_base: need at least 10 images");
    DomainDataset ds;
    ds.name = "digit-base";
    ds.n_classes = 10;
    RngState rng(seed);
    std::vector<int> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = i % 10;
    for (int i = n - 1; i > 0; --i)
        std::swap(labels[static_cast<size_t>(i)], labels[rng.below(static_cast<uint64_t>(i + 1))]);
    for (int i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "base_%05d", i);
        ds.images.push_back(render_digit(labels[static_cast<size_t>(i)], id, rng, cfg));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// synth_biased_pair: disjoint halves of the base, one spec per side.
// ---------------------------------------------------------------------------
inline std::pair<DomainDataset, DomainDataset> synth_biased_pair(const DomainDataset& base,
                                                                 const BiasSpec& spec_source,
                                                                 const BiasSpec& spec_target) {
    if (spec_source.seed == spec_target.seed && spec_source.str() == spec_target.str())
        throw ConfigError("synth_biased_pair: source and target specs are identical");
    std::map<int, int> per_class;
    for (const auto& img : base.images) ++per_class[img.label];
    for (const auto& [label, count] : per_class)
        if (count < 2)
            throw ConfigError("synth_biased_pair: dataset too small, class " +
                              std::to_string(label) + " has " + std::to_string(count) + " image(s)");
    DomainDataset x, y;
    x.name = "X";
    y.name = "Y";
    x.n_classes = y.n_classes = base.n_classes;
    // alternate within each class so the two halves carry equal label
    // histograms (up to odd counts)
    std::map<int, int> seen;
    for (const auto& img : base.images) {
        const bool to_x = (seen[img.label]++ % 2) == 0;
        auto& dst = to_x ? x : y;
        dst.images.push_back(apply_bias(img, to_x ? spec_source : spec_target));
        dst.provenance[img.id] = img.id;
    }
    return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Preprocessing: resize + 3-channel; train mode adds a random rotation in
// [-10, 10] degrees and a horizontal flip with p = 0.5.
// ---------------------------------------------------------------------------
inline double preprocess_draw_angle(RngState& rng) { return rng.uniform(-10.0, 10.0); }

inline LabeledImage preprocess(const LabeledImage& img, bool train_mode, RngState& rng,
                               int target_size) {
    LabeledImage out;
    out.label = img.label;
    out.id = img.id;
    Tensor px = to_three_channels(img.pixels);
    if (px.dim(1) != target_size || px.dim(2) != target_size)
        px = resize_bilinear(px, target_size, target_size);
    if (train_mode) {
        const double angle = preprocess_draw_angle(rng);
        const bool flip = rng.coin(0.5);
        px = rotate(px, static_cast<float>(angle));
        if (flip) px = hflip(px);
    }
    out.pixels = std::move(px);
    return out;
}

// ---------------------------------------------------------------------------
// Seeded epoch batching; final partial batch is emitted.
// ---------------------------------------------------------------------------
struct Batch {
    Tensor images;  // [B,C,H,W]
    std::vector<int> labels;
    std::vector<std::string> ids;
};

class BatchStream {
  public:
    BatchStream(const DomainDataset& ds, int batch_size, RngState rng)
        : ds_(&ds), batch_size_(batch_size), rng_(rng) {
        if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
        order_.resize(ds.size());
        for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        for (size_t i = order_.size(); i > 1; --i)
            std::swap(order_[i - 1], order_[rng_.below(i)]);
    }

    bool next(Batch& out) {
        if (pos_ >= order_.size()) return false;
        const size_t take = std::min(static_cast<size_t>(batch_size_), order_.size() - pos_);
        const auto& first = ds_->images[order_[pos_]].pixels;
        const int c = first.dim(0), h = first.dim(1), w = first.dim(2);
        out.images = Tensor::zeros({static_cast<int>(take), c, h, w});
        out.labels.assign(take, 0);
        out.ids.assign(take, "");
        for (size_t i = 0; i < take; ++i) {
            const auto& img = ds_->images[order_[pos_ + i]];
            if (img.pixels.shape() != first.shape())
                throw ShapeError("batches: image " + img.id + " has shape " +
                                 shape_str(img.pixels.shape()) + ", batch expects " +
                                 shape_str(first.shape()));
            std::copy(img.pixels.data().begin(), img.pixels.data().end(),
                      out.images.data().begin() + static_cast<int64_t>(i) * c * h * w);
            out.labels[i] = img.label;
            out.ids[i] = img.id;
        }
        pos_ += take;
        return true;
    }

  private:
    const DomainDataset* ds_;
    int batch_size_;
    RngState rng_;
    std::vector<size_t> order_;
    size_t pos_ = 0;
};

// One image as a [1,C,H,W] batch.
inline Tensor single_batch(const Tensor& img) {
    auto out = Tensor::zeros({1, img.dim(0), img.dim(1), img.dim(2)});
    std::copy(img.data().begin(), img.data().end(), out.data().begin());
    return out;
}

inline std::vector<int> label_histogram(const DomainDataset& ds) {
    std::vector<int> hist(static_cast<size_t>(std::max(ds.n_classes, 1)), 0);
    for (const auto& img : ds.images) {
        if (img.label >= static_cast<int>(hist.size())) hist.resize(static_cast<size_t>(img.label) + 1, 0);
        ++hist[static_cast<size_t>(img.label)];
    }
    return hist;
}

}  // namespace debias
