#pragma once

// Plain raster utilities on [C,H,W] float tensors with values in [0,255]:
// PPM I/O, HSV conversion, bilinear resize/rotate, flips and the procedural
// textures used by the bias specs. No autodiff involvement.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "debias/tensor.hpp"

namespace debias {

inline float clamp_px(float v) { return v < 0.0f ? 0.0f : (v > 255.0f ? 255.0f : v); }

// ---------------------------------------------------------------------------
// PPM (P6) round-trip; the bit-exact on-disk format for datasets.
// ---------------------------------------------------------------------------
inline void write_ppm(const std::string& path, const Tensor& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw IoError("write_ppm: expected [3,H,W] image for " + path);
    const int h = img.dim(1), w = img.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_ppm: cannot open " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<size_t>(x) * 3 + c] = static_cast<unsigned char>(
                    std::lround(clamp_px(img.data()[(c * h + y) * w + x])));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("write_ppm: write failed for " + path);
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_ppm: cannot open " + path);
    auto next_token = [&]() {
        std::string tok;
        while (in) {
            in >> tok;
            if (!tok.empty() && tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            break;
        }
        return tok;
    };
    if (next_token() != "P6") throw IoError("read_ppm: " + path + " is not a P6 file");
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0 || maxval != 255)
        throw IoError("read_ppm: unsupported header in " + path);
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw IoError("read_ppm: truncated pixel data in " + path);
    auto img = Tensor::zeros({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.data()[(c * h + y) * w + x] =
                    static_cast<float>(buf[(static_cast<size_t>(y) * w + x) * 3 + c]);
    return img;
}

// ---------------------------------------------------------------------------
// HSV: h in [0,360), s,v in [0,1]; rgb in [0,255].
// ---------------------------------------------------------------------------
inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    r /= 255.0f;
    g /= 255.0f;
    b /= 255.0f;
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0f;
    if (d <= 0) {
        h = 0.0f;
        return;
    }
    if (mx == r)
        h = 60.0f * std::fmod((g - b) / d + 6.0f, 6.0f);
    else if (mx == g)
        h = 60.0f * ((b - r) / d + 2.0f);
    else
        h = 60.0f * ((r - g) / d + 4.0f);
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    h = std::fmod(std::fmod(h, 360.0f) + 360.0f, 360.0f);
    const float c = v * s;
    const float x = c * (1.0f - std::abs(std::fmod(h / 60.0f, 2.0f) - 1.0f));
    const float m = v - c;
    float rr = 0, gg = 0, bb = 0;
    if (h < 60) {
        rr = c;
        gg = x;
    } else if (h < 120) {
        rr = x;
        gg = c;
    } else if (h < 180) {
        gg = c;
        bb = x;
    } else if (h < 240) {
        gg = x;
        bb = c;
    } else if (h < 300) {
        rr = x;
        bb = c;
    } else {
        rr = c;
        bb = x;
    }
    r = (rr + m) * 255.0f;
    g = (gg + m) * 255.0f;
    b = (bb + m) * 255.0f;
}

inline void shift_hue(Tensor& img, float degrees) {
    const int h = img.dim(1), w = img.dim(2);
    float* r = img.ptr();
    float* g = img.ptr() + static_cast<int64_t>(h) * w;
    float* b = img.ptr() + 2 * static_cast<int64_t>(h) * w;
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        float hh, ss, vv;
        rgb_to_hsv(r[i], g[i], b[i], hh, ss, vv);
        hsv_to_rgb(hh + degrees, ss, vv, r[i], g[i], b[i]);
    }
}

inline float mean_hue(const Tensor& img, float sat_min = 0.15f) {
    // circular mean over sufficiently saturated pixels
    const int h = img.dim(1), w = img.dim(2);
    const float* r = img.ptr();
    const float* g = img.ptr() + static_cast<int64_t>(h) * w;
    const float* b = img.ptr() + 2 * static_cast<int64_t>(h) * w;
    double sx = 0, sy = 0;
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        float hh, ss, vv;
        rgb_to_hsv(r[i], g[i], b[i], hh, ss, vv);
        if (ss < sat_min || vv < 0.1f) continue;
        sx += std::cos(hh * kPi / 180.0);
        sy += std::sin(hh * kPi / 180.0);
    }
    double ang = std::atan2(sy, sx) * 180.0 / kPi;
    if (ang < 0) ang += 360.0;
    return static_cast<float>(ang);
}

inline float hue_distance(float a, float b) {
    float d = std::fmod(std::abs(a - b), 360.0f);
    return d > 180.0f ? 360.0f - d : d;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------
inline float bilinear_at(const Tensor& img, int c, float y, float x, float fill = 0.0f) {
    const int h = img.dim(1), w = img.dim(2);
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const float fy = y - y0, fx = x - x0;
    auto at = [&](int yy, int xx) -> float {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return fill;
        return img.data()[(static_cast<int64_t>(c) * h + yy) * w + xx];
    };
    return at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
           at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx;
}

inline Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    auto out = Tensor::zeros({c, out_h, out_w});
    const float sy = static_cast<float>(h) / out_h, sx = static_cast<float>(w) / out_w;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                const float src_y = (y + 0.5f) * sy - 0.5f;
                const float src_x = (x + 0.5f) * sx - 0.5f;
                // clamp into the frame so plain resizing never invents black
                const float cy = std::min(std::max(src_y, 0.0f), static_cast<float>(h - 1));
                const float cx = std::min(std::max(src_x, 0.0f), static_cast<float>(w - 1));
                out.data()[(static_cast<int64_t>(ch) * out_h + y) * out_w + x] =
                    bilinear_at(img, ch, cy, cx);
            }
    return out;
}

// Rotation about the image center, bilinear sampling, black fill outside.
inline Tensor rotate(const Tensor& img, float degrees) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    auto out = Tensor::zeros({c, h, w});
    const float rad = static_cast<float>(degrees * kPi / 180.0);
    const float cs = std::cos(rad), sn = std::sin(rad);
    const float cy = (h - 1) / 2.0f, cx = (w - 1) / 2.0f;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float dy = y - cy, dx = x - cx;
                const float sy = cs * dy + sn * dx + cy;
                const float sx = -sn * dy + cs * dx + cx;
                out.data()[(static_cast<int64_t>(ch) * h + y) * w + x] =
                    bilinear_at(img, ch, sy, sx, 0.0f);
            }
    return out;
}

inline Tensor hflip(const Tensor& img) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    auto out = Tensor::zeros({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out.data()[(static_cast<int64_t>(ch) * h + y) * w + x] =
                    img.data()[(static_cast<int64_t>(ch) * h + y) * w + (w - 1 - x)];
    return out;
}

inline Tensor to_three_channels(const Tensor& img) {
    if (img.dim(0) == 3) return img;
    if (img.dim(0) != 1) throw IoError("to_three_channels: expected 1 or 3 channels");
    const int h = img.dim(1), w = img.dim(2);
    auto out = Tensor::zeros({3, h, w});
    for (int c = 0; c < 3; ++c)
        std::copy(img.data().begin(), img.data().end(),
                  out.data().begin() + static_cast<int64_t>(c) * h * w);
    return out;
}

// Luminance in [0,255].
inline float luminance_at(const Tensor& img, int y, int x) {
    const int h = img.dim(1), w = img.dim(2);
    const int64_t p = static_cast<int64_t>(y) * w + x;
    return 0.299f * img.data()[p] + 0.587f * img.data()[static_cast<int64_t>(h) * w + p] +
           0.114f * img.data()[2 * static_cast<int64_t>(h) * w + p];
}

// ---------------------------------------------------------------------------
// Procedural textures, deterministic in (id, seed, pixel)
// ---------------------------------------------------------------------------
inline float texture_value(int texture_id, uint64_t seed, int y, int x) {
    switch (texture_id) {
        case 1: {  // checkerboard, 4 px cells
            const int phase = static_cast<int>(seed % 4);
            return (((y + phase) / 4 + (x + phase) / 4) % 2) ? 110.0f : 45.0f;
        }
        case 2: {  // diagonal stripes, 6 px period
            const int phase = static_cast<int>(seed % 6);
            return ((y + x + phase) % 6) < 3 ? 105.0f : 40.0f;
        }
        case 3: {  // hash noise blobs: smooth-ish value noise on a 4 px grid
            auto hash01 = [&](int gy, int gx) {
                return static_cast<float>(
                           mix64(seed ^ (static_cast<uint64_t>(gy) << 32) ^ static_cast<uint64_t>(gx)) >>
                           40) /
                       static_cast<float>(1 << 24);
            };
            const float gy = y / 4.0f, gx = x / 4.0f;
            const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
            const float fy = gy - y0, fx = gx - x0;
            const float v = hash01(y0, x0) * (1 - fy) * (1 - fx) + hash01(y0, x0 + 1) * (1 - fy) * fx +
                            hash01(y0 + 1, x0) * fy * (1 - fx) + hash01(y0 + 1, x0 + 1) * fy * fx;
            return 35.0f + 85.0f * v;
        }
        default:
            return 0.0f;
    }
}

}  // namespace debias
