#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "condseg/config.hpp"
#include "condseg/rng.hpp"
#include "condseg/tensor.hpp"

namespace condseg {

namespace augdetail {

inline float luminance(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    float d = mx - mn;
    s = mx <= 0.f ? 0.f : d / mx;
    if (d <= 0.f) {
        h = 0.f;
        return;
    }
    if (mx == r)
        h = (g - b) / d + (g < b ? 6.f : 0.f);
    else if (mx == g)
        h = (b - r) / d + 2.f;
    else
        h = (r - g) / d + 4.f;
    h /= 6.f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    if (s <= 0.f) {
        r = g = b = v;
        return;
    }
    h = h - std::floor(h);
    float hh = h * 6.f;
    int i = static_cast<int>(hh) % 6;
    float f = hh - std::floor(hh);
    float p = v * (1.f - s);
    float q = v * (1.f - s * f);
    float t = v * (1.f - s * (1.f - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

inline void gaussian_blur_inplace(float* img, int C, int H, int W,
                                  double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<float> kernel(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[i + radius] = static_cast<float>(v);
        sum += v;
    }
    for (auto& k : kernel) k = static_cast<float>(k / sum);

    std::vector<float> tmp(static_cast<std::size_t>(H) * W);
    for (int c = 0; c < C; ++c) {
        float* ch = img + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                float acc = 0;
                for (int k = -radius; k <= radius; ++k) {
                    int jj = std::clamp(j + k, 0, W - 1);
                    acc += kernel[k + radius] * ch[i * W + jj];
                }
                tmp[i * W + j] = acc;
            }
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                float acc = 0;
                for (int k = -radius; k <= radius; ++k) {
                    int ii = std::clamp(i + k, 0, H - 1);
                    acc += kernel[k + radius] * tmp[ii * W + j];
                }
                ch[i * W + j] = acc;
            }
    }
}

}  // namespace augdetail

// Photometric-only Aug(.): brightness, contrast, saturation, hue, random
// grayscale, random Gaussian blur. Never moves a pixel; output stays
// spatially aligned with the input and clamped to [0,1]. All draws happen
// up front per image (7 per image) so rng consumption is independent of
// which transforms fire.
inline Tensor<float> strong_augment(const Tensor<float>& X,
                                    const AugPolicy& pol, Rng& rng) {
    require(X.shape.c == 3, "strong_augment: input must be RGB (B,3,H,W)");
    const int B = X.shape.n, H = X.shape.h, W = X.shape.w;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor<float> out = X;

    for (int b = 0; b < B; ++b) {
        const double brightness = rng.uniform(pol.brightness_lo, pol.brightness_hi);
        const double contrast = rng.uniform(pol.contrast_lo, pol.contrast_hi);
        const double saturation = rng.uniform(pol.saturation_lo, pol.saturation_hi);
        double hue = rng.uniform(pol.hue_lo, pol.hue_hi);
        const bool to_gray = rng.bernoulli(pol.p_grayscale);
        const bool do_blur = rng.bernoulli(pol.p_blur);
        const double sigma = rng.uniform(pol.blur_sigma_lo, pol.blur_sigma_hi);
        hue -= std::floor(hue);  // shift by a whole turn is the identity

        float* r = out.ptr() + (static_cast<std::size_t>(b) * 3 + 0) * hw;
        float* g = out.ptr() + (static_cast<std::size_t>(b) * 3 + 1) * hw;
        float* bl = out.ptr() + (static_cast<std::size_t>(b) * 3 + 2) * hw;

        if (brightness != 1.0)
            for (std::size_t i = 0; i < hw; ++i) {
                r[i] *= static_cast<float>(brightness);
                g[i] *= static_cast<float>(brightness);
                bl[i] *= static_cast<float>(brightness);
            }
        if (contrast != 1.0) {
            double mean = 0;
            for (std::size_t i = 0; i < hw; ++i)
                mean += augdetail::luminance(r[i], g[i], bl[i]);
            mean /= static_cast<double>(hw);
            const float m = static_cast<float>(mean), c = static_cast<float>(contrast);
            for (std::size_t i = 0; i < hw; ++i) {
                r[i] = (r[i] - m) * c + m;
                g[i] = (g[i] - m) * c + m;
                bl[i] = (bl[i] - m) * c + m;
            }
        }
        if (saturation != 1.0) {
            const float s = static_cast<float>(saturation);
            for (std::size_t i = 0; i < hw; ++i) {
                float L = augdetail::luminance(r[i], g[i], bl[i]);
                r[i] = (r[i] - L) * s + L;
                g[i] = (g[i] - L) * s + L;
                bl[i] = (bl[i] - L) * s + L;
            }
        }
        if (hue != 0.0) {
            for (std::size_t i = 0; i < hw; ++i) {
                float rr = std::clamp(r[i], 0.f, 1.f);
                float gg = std::clamp(g[i], 0.f, 1.f);
                float bb = std::clamp(bl[i], 0.f, 1.f);
                float h, s, v;
                augdetail::rgb_to_hsv(rr, gg, bb, h, s, v);
                augdetail::hsv_to_rgb(h + static_cast<float>(hue), s, v, r[i],
                                      g[i], bl[i]);
            }
        }
        if (to_gray) {
            for (std::size_t i = 0; i < hw; ++i) {
                float L = augdetail::luminance(r[i], g[i], bl[i]);
                r[i] = g[i] = bl[i] = L;
            }
        }
        if (do_blur)
            augdetail::gaussian_blur_inplace(out.sample(b), 3, H, W, sigma);

        for (std::size_t i = 0; i < hw; ++i) {
            r[i] = std::clamp(r[i], 0.f, 1.f);
            g[i] = std::clamp(g[i], 0.f, 1.f);
            bl[i] = std::clamp(bl[i], 0.f, 1.f);
        }
    }
    return out;
}

namespace augdetail {

// k quarter-turns counterclockwise on a square (C,H,W) block.
inline void rot90(const float* src, float* dst, int C, int H, int W, int k) {
    for (int c = 0; c < C; ++c) {
        const float* s = src + static_cast<std::size_t>(c) * H * W;
        float* d = dst + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                int ii, jj;
                switch (k & 3) {
                    case 0: ii = i; jj = j; break;
                    case 1: ii = W - 1 - j; jj = i; break;
                    case 2: ii = H - 1 - i; jj = W - 1 - j; break;
                    default: ii = j; jj = H - 1 - i; break;
                }
                d[ii * W + jj] = s[i * W + j];
            }
    }
}

inline void flip_h(float* img, int C, int H, int W) {
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W / 2; ++j)
                std::swap(img[(static_cast<std::size_t>(c) * H + i) * W + j],
                          img[(static_cast<std::size_t>(c) * H + i) * W + W - 1 - j]);
}

inline void flip_v(float* img, int C, int H, int W) {
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H / 2; ++i)
            for (int j = 0; j < W; ++j)
                std::swap(img[(static_cast<std::size_t>(c) * H + i) * W + j],
                          img[(static_cast<std::size_t>(c) * H + H - 1 - i) * W + j]);
}

}  // namespace augdetail

// Geometric training augmentation: random horizontal/vertical flip and a
// right-angle rotation, applied identically to image and mask. Right angles
// keep the mask exactly binary (pure index permutations).
inline std::pair<Tensor<float>, Tensor<float>> simple_augment(
    const Tensor<float>& X, const Tensor<float>& Y, Rng& rng) {
    require(X.shape.n == Y.shape.n && X.shape.h == Y.shape.h &&
                X.shape.w == Y.shape.w,
            "simple_augment: image and mask must be spatially aligned");
    require(X.shape.h == X.shape.w, "simple_augment: square images only");
    Tensor<float> Xo = X, Yo = Y;
    const int H = X.shape.h, W = X.shape.w;
    std::vector<float> buf(static_cast<std::size_t>(std::max(X.shape.c, Y.shape.c)) * H * W);
    for (int b = 0; b < X.shape.n; ++b) {
        const bool hflip = rng.bernoulli(0.5);
        const bool vflip = rng.bernoulli(0.5);
        const int k = rng.uniform_int(4);
        if (hflip) {
            augdetail::flip_h(Xo.sample(b), X.shape.c, H, W);
            augdetail::flip_h(Yo.sample(b), Y.shape.c, H, W);
        }
        if (vflip) {
            augdetail::flip_v(Xo.sample(b), X.shape.c, H, W);
            augdetail::flip_v(Yo.sample(b), Y.shape.c, H, W);
        }
        if (k != 0) {
            augdetail::rot90(Xo.sample(b), buf.data(), X.shape.c, H, W, k);
            std::copy(buf.begin(),
                      buf.begin() + static_cast<std::size_t>(X.shape.c) * H * W,
                      Xo.sample(b));
            augdetail::rot90(Yo.sample(b), buf.data(), Y.shape.c, H, W, k);
            std::copy(buf.begin(),
                      buf.begin() + static_cast<std::size_t>(Y.shape.c) * H * W,
                      Yo.sample(b));
        }
    }
    return {std::move(Xo), std::move(Yo)};
}

}  // namespace condseg
