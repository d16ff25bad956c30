#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "condseg/config.hpp"
#include "condseg/image_io.hpp"
#include "condseg/rng.hpp"
#include "condseg/tensor.hpp"

namespace condseg {

struct SampleRecord {
    std::string image_id;
    Tensor<float> image;  // (1,3,S,S) in [0,1]
    Tensor<float> mask;   // (1,1,S,S) in {0,1}
    std::string source;   // "real" | "synthetic"
};

// ---------------------------------------------------------------------------
// plain resize (no autodiff)
// ---------------------------------------------------------------------------

namespace datadetail {

// align_corners=false, same convention as the model's upsampling.
inline Tensor<float> resize_bilinear(const Tensor<float>& x, int oh, int ow) {
    const int H = x.shape.h, W = x.shape.w;
    Tensor<float> y({x.shape.n, x.shape.c, oh, ow});
    for (int b = 0; b < x.shape.n; ++b)
        for (int c = 0; c < x.shape.c; ++c)
            for (int i = 0; i < oh; ++i) {
                double sy = (i + 0.5) * static_cast<double>(H) / oh - 0.5;
                sy = std::max(sy, 0.0);
                int y0 = std::min(static_cast<int>(sy), H - 1);
                int y1 = std::min(y0 + 1, H - 1);
                double fy = sy - y0;
                for (int j = 0; j < ow; ++j) {
                    double sx = (j + 0.5) * static_cast<double>(W) / ow - 0.5;
                    sx = std::max(sx, 0.0);
                    int x0 = std::min(static_cast<int>(sx), W - 1);
                    int x1 = std::min(x0 + 1, W - 1);
                    double fx = sx - x0;
                    y.at(b, c, i, j) = static_cast<float>(
                        (1 - fy) * (1 - fx) * x.at(b, c, y0, x0) +
                        (1 - fy) * fx * x.at(b, c, y0, x1) +
                        fy * (1 - fx) * x.at(b, c, y1, x0) +
                        fy * fx * x.at(b, c, y1, x1));
                }
            }
    return y;
}

inline Tensor<float> resize_nearest(const Tensor<float>& x, int oh, int ow) {
    const int H = x.shape.h, W = x.shape.w;
    Tensor<float> y({x.shape.n, x.shape.c, oh, ow});
    for (int b = 0; b < x.shape.n; ++b)
        for (int c = 0; c < x.shape.c; ++c)
            for (int i = 0; i < oh; ++i) {
                int si = std::min(
                    static_cast<int>((i + 0.5) * static_cast<double>(H) / oh),
                    H - 1);
                for (int j = 0; j < ow; ++j) {
                    int sj = std::min(
                        static_cast<int>((j + 0.5) * static_cast<double>(W) / ow),
                        W - 1);
                    y.at(b, c, i, j) = x.at(b, c, si, sj);
                }
            }
    return y;
}

}  // namespace datadetail

// ---------------------------------------------------------------------------
// folder ingestion (Kvasir convention: parallel images/ and masks/ dirs)
// ---------------------------------------------------------------------------

inline std::vector<SampleRecord> load_folder(const std::string& images_dir,
                                             const std::string& masks_dir,
                                             int size) {
    namespace fs = std::filesystem;
    require(fs::is_directory(images_dir), "not a directory: " + images_dir);
    require(fs::is_directory(masks_dir), "not a directory: " + masks_dir);

    auto is_image = [](const fs::path& p) {
        std::string e = p.extension().string();
        for (auto& ch : e) ch = static_cast<char>(std::tolower(
                               static_cast<unsigned char>(ch)));
        return e == ".png" || e == ".jpg" || e == ".jpeg";
    };
    std::map<std::string, fs::path> masks;
    for (const auto& de : fs::directory_iterator(masks_dir))
        if (de.is_regular_file() && is_image(de.path()))
            masks[de.path().stem().string()] = de.path();

    std::vector<fs::path> images;
    for (const auto& de : fs::directory_iterator(images_dir))
        if (de.is_regular_file() && is_image(de.path()))
            images.push_back(de.path());
    std::sort(images.begin(), images.end());

    std::vector<SampleRecord> out;
    for (const auto& ip : images) {
        const std::string stem = ip.stem().string();
        auto mit = masks.find(stem);
        if (mit == masks.end())
            throw std::runtime_error("no mask found for image \"" + stem +
                                     "\" in " + masks_dir);
        SampleRecord rec;
        rec.image_id = stem;
        rec.source = "real";
        rec.image = datadetail::resize_bilinear(read_image_rgb(ip.string()),
                                                size, size);
        Tensor<float> m = datadetail::resize_nearest(
            read_image_gray(mit->second.string()), size, size);
        // stored masks are usually 0/255: threshold at half the max value
        float mx = 0.f;
        for (float v : m.data) mx = std::max(mx, v);
        for (auto& v : m.data) v = (mx > 0.f && v >= 0.5f * mx) ? 1.f : 0.f;
        rec.mask = std::move(m);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// deterministic split
// ---------------------------------------------------------------------------

struct SplitResult {
    std::vector<SampleRecord> train, val, test;
};

inline SplitResult split(const std::vector<SampleRecord>& records,
                         std::array<double, 3> fractions, std::uint64_t seed) {
    double sum = fractions[0] + fractions[1] + fractions[2];
    require(std::abs(sum - 1.0) < 1e-6, "split: fractions must sum to 1");
    for (double f : fractions) require(f >= 0, "split: fractions must be >= 0");

    std::vector<std::size_t> idx(records.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed, "split");
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(static_cast<int>(i))]);

    const std::size_t n = records.size();
    std::size_t n_train = static_cast<std::size_t>(
        std::floor(fractions[0] * static_cast<double>(n) + 0.5));
    std::size_t n_val = static_cast<std::size_t>(
        std::floor(fractions[1] * static_cast<double>(n) + 0.5));
    if (n_train + n_val > n) n_val = n - n_train;

    SplitResult out;
    for (std::size_t i = 0; i < n; ++i) {
        const SampleRecord& r = records[idx[i]];
        if (i < n_train) out.train.push_back(r);
        else if (i < n_train + n_val) out.val.push_back(r);
        else out.test.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic low-contrast blob generator
// ---------------------------------------------------------------------------

namespace datadetail {

struct Ellipse {
    double cx, cy, rx, ry, phi;
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double c = std::cos(phi), s = std::sin(phi);
        const double u = (c * dx + s * dy) / rx;
        const double v = (-s * dx + c * dy) / ry;
        return u * u + v * v <= 1.0;
    }
};

}  // namespace datadetail

// Background with a smooth illumination ramp plus Gaussian noise; 1..k
// elliptical blobs whose intensity sits `contrast` above the base. The mask
// is the exact analytic union of the ellipses (pixel-center test). With
// co-occurrence on, multi-blob images use size-correlated, clustered blobs.
inline std::vector<SampleRecord> gen_synthetic(const SynthSpec& spec) {
    const int S = spec.size;
    Rng rng(spec.seed, "synth");
    std::vector<SampleRecord> out;
    out.reserve(spec.n_images);

    for (int n = 0; n < spec.n_images; ++n) {
        SampleRecord rec;
        rec.image_id = "synth_" + std::to_string(n);
        rec.source = "synthetic";
        rec.image = Tensor<float>({1, 3, S, S});
        rec.mask = Tensor<float>({1, 1, S, S});

        const double base = rng.uniform(0.2, 0.55);
        std::array<double, 3> tint = {rng.uniform(-0.04, 0.04),
                                      rng.uniform(-0.04, 0.04),
                                      rng.uniform(-0.04, 0.04)};
        const double theta = rng.uniform(0.0, 6.283185307179586);
        const double gx = std::cos(theta), gy = std::sin(theta);

        const int count = spec.blob_count_lo +
                          rng.uniform_int(spec.blob_count_hi -
                                          spec.blob_count_lo + 1);
        std::vector<datadetail::Ellipse> blobs;
        std::vector<double> contrast(count);
        double r_first = rng.uniform(spec.radius_lo, spec.radius_hi) * S;
        double cx_first = rng.uniform(0.18, 0.82) * S;
        double cy_first = rng.uniform(0.18, 0.82) * S;
        for (int k = 0; k < count; ++k) {
            double r = r_first, cx = cx_first, cy = cy_first;
            if (k > 0) {
                if (spec.co_occurrence) {
                    // co-occurring entities share a size scale and cluster
                    r = r_first * rng.uniform(0.85, 1.15);
                    cx = std::clamp(cx_first + rng.uniform(-0.3, 0.3) * S,
                                    0.1 * S, 0.9 * S);
                    cy = std::clamp(cy_first + rng.uniform(-0.3, 0.3) * S,
                                    0.1 * S, 0.9 * S);
                } else {
                    r = rng.uniform(spec.radius_lo, spec.radius_hi) * S;
                    cx = rng.uniform(0.18, 0.82) * S;
                    cy = rng.uniform(0.18, 0.82) * S;
                }
            }
            datadetail::Ellipse e;
            e.cx = cx;
            e.cy = cy;
            e.rx = r * rng.uniform(0.8, 1.2);
            e.ry = r * rng.uniform(0.8, 1.2);
            e.phi = rng.uniform(0.0, 3.141592653589793);
            blobs.push_back(e);
            contrast[k] = rng.uniform(spec.contrast_lo, spec.contrast_hi);
        }

        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                const double px = j + 0.5, py = i + 0.5;
                double v = base;
                bool fg = false;
                for (int k = 0; k < count; ++k)
                    if (blobs[k].contains(px, py)) {
                        v = std::min(base + contrast[k], 0.98);
                        fg = true;
                        break;
                    }
                rec.mask.at(0, 0, i, j) = fg ? 1.f : 0.f;
                const double ramp =
                    spec.illumination *
                    ((gx * (px / S - 0.5) + gy * (py / S - 0.5)));
                for (int c = 0; c < 3; ++c) {
                    double val = v + tint[c] + ramp;
                    if (spec.noise_sigma > 0)
                        val += spec.noise_sigma * rng.normal();
                    rec.image.at(0, c, i, j) =
                        static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace condseg
