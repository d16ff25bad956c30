#pragma once

#include <cmath>
#include <vector>

#include "condseg/config.hpp"
#include "condseg/param_store.hpp"
#include "condseg/tensor.hpp"

namespace condseg {

// Brute-force CDFA oracle. Everything here is written as explicit scalar
// loops straight from the equations and shares no code with the optimized
// path (no autodiff, no Eigen, its own conv/norm/softmax). Eq. 14 is
// evaluated in gather form: the output at (i,j) sums, over each window
// centered at a neighbor, the weighted slot that covers (i,j) -- whereas the
// optimized kernel scatters. Tiny shapes only.

template <typename T>
struct CdfaRefWeights {
    Tensor<T> fuse1_w, fuse1_gamma, fuse1_beta, fuse1_rm, fuse1_rv;
    Tensor<T> fuse2_w, fuse2_gamma, fuse2_beta, fuse2_rm, fuse2_rv;
    Tensor<T> wv, wfg, wbg;
    bool batch_stats = true;  // false: group statistics
};

template <typename T>
CdfaRefWeights<T> load_cdfa_ref_weights(const ParamStore<T>& st, int level) {
    const std::string lv = "cdfa.lv" + std::to_string(level);
    CdfaRefWeights<T> w;
    w.fuse1_w = st.value(lv + ".fuse1.conv.w");
    w.fuse1_gamma = st.value(lv + ".fuse1.norm.g");
    w.fuse1_beta = st.value(lv + ".fuse1.norm.b");
    w.fuse2_w = st.value(lv + ".fuse2.conv.w");
    w.fuse2_gamma = st.value(lv + ".fuse2.norm.g");
    w.fuse2_beta = st.value(lv + ".fuse2.norm.b");
    w.batch_stats = st.has(lv + ".fuse1.norm.rm");
    if (w.batch_stats) {
        w.fuse1_rm = st.value(lv + ".fuse1.norm.rm");
        w.fuse1_rv = st.value(lv + ".fuse1.norm.rv");
        w.fuse2_rm = st.value(lv + ".fuse2.norm.rm");
        w.fuse2_rv = st.value(lv + ".fuse2.norm.rv");
    }
    w.wv = st.value(lv + ".wv.w");
    w.wfg = st.value(lv + ".wfg.w");
    w.wbg = st.value(lv + ".wbg.w");
    return w;
}

namespace refdetail {

template <typename T>
Tensor<T> conv3x3_ref(const Tensor<T>& x, const Tensor<T>& w) {
    const int B = x.shape.n, Ci = x.shape.c, H = x.shape.h, W = x.shape.w;
    const int Co = w.shape.n;
    Tensor<T> y({B, Co, H, W});
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = 0;
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int kh = 0; kh < 3; ++kh)
                            for (int kw = 0; kw < 3; ++kw) {
                                int ii = i + kh - 1, jj = j + kw - 1;
                                if (ii < 0 || ii >= H || jj < 0 || jj >= W)
                                    continue;
                                acc += static_cast<double>(
                                           w.at(co, ci, kh, kw)) *
                                       x.at(b, ci, ii, jj);
                            }
                    y.at(b, co, i, j) = static_cast<T>(acc);
                }
    return y;
}

template <typename T>
Tensor<T> norm_ref(const Tensor<T>& x, const Tensor<T>& gamma,
                   const Tensor<T>& beta, const Tensor<T>& rm,
                   const Tensor<T>& rv, bool batch_stats, bool training,
                   double eps = 1e-5) {
    const int B = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
    Tensor<T> y(x.shape);
    if (batch_stats) {
        for (int c = 0; c < C; ++c) {
            double mu, var;
            if (training) {
                double sum = 0, sum2 = 0;
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) {
                            double v = x.at(b, c, i, j);
                            sum += v;
                            sum2 += v * v;
                        }
                const double n = static_cast<double>(B) * H * W;
                mu = sum / n;
                var = sum2 / n - mu * mu;
                if (var < 0) var = 0;
            } else {
                mu = rm.at(0, c, 0, 0);
                var = rv.at(0, c, 0, 0);
            }
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int b = 0; b < B; ++b)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        y.at(b, c, i, j) = static_cast<T>(
                            static_cast<double>(gamma.at(0, c, 0, 0)) *
                                (x.at(b, c, i, j) - mu) * inv +
                            beta.at(0, c, 0, 0));
        }
    } else {
        int groups = 1;
        if (C % 8 == 0) groups = 8;
        else if (C % 4 == 0) groups = 4;
        else if (C % 2 == 0) groups = 2;
        const int cg = C / groups;
        for (int b = 0; b < B; ++b)
            for (int g = 0; g < groups; ++g) {
                double sum = 0, sum2 = 0;
                for (int cc = 0; cc < cg; ++cc)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) {
                            double v = x.at(b, g * cg + cc, i, j);
                            sum += v;
                            sum2 += v * v;
                        }
                const double n = static_cast<double>(cg) * H * W;
                double mu = sum / n;
                double var = sum2 / n - mu * mu;
                if (var < 0) var = 0;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (int cc = 0; cc < cg; ++cc) {
                    const int c = g * cg + cc;
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            y.at(b, c, i, j) = static_cast<T>(
                                static_cast<double>(gamma.at(0, c, 0, 0)) *
                                    (x.at(b, c, i, j) - mu) * inv +
                                beta.at(0, c, 0, 0));
                }
            }
    }
    return y;
}

template <typename T>
void relu_ref(Tensor<T>& x) {
    for (auto& v : x.data)
        if (v < T(0)) v = T(0);
}

}  // namespace refdetail

template <typename T>
Tensor<T> cdfa_reference(const Tensor<T>& F, const Tensor<T>& ffg_resized,
                         const Tensor<T>& fbg_resized,
                         const CdfaRefWeights<T>& w, int K,
                         bool training = true) {
    require(K >= 1 && K % 2 == 1, "cdfa_reference: K must be odd");
    require(F.shape.h <= 8 && F.shape.w <= 8,
            "cdfa_reference: tiny shapes only (H,W <= 8)");

    using namespace refdetail;
    Tensor<T> fused = norm_ref(conv3x3_ref(F, w.fuse1_w), w.fuse1_gamma,
                               w.fuse1_beta, w.fuse1_rm, w.fuse1_rv,
                               w.batch_stats, training);
    relu_ref(fused);
    fused = norm_ref(conv3x3_ref(fused, w.fuse2_w), w.fuse2_gamma,
                     w.fuse2_beta, w.fuse2_rm, w.fuse2_rv, w.batch_stats,
                     training);
    relu_ref(fused);

    const int B = fused.shape.n, C = fused.shape.c, H = fused.shape.h,
              W = fused.shape.w;
    check_same_shape(ffg_resized.shape, fused.shape, "cdfa_reference: f_fg");
    check_same_shape(fbg_resized.shape, fused.shape, "cdfa_reference: f_bg");
    const int K2 = K * K, K4 = K2 * K2;
    require(w.wfg.shape.n == K4 && w.wbg.shape.n == K4,
            "cdfa_reference: W_fg/W_bg must map to K^4");
    const int r0 = K / 2;

    // V = W_V . F per position
    Tensor<T> V({B, C, H, W});
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < C; ++co)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = 0;
                    for (int ci = 0; ci < C; ++ci)
                        acc += static_cast<double>(w.wv.at(co, ci, 0, 0)) *
                               fused.at(b, ci, i, j);
                    V.at(b, co, i, j) = static_cast<T>(acc);
                }

    // Weighted window Wt (K^2 x C) for the window centered at (ic, jc).
    auto weighted_window = [&](int b, int ic, int jc, std::vector<double>& Wt) {
        std::vector<double> afg(K4), abg(K4), gfg(K4), gbg(K4);
        for (int tix = 0; tix < K4; ++tix) {
            double af = 0, ab = 0;
            for (int ci = 0; ci < C; ++ci) {
                af += static_cast<double>(w.wfg.at(tix, ci, 0, 0)) *
                      ffg_resized.at(b, ci, ic, jc);
                ab += static_cast<double>(w.wbg.at(tix, ci, 0, 0)) *
                      fbg_resized.at(b, ci, ic, jc);
            }
            afg[tix] = af;
            abg[tix] = ab;
        }
        auto softmax_row = [&](const std::vector<double>& a, int r,
                               std::vector<double>& g) {
            double m = a[r * K2];
            for (int s = 1; s < K2; ++s) m = std::max(m, a[r * K2 + s]);
            double z = 0;
            for (int s = 0; s < K2; ++s) {
                g[r * K2 + s] = std::exp(a[r * K2 + s] - m);
                z += g[r * K2 + s];
            }
            for (int s = 0; s < K2; ++s) g[r * K2 + s] /= z;
        };
        for (int r = 0; r < K2; ++r) {
            softmax_row(afg, r, gfg);
            softmax_row(abg, r, gbg);
        }
        // U = Gbg x Vwin, Wt = Gfg x U, with zero padding outside the image
        std::vector<double> U(static_cast<std::size_t>(K2) * C, 0.0);
        for (int r = 0; r < K2; ++r)
            for (int s = 0; s < K2; ++s) {
                const int p = s / K, q = s % K;
                const int ii = ic + p - r0, jj = jc + q - r0;
                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                for (int c = 0; c < C; ++c)
                    U[r * C + c] +=
                        gbg[r * K2 + s] * static_cast<double>(V.at(b, c, ii, jj));
            }
        Wt.assign(static_cast<std::size_t>(K2) * C, 0.0);
        for (int r = 0; r < K2; ++r)
            for (int s = 0; s < K2; ++s)
                for (int c = 0; c < C; ++c)
                    Wt[r * C + c] += gfg[r * K2 + s] * U[s * C + c];
    };

    // Eq. 14, gather form: output (i,j) collects slot (K-1-m, K-1-n) of the
    // window centered at (i+m-r0, j+n-r0).
    Tensor<T> out({B, C, H, W});
    std::vector<double> Wt;
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                for (int m = 0; m < K; ++m)
                    for (int n = 0; n < K; ++n) {
                        const int ic = i + m - r0, jc = j + n - r0;
                        if (ic < 0 || ic >= H || jc < 0 || jc >= W) continue;
                        weighted_window(b, ic, jc, Wt);
                        const int slot = (K - 1 - m) * K + (K - 1 - n);
                        for (int c = 0; c < C; ++c)
                            out.at(b, c, i, j) += static_cast<T>(Wt[slot * C + c]);
                    }
    return out;
}

}  // namespace condseg
