#pragma once

#include <array>
#include <string>

#include "condseg/backbone.hpp"
#include "condseg/layers.hpp"

namespace condseg {

// Contrast-Driven Feature Aggregation. Each level i owns:
//   pre{i}.d1/.d2/.d4  parallel dilated 3x3 convs (rates 1,2,4), summed
//   lv{i}.fgproj/.bgproj  1x1 projections of the SID guides to this width
//   lv{i}.fuse1/.fuse2    CBR pre-fusion of the (concatenated) input
//   lv{i}.wv              value projection W_V (C -> C)
//   lv{i}.wfg/.wbg        attention generators (C -> K^4)
// The deep-to-shallow stack concatenates the upsampled previous output with
// the lateral e_i everywhere except level 4, which takes e_4 directly.

inline std::string cdfa_lv(int level) { return "cdfa.lv" + std::to_string(level); }
inline std::string cdfa_pre(int level) { return "cdfa.pre" + std::to_string(level); }

template <typename T>
void init_cdfa(ParamStore<T>& st, const std::array<int, 4>& widths, int c4,
               int K, NormKind norm, Rng& rng) {
    require(K >= 1 && K % 2 == 1, "init_cdfa: K must be odd");
    const int K4 = K * K * K * K;
    for (int i = 1; i <= 4; ++i) {
        const int ci = widths[i - 1];
        for (int rate : {1, 2, 4})
            init_conv(st, cdfa_pre(i) + ".d" + std::to_string(rate), ci, ci, 3,
                      /*bias=*/false, rng);
        const int cin = i == 4 ? ci : ci + widths[i];
        init_conv(st, cdfa_lv(i) + ".fgproj", c4, ci, 1, /*bias=*/true, rng);
        init_conv(st, cdfa_lv(i) + ".bgproj", c4, ci, 1, /*bias=*/true, rng);
        init_cbr(st, cdfa_lv(i) + ".fuse1", cin, ci, 3, norm, rng);
        init_cbr(st, cdfa_lv(i) + ".fuse2", ci, ci, 3, norm, rng);
        init_conv(st, cdfa_lv(i) + ".wv", ci, ci, 1, /*bias=*/false, rng);
        init_conv(st, cdfa_lv(i) + ".wfg", ci, K4, 1, /*bias=*/false, rng);
        init_conv(st, cdfa_lv(i) + ".wbg", ci, K4, 1, /*bias=*/false, rng);
    }
}

// Parallel dilated convolutions (rates 1, 2, 4) summed; spatial size kept.
template <typename T>
Feature<T> pre_enhance(Workspace<T>& ws, const Feature<T>& f) {
    require(f.level >= 1 && f.level <= 4, "pre_enhance: level must be 1..4");
    const std::string p = cdfa_pre(f.level);
    Var<T> e = add(add(conv_fw(ws, p + ".d1", f.node, Conv2dSpec{1, 1, 1}),
                       conv_fw(ws, p + ".d2", f.node, Conv2dSpec{1, 2, 2})),
                   conv_fw(ws, p + ".d4", f.node, Conv2dSpec{1, 4, 4}));
    return Feature<T>{e, f.level};
}

// Adjusts f_fg / f_bg to a level's width and spatial size (1x1 conv +
// bilinear upsample).
template <typename T>
std::pair<Var<T>, Var<T>> cdfa_resize_guides(Workspace<T>& ws, int level,
                                             const Var<T>& ffg,
                                             const Var<T>& fbg, int out_h,
                                             int out_w) {
    Var<T> rf = upsample_bilinear(conv_fw(ws, cdfa_lv(level) + ".fgproj", ffg),
                                  out_h, out_w);
    Var<T> rb = upsample_bilinear(conv_fw(ws, cdfa_lv(level) + ".bgproj", fbg),
                                  out_h, out_w);
    return {rf, rb};
}

// One CDFA application: CBR pre-fusion of F, V = W_V F, attention logits
// from the resized guides, then the windowed two-step weighting with dense
// overlap aggregation.
template <typename T>
Var<T> cdfa_apply(Workspace<T>& ws, int level, const Var<T>& F,
                  const Var<T>& ffg_resized, const Var<T>& fbg_resized,
                  int K) {
    require(K >= 1 && K % 2 == 1, "cdfa_apply: K must be odd");
    const std::string lv = cdfa_lv(level);
    Var<T> fused = cbr3_fw(ws, lv + ".fuse2", cbr3_fw(ws, lv + ".fuse1", F));
    const Shape& fs = fused->value.shape;
    check_same_shape(ffg_resized->value.shape, fs, "cdfa_apply: resized f_fg");
    check_same_shape(fbg_resized->value.shape, fs, "cdfa_apply: resized f_bg");
    const int K4 = K * K * K * K;
    require(ws.store.value(lv + ".wfg.w").shape.n == K4,
            "cdfa_apply: W_fg was initialized for a different K");

    Var<T> V = conv_fw(ws, lv + ".wv", fused);
    Var<T> Afg = conv_fw(ws, lv + ".wfg", ffg_resized);
    Var<T> Abg = conv_fw(ws, lv + ".wbg", fbg_resized);
    return cdfa_attention(V, Afg, Abg, K);
}

// Deep-to-shallow pass over the pre-enhanced maps.
template <typename T>
std::array<Feature<T>, 4> cdfa_stack(Workspace<T>& ws,
                                     const std::array<Feature<T>, 4>& e,
                                     const Var<T>& ffg, const Var<T>& fbg,
                                     int K) {
    for (int i = 0; i < 4; ++i)
        require(e[i].level == i + 1, "cdfa_stack: levels must be e1..e4");

    std::array<Feature<T>, 4> out;
    {
        const Shape& s = e[3].node->value.shape;
        auto [rf, rb] = cdfa_resize_guides(ws, 4, ffg, fbg, s.h, s.w);
        out[3] = Feature<T>{cdfa_apply(ws, 4, e[3].node, rf, rb, K), 4};
    }
    for (int i = 3; i >= 1; --i) {
        const Shape& s = e[i - 1].node->value.shape;
        Var<T> up = upsample_bilinear(out[i].node, s.h, s.w);
        Var<T> F = concat_channels<T>({up, e[i - 1].node});
        auto [rf, rb] = cdfa_resize_guides(ws, i, ffg, fbg, s.h, s.w);
        out[i - 1] = Feature<T>{cdfa_apply(ws, i, F, rf, rb, K), i};
    }
    return out;
}

}  // namespace condseg
