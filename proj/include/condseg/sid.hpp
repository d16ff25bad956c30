#pragma once

#include <string>

#include "condseg/backbone.hpp"
#include "condseg/layers.hpp"

namespace condseg {

// Semantic Information Decoupling: three parallel branches (foreground,
// background, uncertainty) of stacked CBR blocks over f4, plus an auxiliary
// head predicting M^fg / M^bg / M^uc.
template <typename T>
struct DecoupledFeatures {
    Var<T> fg, bg, uc;
};

inline const char* kSidBranches[3] = {"fg", "bg", "uc"};

template <typename T>
void init_sid(ParamStore<T>& st, int c4, NormKind norm, Rng& rng) {
    for (const char* br : kSidBranches) {
        std::string p = std::string("sid.") + br;
        init_cbr(st, p + ".b1", c4, c4, 3, norm, rng);
        init_cbr(st, p + ".b2", c4, c4, 3, norm, rng);
        std::string a = std::string("sid.aux.") + br;
        init_cbr(st, a + ".cbr", c4, c4, 3, norm, rng);
        init_cam(st, a + ".cam", c4, rng);
        init_sam(st, a + ".sam", rng);
        init_conv(st, a + ".out", c4, 1, 1, /*bias=*/true, rng);
    }
}

template <typename T>
DecoupledFeatures<T> sid_forward(Workspace<T>& ws, const Feature<T>& f4) {
    require(f4.level == 4, "sid_forward: expects the level-4 feature map, got level " +
                               std::to_string(f4.level));
    auto branch = [&](const char* br) {
        std::string p = std::string("sid.") + br;
        return cbr3_fw(ws, p + ".b2", cbr3_fw(ws, p + ".b1", f4.node));
    };
    return DecoupledFeatures<T>{branch("fg"), branch("bg"), branch("uc")};
}

// Per branch: CBR -> channel attention -> spatial attention -> 1x1 collapse
// -> bilinear upsample to out_size -> sigmoid.
template <typename T>
struct AuxMasks {
    Var<T> fg, bg, uc;
};

template <typename T>
AuxMasks<T> aux_head(Workspace<T>& ws, const DecoupledFeatures<T>& feats,
                     int out_size) {
    const Shape& fs = feats.fg->value.shape;
    require(out_size >= fs.h && out_size % fs.h == 0,
            "aux_head: out_size must be a positive multiple of f4's spatial size");
    auto head = [&](const Var<T>& f, const char* br) {
        std::string a = std::string("sid.aux.") + br;
        Var<T> y = cbr3_fw(ws, a + ".cbr", f);
        y = cam_fw(ws, a + ".cam", y);
        y = sam_fw(ws, a + ".sam", y);
        y = conv_fw(ws, a + ".out", y);
        y = upsample_bilinear(y, out_size, out_size);
        return sigmoid(y);
    };
    return AuxMasks<T>{head(feats.fg, "fg"), head(feats.bg, "bg"),
                       head(feats.uc, "uc")};
}

}  // namespace condseg
