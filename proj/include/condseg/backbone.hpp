#pragma once

#include <array>
#include <string>
#include <vector>

#include "condseg/layers.hpp"

namespace condseg {

// A feature map tagged with its pyramid level (1..4, or 0 for untagged).
template <typename T>
struct Feature {
    Var<T> node;
    int level = 0;
};

// Contract every registered encoder satisfies: f_i has spatial size
// input/strides[i-1] and channels[i-1] channels.
struct EncoderInfo {
    std::array<int, 4> strides = {4, 8, 16, 32};
    std::array<int, 4> channels = {0, 0, 0, 0};
};

inline std::vector<std::string> registered_encoders() {
    return {"tiny-residual", "paper-resnet50-shape"};
}

// Four residual stages behind a stride-4 stem. "tiny-residual" takes its
// widths from the config; "paper-resnet50-shape" pins the ResNet-50 widths
// (256/512/1024/2048) while keeping the same contract.
template <typename T>
EncoderInfo init_encoder(ParamStore<T>& st, const std::string& encoder_id,
                         std::array<int, 4> widths, NormKind norm, Rng& rng) {
    if (encoder_id == "paper-resnet50-shape") {
        widths = {256, 512, 1024, 2048};
    } else if (encoder_id != "tiny-residual") {
        std::string ids;
        for (const auto& id : registered_encoders()) ids += " " + id;
        throw ConfigError("unknown encoder_id \"" + encoder_id +
                          "\"; registered:" + ids);
    }
    EncoderInfo info;
    info.channels = widths;

    init_cbr(st, "encoder.stem.c1", 3, widths[0], 3, norm, rng);
    init_cbr(st, "encoder.stem.c2", widths[0], widths[0], 3, norm, rng);

    auto init_res = [&](const std::string& prefix, int c) {
        init_cbr(st, prefix + ".c1", c, c, 3, norm, rng);
        init_conv(st, prefix + ".c2.conv", c, c, 3, /*bias=*/false, rng);
        init_norm(st, prefix + ".c2.norm", c, norm);
    };
    init_res("encoder.s1.res", widths[0]);
    for (int i = 2; i <= 4; ++i) {
        std::string p = "encoder.s" + std::to_string(i);
        init_cbr(st, p + ".down", widths[i - 2], widths[i - 1], 3, norm, rng);
        init_res(p + ".res", widths[i - 1]);
    }
    return info;
}

// Per spec's make_encoder: fresh ParamStore subtree for a registered id.
template <typename T>
EncoderInfo make_encoder(ParamStore<T>& st, const std::string& encoder_id,
                         std::array<int, 4> widths, NormKind norm, Rng& rng) {
    return init_encoder(st, encoder_id, widths, norm, rng);
}

namespace detail {

template <typename T>
Var<T> res_block(Workspace<T>& ws, const std::string& prefix, Var<T> x) {
    Var<T> y = cbr3_fw(ws, prefix + ".c1", x);
    y = norm_fw(ws, prefix + ".c2.norm",
                conv_fw(ws, prefix + ".c2.conv", y, Conv2dSpec{1, 1, 1}));
    return relu(add(y, x));
}

}  // namespace detail

template <typename T>
std::array<Feature<T>, 4> encode(Workspace<T>& ws, const Var<T>& X) {
    const Shape& xs = X->value.shape;
    require(xs.c == 3, "encode: input must be RGB (B,3,H,W)");
    require(xs.h % 32 == 0 && xs.w % 32 == 0,
            "encode: input size must be divisible by 32");

    Var<T> y = cbr_fw(ws, "encoder.stem.c1", X, Conv2dSpec{2, 1, 1});
    y = cbr_fw(ws, "encoder.stem.c2", y, Conv2dSpec{2, 1, 1});
    Var<T> f1 = detail::res_block(ws, "encoder.s1.res", y);
    Var<T> f2 = detail::res_block(
        ws, "encoder.s2.res", cbr_fw(ws, "encoder.s2.down", f1, Conv2dSpec{2, 1, 1}));
    Var<T> f3 = detail::res_block(
        ws, "encoder.s3.res", cbr_fw(ws, "encoder.s3.down", f2, Conv2dSpec{2, 1, 1}));
    Var<T> f4 = detail::res_block(
        ws, "encoder.s4.res", cbr_fw(ws, "encoder.s4.down", f3, Conv2dSpec{2, 1, 1}));
    return {Feature<T>{f1, 1}, Feature<T>{f2, 2}, Feature<T>{f3, 3},
            Feature<T>{f4, 4}};
}

// Net0 head: the minimal stage-1 prediction head. A single 1x1 channel
// collapse, bilinear upsample to input size, sigmoid.
template <typename T>
void init_net0_head(ParamStore<T>& st, int c4, Rng& rng) {
    init_conv(st, "net0.head", c4, 1, 1, /*bias=*/true, rng);
}

template <typename T>
Var<T> net0_forward(Workspace<T>& ws, const Var<T>& X) {
    auto feats = encode(ws, X);
    Var<T> logits = conv_fw(ws, "net0.head", feats[3].node);
    logits = upsample_bilinear(logits, X->value.shape.h, X->value.shape.w);
    return sigmoid(logits);
}

}  // namespace condseg
