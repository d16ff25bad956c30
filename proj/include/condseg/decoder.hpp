#pragma once

#include <array>
#include <string>

#include "condseg/backbone.hpp"
#include "condseg/layers.hpp"

namespace condseg {

// Size-Aware Decoder: Decoder_s/m/l each fuse two adjacent CDFA outputs
// (deeper map upsampled x2, concatenated, CBR -> CAM -> SAM at the shallower
// input's width). The three results are upsampled to the output size,
// concatenated, collapsed by the fusion convolution and passed through a
// sigmoid.
template <typename T>
void init_decoder(ParamStore<T>& st, const std::array<int, 4>& widths,
                  NormKind norm, Rng& rng) {
    auto one = [&](const std::string& name, int shallow, int deep) {
        const std::string p = "decoder." + name;
        init_cbr(st, p + ".cbr", shallow + deep, shallow, 3, norm, rng);
        init_cam(st, p + ".cam", shallow, rng);
        init_sam(st, p + ".sam", rng);
    };
    one("s", widths[0], widths[1]);
    one("m", widths[1], widths[2]);
    one("l", widths[2], widths[3]);
    init_conv(st, "decoder.fuse", widths[0] + widths[1] + widths[2], 1,
              1, /*bias=*/true, rng);
}

template <typename T>
Var<T> sa_decode(Workspace<T>& ws, const std::array<Feature<T>, 4>& f,
                 int out_size) {
    for (int i = 0; i < 4; ++i)
        require(f[i].level == i + 1, "sa_decode: expects levels F1..F4");

    auto one = [&](const std::string& name, const Feature<T>& shallow,
                   const Feature<T>& deep) {
        const Shape& s = shallow.node->value.shape;
        Var<T> up = upsample_bilinear(deep.node, s.h, s.w);
        Var<T> y = concat_channels<T>({shallow.node, up});
        const std::string p = "decoder." + name;
        y = cbr3_fw(ws, p + ".cbr", y);
        y = cam_fw(ws, p + ".cam", y);
        y = sam_fw(ws, p + ".sam", y);
        return upsample_bilinear(y, out_size, out_size);
    };
    Var<T> ds = one("s", f[0], f[1]);
    Var<T> dm = one("m", f[1], f[2]);
    Var<T> dl = one("l", f[2], f[3]);
    Var<T> fusedin = concat_channels<T>({ds, dm, dl});
    return sigmoid(conv_fw(ws, "decoder.fuse", fusedin));
}

}  // namespace condseg
