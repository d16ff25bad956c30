#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "condseg/cdfa.hpp"
#include "condseg/checkpoint.hpp"
#include "condseg/decoder.hpp"
#include "condseg/sid.hpp"

namespace condseg {

// Full second-stage network: encoder -> SID (+aux head) -> pre-enhance ->
// CDFA stack -> SA-Decoder.
template <typename T>
EncoderInfo init_condseg(ParamStore<T>& st, const TrainConfig& cfg, Rng& rng) {
    EncoderInfo info = init_encoder(st, cfg.encoder_id, cfg.channel_widths,
                                    cfg.norm_kind(), rng);
    const int c4 = info.channels[3];
    init_sid(st, c4, cfg.norm_kind(), rng);
    init_cdfa(st, info.channels, c4, cfg.K, cfg.norm_kind(), rng);
    init_decoder(st, info.channels, cfg.norm_kind(), rng);
    return info;
}

template <typename T>
EncoderInfo init_net0(ParamStore<T>& st, const TrainConfig& cfg, Rng& rng) {
    EncoderInfo info = init_encoder(st, cfg.encoder_id, cfg.channel_widths,
                                    cfg.norm_kind(), rng);
    init_net0_head(st, info.channels[3], rng);
    return info;
}

template <typename T>
struct Stage2Output {
    Var<T> m_final, m_fg, m_bg, m_uc;
    std::map<std::string, Tensor<T>> intermediates;  // debug only
};

template <typename T>
Stage2Output<T> condseg_forward(Workspace<T>& ws, const Var<T>& X, int K,
                                bool capture_intermediates = false) {
    const int out_size = X->value.shape.h;
    require(X->value.shape.w == out_size, "condseg_forward: square inputs only");

    auto feats = encode(ws, X);
    DecoupledFeatures<T> dec = sid_forward(ws, feats[3]);
    AuxMasks<T> aux = aux_head(ws, dec, out_size);

    std::array<Feature<T>, 4> e;
    for (int i = 0; i < 4; ++i) e[i] = pre_enhance(ws, feats[i]);
    auto ftilde = cdfa_stack(ws, e, dec.fg, dec.bg, K);
    Var<T> m_final = sa_decode(ws, ftilde, out_size);

    Stage2Output<T> out{m_final, aux.fg, aux.bg, aux.uc, {}};
    if (capture_intermediates) {
        for (int i = 0; i < 4; ++i) {
            out.intermediates["f" + std::to_string(i + 1)] = feats[i].node->value;
            out.intermediates["e" + std::to_string(i + 1)] = e[i].node->value;
            out.intermediates["F" + std::to_string(i + 1)] = ftilde[i].node->value;
        }
        out.intermediates["f_fg"] = dec.fg->value;
        out.intermediates["f_bg"] = dec.bg->value;
        out.intermediates["f_uc"] = dec.uc->value;
    }
    return out;
}

// Two learning-rate groups: everything under "encoder." fine-tunes at
// lr_stage2_encoder, the rest trains at lr_stage2_rest. Every trainable
// tensor lands in exactly one group.
struct ParamGroups {
    std::vector<std::string> encoder;
    std::vector<std::string> rest;
    double lr_encoder = 0, lr_rest = 0;
};

template <typename T>
ParamGroups param_groups(const ParamStore<T>& st, const TrainConfig& cfg) {
    ParamGroups g;
    g.lr_encoder = cfg.lr_stage2_encoder;
    g.lr_rest = cfg.lr_stage2_rest;
    for (const auto& [name, e] : st) {
        if (!e.trainable) continue;
        if (name.rfind("encoder.", 0) == 0)
            g.encoder.push_back(name);
        else
            g.rest.push_back(name);
    }
    require(!g.encoder.empty(),
            "param_groups: no tensors under the \"encoder.\" prefix");
    require(!g.rest.empty(),
            "param_groups: stage-2 model must have non-encoder parameters");
    return g;
}

}  // namespace condseg
