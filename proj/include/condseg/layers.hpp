#pragma once

#include <map>
#include <string>

#include "condseg/config.hpp"
#include "condseg/nn.hpp"
#include "condseg/param_store.hpp"
#include "condseg/rng.hpp"

namespace condseg {

// Per-forward-pass view of a ParamStore. Hands out leaf nodes (one per name,
// cached so reuse within a pass accumulates gradients), and carries the
// phase. collect_grads() pushes leaf gradients back into the store.
template <typename T>
struct Workspace {
    ParamStore<T>& store;
    Phase phase = Phase::train;
    std::map<std::string, Var<T>> leaves;

    Workspace(ParamStore<T>& s, Phase ph) : store(s), phase(ph) {}

    Var<T> p(const std::string& name) {
        auto it = leaves.find(name);
        if (it != leaves.end()) return it->second;
        auto& e = store.at(name);
        Var<T> v = leaf<T>(e.value, e.trainable);
        leaves.emplace(name, v);
        return v;
    }

    Tensor<T>& raw(const std::string& name) { return store.value(name); }
};

template <typename T>
void collect_grads(Workspace<T>& ws) {
    for (auto& [name, node] : ws.leaves) {
        if (!node->requires_grad || node->grad.size() == 0) continue;
        auto& g = ws.store.grad(name);
        for (std::size_t i = 0; i < g.size(); ++i)
            g.data[i] += node->grad.data[i];
    }
}

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------

template <typename T>
void init_conv(ParamStore<T>& st, const std::string& prefix, int cin, int cout,
               int k, bool bias, Rng& rng) {
    double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    st.add(prefix + ".w", rand_normal<T>({cout, cin, k, k}, rng, 0.0, stddev));
    if (bias) st.add(prefix + ".b", Tensor<T>({1, cout, 1, 1}));
}

template <typename T>
void init_norm(ParamStore<T>& st, const std::string& prefix, int c,
               NormKind kind) {
    st.add(prefix + ".g", Tensor<T>::full({1, c, 1, 1}, T(1)));
    st.add(prefix + ".b", Tensor<T>({1, c, 1, 1}));
    if (kind == NormKind::batch) {
        st.add(prefix + ".rm", Tensor<T>({1, c, 1, 1}), /*trainable=*/false);
        st.add(prefix + ".rv", Tensor<T>::full({1, c, 1, 1}, T(1)),
               /*trainable=*/false);
    }
}

// conv -> norm -> relu
template <typename T>
void init_cbr(ParamStore<T>& st, const std::string& prefix, int cin, int cout,
              int k, NormKind kind, Rng& rng) {
    init_conv(st, prefix + ".conv", cin, cout, k, /*bias=*/false, rng);
    init_norm(st, prefix + ".norm", cout, kind);
}

// channel attention: GAP -> bottleneck MLP -> sigmoid gate
template <typename T>
void init_cam(ParamStore<T>& st, const std::string& prefix, int c, Rng& rng) {
    int cr = std::max(c / 4, 1);
    init_conv(st, prefix + ".fc1", c, cr, 1, /*bias=*/true, rng);
    init_conv(st, prefix + ".fc2", cr, c, 1, /*bias=*/true, rng);
}

// spatial attention: channel mean+max -> 7x7 conv -> sigmoid gate
template <typename T>
void init_sam(ParamStore<T>& st, const std::string& prefix, Rng& rng) {
    init_conv(st, prefix + ".conv", 2, 1, 7, /*bias=*/true, rng);
}

// ---------------------------------------------------------------------------
// forward helpers
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv_fw(Workspace<T>& ws, const std::string& prefix, const Var<T>& x,
               Conv2dSpec sp = {}) {
    Var<T> b = ws.store.has(prefix + ".b") ? ws.p(prefix + ".b") : nullptr;
    return conv2d(x, ws.p(prefix + ".w"), b, sp);
}

inline int norm_groups(int c) {
    for (int g : {8, 4, 2})
        if (c % g == 0) return g;
    return 1;
}

template <typename T>
Var<T> norm_fw(Workspace<T>& ws, const std::string& prefix, const Var<T>& x) {
    if (ws.store.has(prefix + ".rm")) {
        return batchnorm(x, ws.p(prefix + ".g"), ws.p(prefix + ".b"),
                         &ws.raw(prefix + ".rm"), &ws.raw(prefix + ".rv"),
                         ws.phase);
    }
    return groupnorm(x, ws.p(prefix + ".g"), ws.p(prefix + ".b"),
                     norm_groups(x->value.shape.c));
}

template <typename T>
Var<T> cbr_fw(Workspace<T>& ws, const std::string& prefix, const Var<T>& x,
              Conv2dSpec sp) {
    return relu(norm_fw(ws, prefix + ".norm",
                        conv_fw(ws, prefix + ".conv", x, sp)));
}

// 3x3 stride-1 CBR, the default block everywhere.
template <typename T>
Var<T> cbr3_fw(Workspace<T>& ws, const std::string& prefix, const Var<T>& x) {
    return cbr_fw(ws, prefix, x, Conv2dSpec{1, 1, 1});
}

template <typename T>
Var<T> cam_fw(Workspace<T>& ws, const std::string& prefix, const Var<T>& x) {
    Var<T> g = global_avg_pool(x);
    g = relu(conv_fw(ws, prefix + ".fc1", g));
    g = sigmoid(conv_fw(ws, prefix + ".fc2", g));
    return mul_bcast(x, g);
}

template <typename T>
Var<T> sam_fw(Workspace<T>& ws, const std::string& prefix, const Var<T>& x) {
    Var<T> s = concat_channels<T>({channel_mean(x), channel_max(x)});
    s = sigmoid(conv_fw(ws, prefix + ".conv", s, Conv2dSpec{1, 3, 1}));
    return mul_bcast(x, s);
}

}  // namespace condseg
