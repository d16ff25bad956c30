#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "condseg/nn.hpp"
#include "condseg/tensor.hpp"

namespace condseg {

inline constexpr double kBceClamp = 1e-7;   // clamp for log arguments
inline constexpr double kDiceSmooth = 1e-6; // added to numerator and denominator
inline constexpr double kBetaClamp = 1e-4;  // guards 1/tanh at zero coverage

template <typename T>
struct LossValue {
    Var<T> node;
    std::map<std::string, T> breakdown;
    T value() const { return node->value.data[0]; }
};

// -L = mean over all pixels (and batch) of Y log M + (1-Y) log(1-M),
// with M clamped to [eps, 1-eps].
template <typename T>
LossValue<T> bce_loss(const Tensor<T>& Y, const Var<T>& M) {
    check_same_shape(Y.shape, M->value.shape, "bce_loss");
    const std::size_t N = Y.size();
    const T eps = static_cast<T>(kBceClamp);
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        T m = std::min(std::max(M->value.data[i], eps), T(1) - eps);
        T y = Y.data[i];
        acc -= y * std::log(static_cast<double>(m)) +
               (T(1) - y) * std::log(1.0 - static_cast<double>(m));
    }
    Tensor<T> v = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
    auto out = make_op<T>(std::move(v), {M});
    if (out->requires_grad)
        out->backward_fn = [M, Y, eps, N](Node<T>& self) {
            const T d = self.grad.data[0];
            auto& gm = M->ensure_grad();
            for (std::size_t i = 0; i < N; ++i) {
                T m = M->value.data[i];
                if (m <= eps || m >= T(1) - eps) continue;  // clamp is flat
                T y = Y.data[i];
                gm.data[i] += d * (-y / m + (T(1) - y) / (T(1) - m)) /
                              static_cast<T>(N);
            }
        };
    return LossValue<T>{out, {{"bce", out->value.data[0]}}};
}

// 1 - (2 sum(MY) + eps) / (sum(M) + sum(Y) + eps), summed over the whole
// batch (N is the total pixel count, matching the BCE mean).
template <typename T>
LossValue<T> dice_loss(const Tensor<T>& Y, const Var<T>& M) {
    check_same_shape(Y.shape, M->value.shape, "dice_loss");
    const std::size_t N = Y.size();
    double s_my = 0, s_m = 0, s_y = 0;
    for (std::size_t i = 0; i < N; ++i) {
        s_my += static_cast<double>(M->value.data[i]) * Y.data[i];
        s_m += M->value.data[i];
        s_y += Y.data[i];
    }
    const double num = 2.0 * s_my + kDiceSmooth;
    const double den = s_m + s_y + kDiceSmooth;
    Tensor<T> v = Tensor<T>::scalar(static_cast<T>(1.0 - num / den));
    auto out = make_op<T>(std::move(v), {M});
    if (out->requires_grad)
        out->backward_fn = [M, Y, num, den, N](Node<T>& self) {
            const double d = self.grad.data[0];
            auto& gm = M->ensure_grad();
            for (std::size_t i = 0; i < N; ++i) {
                double dd = -2.0 * Y.data[i] / den + num / (den * den);
                gm.data[i] += static_cast<T>(d * dd);
            }
        };
    return LossValue<T>{out, {{"dice", out->value.data[0]}}};
}

template <typename T>
LossValue<T> mask_loss(const Tensor<T>& Y, const Var<T>& M) {
    LossValue<T> b = bce_loss(Y, M);
    LossValue<T> d = dice_loss(Y, M);
    Var<T> sum = add(b.node, d.node);
    return LossValue<T>{sum, {{"bce", b.value()}, {"dice", d.value()}}};
}

// B(M, t): 1 where M >= t (boundary inclusive), else 0. Gradient-opaque:
// returns a plain tensor, never a graph node.
template <typename T>
Tensor<T> binarize(const Tensor<T>& M, double t) {
    require(t > 0.0 && t < 1.0, "binarize: t in (0,1)");
    Tensor<T> out(M.shape);
    for (std::size_t i = 0; i < M.size(); ++i)
        out.data[i] = M.data[i] >= static_cast<T>(t) ? T(1) : T(0);
    return out;
}

// 1/2 [ BCE(B(M2,t), M1) + BCE(B(M1,t), M2) ]. Each term's binarized
// reference is detached, so gradient reaches M1 and M2 only through the
// probabilistic argument.
template <typename T>
LossValue<T> consistency_loss(const Var<T>& M1, const Var<T>& M2, double t) {
    check_same_shape(M1->value.shape, M2->value.shape, "consistency_loss");
    Tensor<T> b2 = binarize(M2->value, t);
    Tensor<T> b1 = binarize(M1->value, t);
    LossValue<T> l1 = bce_loss(b2, M1);
    LossValue<T> l2 = bce_loss(b1, M2);
    Var<T> sum = scale(add(l1.node, l2.node), T(0.5));
    return LossValue<T>{sum,
                        {{"m1_vs_b2", static_cast<T>(0.5) * l1.value()},
                         {"m2_vs_b1", static_cast<T>(0.5) * l2.value()}}};
}

// beta = 1 / tanh(max(mean(M), eps_beta)); detached from the graph by
// construction (computed from raw values).
template <typename T>
T dynamic_penalty(const Tensor<T>& M) {
    double mean = 0;
    for (T v : M.data) mean += v;
    mean /= static_cast<double>(M.size());
    mean = std::max(mean, kBetaClamp);
    return static_cast<T>(1.0 / std::tanh(mean));
}

template <typename T>
std::pair<T, T> dynamic_penalties(const Tensor<T>& Mfg, const Tensor<T>& Mbg) {
    return {dynamic_penalty(Mfg), dynamic_penalty(Mbg)};
}

// mean over pixels of fg*bg + fg*uc + bg*uc.
template <typename T>
LossValue<T> complementarity_loss(const Var<T>& fg, const Var<T>& bg,
                                  const Var<T>& uc) {
    check_same_shape(fg->value.shape, bg->value.shape, "complementarity_loss");
    check_same_shape(fg->value.shape, uc->value.shape, "complementarity_loss");
    const std::size_t N = fg->value.size();
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        double a = fg->value.data[i], b = bg->value.data[i],
               c = uc->value.data[i];
        acc += a * b + a * c + b * c;
    }
    Tensor<T> v = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
    auto out = make_op<T>(std::move(v), {fg, bg, uc});
    if (out->requires_grad)
        out->backward_fn = [fg, bg, uc, N](Node<T>& self) {
            const T d = self.grad.data[0] / static_cast<T>(N);
            for (std::size_t i = 0; i < N; ++i) {
                T a = fg->value.data[i], b = bg->value.data[i],
                  c = uc->value.data[i];
                if (fg->requires_grad) fg->ensure_grad().data[i] += d * (b + c);
                if (bg->requires_grad) bg->ensure_grad().data[i] += d * (a + c);
                if (uc->requires_grad) uc->ensure_grad().data[i] += d * (a + b);
            }
        };
    return LossValue<T>{out, {{"compl", out->value.data[0]}}};
}

// L_stage1 = L_mask(Y,M1) + L_mask(Y,M2) + L_cons(M1,M2).
template <typename T>
LossValue<T> stage1_loss(const Tensor<T>& Y, const Var<T>& M1,
                         const Var<T>& M2, double t) {
    LossValue<T> m1 = mask_loss(Y, M1);
    LossValue<T> m2 = mask_loss(Y, M2);
    LossValue<T> cons = consistency_loss(M1, M2, t);
    Var<T> sum = add(add(m1.node, m2.node), cons.node);
    return LossValue<T>{sum,
                        {{"mask1", m1.value()},
                         {"mask2", m2.value()},
                         {"cons", cons.value()}}};
}

// L_stage2 = L_mask(Y, M_final) + b1 L_fg + b2 L_bg + L_compl, with
// L_fg = L_mask(Y, M^fg), L_bg = L_mask(1-Y, M^bg), and b1/b2 the detached
// dynamic penalties of the foreground/background predictions.
template <typename T>
LossValue<T> stage2_loss(const Tensor<T>& Y, const Var<T>& Mfinal,
                         const Var<T>& Mfg, const Var<T>& Mbg,
                         const Var<T>& Muc) {
    Tensor<T> Yneg(Y.shape);
    for (std::size_t i = 0; i < Y.size(); ++i) Yneg.data[i] = T(1) - Y.data[i];

    auto [b1, b2] = dynamic_penalties(Mfg->value, Mbg->value);
    LossValue<T> lm = mask_loss(Y, Mfinal);
    LossValue<T> lfg = mask_loss(Y, Mfg);
    LossValue<T> lbg = mask_loss(Yneg, Mbg);
    LossValue<T> lc = complementarity_loss(Mfg, Mbg, Muc);

    Var<T> sum = add(add(lm.node, scale(lfg.node, b1)),
                     add(scale(lbg.node, b2), lc.node));
    return LossValue<T>{sum,
                        {{"mask", lm.value()},
                         {"fg", b1 * lfg.value()},
                         {"bg", b2 * lbg.value()},
                         {"compl", lc.value()}}};
}

// ---------------------------------------------------------------------------
// Consistency baselines for the ablation CLI (not training defaults).
// ---------------------------------------------------------------------------

// Symmetric KL between per-pixel Bernoulli distributions, mean over pixels.
template <typename T>
LossValue<T> kl_consistency(const Var<T>& M1, const Var<T>& M2) {
    check_same_shape(M1->value.shape, M2->value.shape, "kl_consistency");
    const std::size_t N = M1->value.size();
    const double eps = kBceClamp;
    auto cl = [eps](double v) { return std::min(std::max(v, eps), 1.0 - eps); };
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        double p = cl(M1->value.data[i]), q = cl(M2->value.data[i]);
        acc += 0.5 * (p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q)) +
                      q * std::log(q / p) + (1 - q) * std::log((1 - q) / (1 - p)));
    }
    Tensor<T> v = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
    auto out = make_op<T>(std::move(v), {M1, M2});
    if (out->requires_grad)
        out->backward_fn = [M1, M2, N, cl](Node<T>& self) {
            const double d = self.grad.data[0] / static_cast<double>(N);
            for (std::size_t i = 0; i < N; ++i) {
                double p = cl(M1->value.data[i]), q = cl(M2->value.data[i]);
                if (M1->requires_grad)
                    M1->ensure_grad().data[i] += static_cast<T>(
                        d * 0.5 * (std::log(p / q) - std::log((1 - p) / (1 - q)) -
                                   q / p + (1 - q) / (1 - p)));
                if (M2->requires_grad)
                    M2->ensure_grad().data[i] += static_cast<T>(
                        d * 0.5 * (std::log(q / p) - std::log((1 - q) / (1 - p)) -
                                   p / q + (1 - p) / (1 - q)));
            }
        };
    return LossValue<T>{out, {{"kl", out->value.data[0]}}};
}

// Jensen-Shannon divergence between per-pixel Bernoullis, mean over pixels.
template <typename T>
LossValue<T> js_consistency(const Var<T>& M1, const Var<T>& M2) {
    check_same_shape(M1->value.shape, M2->value.shape, "js_consistency");
    const std::size_t N = M1->value.size();
    const double eps = kBceClamp;
    auto cl = [eps](double v) { return std::min(std::max(v, eps), 1.0 - eps); };
    double acc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        double p = cl(M1->value.data[i]), q = cl(M2->value.data[i]);
        double m = 0.5 * (p + q);
        acc += 0.5 * (p * std::log(p / m) + (1 - p) * std::log((1 - p) / (1 - m)) +
                      q * std::log(q / m) + (1 - q) * std::log((1 - q) / (1 - m)));
    }
    Tensor<T> v = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
    auto out = make_op<T>(std::move(v), {M1, M2});
    if (out->requires_grad)
        out->backward_fn = [M1, M2, N, cl](Node<T>& self) {
            const double d = self.grad.data[0] / static_cast<double>(N);
            for (std::size_t i = 0; i < N; ++i) {
                double p = cl(M1->value.data[i]), q = cl(M2->value.data[i]);
                double m = 0.5 * (p + q);
                if (M1->requires_grad)
                    M1->ensure_grad().data[i] += static_cast<T>(
                        d * 0.5 * (std::log(p / m) - std::log((1 - p) / (1 - m))));
                if (M2->requires_grad)
                    M2->ensure_grad().data[i] += static_cast<T>(
                        d * 0.5 * (std::log(q / m) - std::log((1 - q) / (1 - m))));
            }
        };
    return LossValue<T>{out, {{"js", out->value.data[0]}}};
}

enum class ConsVariant { builtin, kl, js };

inline ConsVariant cons_variant_from_string(const std::string& s) {
    if (s == "builtin" || s == "cons") return ConsVariant::builtin;
    if (s == "kl") return ConsVariant::kl;
    if (s == "js") return ConsVariant::js;
    throw ConfigError("unknown consistency variant \"" + s +
                      "\" (expected builtin|kl|js)");
}

// Stage-1 loss with the consistency term swapped out, for the cons-loss sweep.
template <typename T>
LossValue<T> stage1_loss_variant(const Tensor<T>& Y, const Var<T>& M1,
                                 const Var<T>& M2, double t,
                                 ConsVariant variant) {
    if (variant == ConsVariant::builtin) return stage1_loss(Y, M1, M2, t);
    LossValue<T> m1 = mask_loss(Y, M1);
    LossValue<T> m2 = mask_loss(Y, M2);
    LossValue<T> cons = variant == ConsVariant::kl ? kl_consistency(M1, M2)
                                                   : js_consistency(M1, M2);
    Var<T> sum = add(add(m1.node, m2.node), cons.node);
    return LossValue<T>{sum,
                        {{"mask1", m1.value()},
                         {"mask2", m2.value()},
                         {"cons", cons.value()}}};
}

}  // namespace condseg
