#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "condseg/autodiff.hpp"
#include "condseg/tensor.hpp"

namespace condseg {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a->value.shape, b->value.shape, "add");
    Tensor<T> y(a->value.shape);
    for (std::size_t i = 0; i < y.size(); ++i)
        y.data[i] = a->value.data[i] + b->value.data[i];
    auto out = make_op<T>(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b](Node<T>& self) {
            if (a->requires_grad) {
                auto& ga = a->ensure_grad();
                for (std::size_t i = 0; i < ga.size(); ++i)
                    ga.data[i] += self.grad.data[i];
            }
            if (b->requires_grad) {
                auto& gb = b->ensure_grad();
                for (std::size_t i = 0; i < gb.size(); ++i)
                    gb.data[i] += self.grad.data[i];
            }
        };
    return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a->value.shape, b->value.shape, "mul");
    Tensor<T> y(a->value.shape);
    for (std::size_t i = 0; i < y.size(); ++i)
        y.data[i] = a->value.data[i] * b->value.data[i];
    auto out = make_op<T>(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b](Node<T>& self) {
            if (a->requires_grad) {
                auto& ga = a->ensure_grad();
                for (std::size_t i = 0; i < ga.size(); ++i)
                    ga.data[i] += self.grad.data[i] * b->value.data[i];
            }
            if (b->requires_grad) {
                auto& gb = b->ensure_grad();
                for (std::size_t i = 0; i < gb.size(); ++i)
                    gb.data[i] += self.grad.data[i] * a->value.data[i];
            }
        };
    return out;
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> y(x->value.shape);
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = s * x->value.data[i];
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, s](Node<T>& self) {
            auto& gx = x->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i)
                gx.data[i] += s * self.grad.data[i];
        };
    return out;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> y(x->value.shape);
    for (std::size_t i = 0; i < y.size(); ++i)
        y.data[i] = x->value.data[i] > T(0) ? x->value.data[i] : T(0);
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node<T>& self) {
            auto& gx = x->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (x->value.data[i] > T(0)) gx.data[i] += self.grad.data[i];
        };
    return out;
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> y(x->value.shape);
    for (std::size_t i = 0; i < y.size(); ++i)
        y.data[i] = T(1) / (T(1) + std::exp(-x->value.data[i]));
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node<T>& self) {
            auto& gx = x->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) {
                T s = self.value.data[i];
                gx.data[i] += self.grad.data[i] * s * (T(1) - s);
            }
        };
    return out;
}

// Broadcast multiply by a gate of shape (B,C,1,1) or (B,1,H,W).
template <typename T>
Var<T> mul_bcast(const Var<T>& x, const Var<T>& g) {
    const Shape& xs = x->value.shape;
    const Shape& gs = g->value.shape;
    bool channel_gate = (gs.n == xs.n && gs.c == xs.c && gs.h == 1 && gs.w == 1);
    bool spatial_gate = (gs.n == xs.n && gs.c == 1 && gs.h == xs.h && gs.w == xs.w);
    require(channel_gate || spatial_gate,
            "mul_bcast: gate shape " + gs.str() + " incompatible with " + xs.str());

    Tensor<T> y(xs);
    const int B = xs.n, C = xs.c, H = xs.h, W = xs.w;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* xp = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
            T* yp = y.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
            if (channel_gate) {
                T gv = g->value.at(b, c, 0, 0);
                for (std::size_t i = 0; i < hw; ++i) yp[i] = xp[i] * gv;
            } else {
                const T* gp = g->value.ptr() + static_cast<std::size_t>(b) * hw;
                for (std::size_t i = 0; i < hw; ++i) yp[i] = xp[i] * gp[i];
            }
        }
    auto out = make_op<T>(std::move(y), {x, g});
    if (out->requires_grad)
        out->backward_fn = [x, g, channel_gate](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const int B = xs2.n, C = xs2.c;
            const std::size_t hw = static_cast<std::size_t>(xs2.h) * xs2.w;
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
                    const T* dy = self.grad.ptr() + base;
                    const T* xp = x->value.ptr() + base;
                    if (channel_gate) {
                        T gv = g->value.at(b, c, 0, 0);
                        if (x->requires_grad) {
                            T* gx = x->ensure_grad().ptr() + base;
                            for (std::size_t i = 0; i < hw; ++i) gx[i] += dy[i] * gv;
                        }
                        if (g->requires_grad) {
                            double acc = 0;
                            for (std::size_t i = 0; i < hw; ++i)
                                acc += static_cast<double>(dy[i]) * xp[i];
                            g->ensure_grad().at(b, c, 0, 0) += static_cast<T>(acc);
                        }
                    } else {
                        const T* gp = g->value.ptr() + static_cast<std::size_t>(b) * hw;
                        if (x->requires_grad) {
                            T* gx = x->ensure_grad().ptr() + base;
                            for (std::size_t i = 0; i < hw; ++i) gx[i] += dy[i] * gp[i];
                        }
                        if (g->requires_grad) {
                            T* gg = g->ensure_grad().ptr() + static_cast<std::size_t>(b) * hw;
                            for (std::size_t i = 0; i < hw; ++i) gg[i] += dy[i] * xp[i];
                        }
                    }
                }
        };
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

struct Conv2dSpec {
    int stride = 1;
    int pad = 0;
    int dilation = 1;
};

namespace detail {

template <typename T>
void im2col(const T* xs, int Ci, int H, int W, int k, int s, int p, int d,
            int Ho, int Wo, T* col) {
    const int cols = Ho * Wo;
    for (int ci = 0; ci < Ci; ++ci) {
        const T* xc = xs + static_cast<std::size_t>(ci) * H * W;
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                T* row = col + (static_cast<std::size_t>(ci) * k * k +
                                kh * k + kw) * cols;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * s - p + kh * d;
                    T* rp = row + static_cast<std::size_t>(oh) * Wo;
                    if (ih < 0 || ih >= H) {
                        std::fill(rp, rp + Wo, T(0));
                        continue;
                    }
                    const T* xr = xc + static_cast<std::size_t>(ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * s - p + kw * d;
                        rp[ow] = (iw >= 0 && iw < W) ? xr[iw] : T(0);
                    }
                }
            }
    }
}

template <typename T>
void col2im_add(const T* col, int Ci, int H, int W, int k, int s, int p, int d,
                int Ho, int Wo, T* dxs) {
    const int cols = Ho * Wo;
    for (int ci = 0; ci < Ci; ++ci) {
        T* dxc = dxs + static_cast<std::size_t>(ci) * H * W;
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                const T* row = col + (static_cast<std::size_t>(ci) * k * k +
                                      kh * k + kw) * cols;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * s - p + kh * d;
                    if (ih < 0 || ih >= H) continue;
                    const T* rp = row + static_cast<std::size_t>(oh) * Wo;
                    T* dxr = dxc + static_cast<std::size_t>(ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * s - p + kw * d;
                        if (iw >= 0 && iw < W) dxr[iw] += rp[ow];
                    }
                }
            }
    }
}

}  // namespace detail

// bias may be null. Weight layout (Cout, Cin, k, k); bias (1, Cout, 1, 1).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              Conv2dSpec sp = {}) {
    const Shape& xs = x->value.shape;
    const Shape& ws = w->value.shape;
    require(ws.c == xs.c, "conv2d: weight expects " + std::to_string(ws.c) +
                              " input channels, got " + std::to_string(xs.c));
    require(ws.h == ws.w, "conv2d: only square kernels supported");
    if (bias)
        require(bias->value.shape == Shape(1, ws.n, 1, 1),
                "conv2d: bias shape must be (1,Cout,1,1)");
    const int B = xs.n, Ci = xs.c, H = xs.h, W = xs.w;
    const int Co = ws.n, k = ws.h;
    const int s = sp.stride, p = sp.pad, d = sp.dilation;
    const int Ho = (H + 2 * p - d * (k - 1) - 1) / s + 1;
    const int Wo = (W + 2 * p - d * (k - 1) - 1) / s + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: output would be empty");

    const bool pointwise = (k == 1 && s == 1 && p == 0 && d == 1);
    const int ckk = Ci * k * k;
    const int cols = Ho * Wo;

    Tensor<T> y({B, Co, Ho, Wo});
    Eigen::Map<const RowMat<T>> Wm(w->value.ptr(), Co, ckk);
    std::vector<T> colbuf;
    if (!pointwise) colbuf.resize(static_cast<std::size_t>(ckk) * cols);
    for (int b = 0; b < B; ++b) {
        Eigen::Map<RowMat<T>> Ym(y.sample(b), Co, cols);
        if (pointwise) {
            Eigen::Map<const RowMat<T>> Xm(x->value.sample(b), Ci, cols);
            Ym.noalias() = Wm * Xm;
        } else {
            detail::im2col(x->value.sample(b), Ci, H, W, k, s, p, d, Ho, Wo,
                           colbuf.data());
            Eigen::Map<const RowMat<T>> Cm(colbuf.data(), ckk, cols);
            Ym.noalias() = Wm * Cm;
        }
    }
    if (bias) {
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < Co; ++c) {
                T bv = bias->value.at(0, c, 0, 0);
                T* yp = y.ptr() + (static_cast<std::size_t>(b) * Co + c) * cols;
                for (int i = 0; i < cols; ++i) yp[i] += bv;
            }
    }

    std::vector<Var<T>> parents = {x, w};
    if (bias) parents.push_back(bias);
    auto out = make_op<T>(std::move(y), std::move(parents));
    if (out->requires_grad)
        out->backward_fn = [x, w, bias, sp, pointwise](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const Shape& ws2 = w->value.shape;
            const int B = xs2.n, Ci = xs2.c, H = xs2.h, W = xs2.w;
            const int Co = ws2.n, k = ws2.h;
            const int s = sp.stride, p = sp.pad, d = sp.dilation;
            const int Ho = self.value.shape.h, Wo = self.value.shape.w;
            const int ckk = Ci * k * k;
            const int cols = Ho * Wo;

            Eigen::Map<const RowMat<T>> Wm(w->value.ptr(), Co, ckk);
            std::vector<T> colbuf, dcolbuf;
            if (!pointwise) {
                colbuf.resize(static_cast<std::size_t>(ckk) * cols);
                dcolbuf.resize(static_cast<std::size_t>(ckk) * cols);
            }
            for (int b = 0; b < B; ++b) {
                Eigen::Map<const RowMat<T>> dY(self.grad.sample(b), Co, cols);
                if (w->requires_grad) {
                    Eigen::Map<RowMat<T>> dW(w->ensure_grad().ptr(), Co, ckk);
                    if (pointwise) {
                        Eigen::Map<const RowMat<T>> Xm(x->value.sample(b), Ci, cols);
                        dW.noalias() += dY * Xm.transpose();
                    } else {
                        detail::im2col(x->value.sample(b), Ci, H, W, k, s, p, d,
                                       Ho, Wo, colbuf.data());
                        Eigen::Map<const RowMat<T>> Cm(colbuf.data(), ckk, cols);
                        dW.noalias() += dY * Cm.transpose();
                    }
                }
                if (x->requires_grad) {
                    if (pointwise) {
                        Eigen::Map<RowMat<T>> dX(x->ensure_grad().sample(b), Ci, cols);
                        dX.noalias() += Wm.transpose() * dY;
                    } else {
                        Eigen::Map<RowMat<T>> dC(dcolbuf.data(), ckk, cols);
                        dC.noalias() = Wm.transpose() * dY;
                        detail::col2im_add(dcolbuf.data(), Ci, H, W, k, s, p, d,
                                           Ho, Wo, x->ensure_grad().sample(b));
                    }
                }
                if (bias && bias->requires_grad) {
                    auto& gb = bias->ensure_grad();
                    for (int c = 0; c < Co; ++c) {
                        double acc = 0;
                        const T* dyp = self.grad.ptr() +
                                       (static_cast<std::size_t>(b) * Co + c) * cols;
                        for (int i = 0; i < cols; ++i) acc += dyp[i];
                        gb.at(0, c, 0, 0) += static_cast<T>(acc);
                    }
                }
            }
        };
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Batch statistics during training (optionally maintaining running averages),
// running averages at evaluation. gamma/beta are (1,C,1,1).
template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 Tensor<T>* run_mean, Tensor<T>* run_var, Phase phase,
                 double momentum = 0.1, double eps = 1e-5) {
    const Shape& xs = x->value.shape;
    const int B = xs.n, C = xs.c, H = xs.h, W = xs.w;
    require(gamma->value.shape == Shape(1, C, 1, 1) &&
                beta->value.shape == Shape(1, C, 1, 1),
            "batchnorm: gamma/beta must be (1,C,1,1)");
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t nelem = static_cast<std::size_t>(B) * hw;

    std::vector<T> mean(C), inv_std(C);
    if (phase == Phase::train) {
        for (int c = 0; c < C; ++c) {
            double sum = 0, sum2 = 0;
            for (int b = 0; b < B; ++b) {
                const T* xp = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum += xp[i];
                    sum2 += static_cast<double>(xp[i]) * xp[i];
                }
            }
            double mu = sum / static_cast<double>(nelem);
            double var = sum2 / static_cast<double>(nelem) - mu * mu;
            if (var < 0) var = 0;
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
            if (run_mean && run_var) {
                double unbiased = nelem > 1
                    ? var * static_cast<double>(nelem) / static_cast<double>(nelem - 1)
                    : var;
                run_mean->at(0, c, 0, 0) = static_cast<T>(
                    (1 - momentum) * run_mean->at(0, c, 0, 0) + momentum * mu);
                run_var->at(0, c, 0, 0) = static_cast<T>(
                    (1 - momentum) * run_var->at(0, c, 0, 0) + momentum * unbiased);
            }
        }
    } else {
        require(run_mean && run_var, "batchnorm: eval needs running stats");
        for (int c = 0; c < C; ++c) {
            mean[c] = run_mean->at(0, c, 0, 0);
            inv_std[c] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(run_var->at(0, c, 0, 0)) + eps));
        }
    }

    Tensor<T> y(xs);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* xp = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
            T* yp = y.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
            const T g = gamma->value.at(0, c, 0, 0), be = beta->value.at(0, c, 0, 0);
            const T mu = mean[c], inv = inv_std[c];
            for (std::size_t i = 0; i < hw; ++i)
                yp[i] = g * (xp[i] - mu) * inv + be;
        }

    auto out = make_op<T>(std::move(y), {x, gamma, beta});
    if (out->requires_grad)
        out->backward_fn = [x, gamma, beta, phase, mean = std::move(mean),
                            inv_std = std::move(inv_std)](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const int B = xs2.n, C = xs2.c;
            const std::size_t hw = static_cast<std::size_t>(xs2.h) * xs2.w;
            const double nelem = static_cast<double>(B) * hw;
            for (int c = 0; c < C; ++c) {
                const T g = gamma->value.at(0, c, 0, 0);
                const T mu = mean[c], inv = inv_std[c];
                double sum_dy = 0, sum_dy_xhat = 0;
                for (int b = 0; b < B; ++b) {
                    const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
                    const T* dy = self.grad.ptr() + base;
                    const T* xp = x->value.ptr() + base;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += static_cast<double>(dy[i]) * (xp[i] - mu) * inv;
                    }
                }
                if (gamma->requires_grad)
                    gamma->ensure_grad().at(0, c, 0, 0) += static_cast<T>(sum_dy_xhat);
                if (beta->requires_grad)
                    beta->ensure_grad().at(0, c, 0, 0) += static_cast<T>(sum_dy);
                if (x->requires_grad) {
                    auto& gx = x->ensure_grad();
                    for (int b = 0; b < B; ++b) {
                        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
                        const T* dy = self.grad.ptr() + base;
                        const T* xp = x->value.ptr() + base;
                        T* gp = gx.ptr() + base;
                        if (phase == Phase::train) {
                            for (std::size_t i = 0; i < hw; ++i) {
                                double xhat = (xp[i] - mu) * inv;
                                gp[i] += static_cast<T>(
                                    g * inv * (dy[i] - sum_dy / nelem -
                                               xhat * sum_dy_xhat / nelem));
                            }
                        } else {
                            for (std::size_t i = 0; i < hw; ++i)
                                gp[i] += static_cast<T>(g * inv * dy[i]);
                        }
                    }
                }
            }
        };
    return out;
}

// Per-sample statistics over channel groups; identical in train and eval.
template <typename T>
Var<T> groupnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 int groups, double eps = 1e-5) {
    const Shape& xs = x->value.shape;
    const int B = xs.n, C = xs.c, H = xs.h, W = xs.w;
    require(groups >= 1 && C % groups == 0, "groupnorm: groups must divide C");
    require(gamma->value.shape == Shape(1, C, 1, 1) &&
                beta->value.shape == Shape(1, C, 1, 1),
            "groupnorm: gamma/beta must be (1,C,1,1)");
    const int cg = C / groups;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t gsize = static_cast<std::size_t>(cg) * hw;

    std::vector<T> mean(static_cast<std::size_t>(B) * groups);
    std::vector<T> inv_std(static_cast<std::size_t>(B) * groups);
    Tensor<T> y(xs);
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
            const T* xp = x->value.ptr() +
                          (static_cast<std::size_t>(b) * C + g * cg) * hw;
            double sum = 0, sum2 = 0;
            for (std::size_t i = 0; i < gsize; ++i) {
                sum += xp[i];
                sum2 += static_cast<double>(xp[i]) * xp[i];
            }
            double mu = sum / static_cast<double>(gsize);
            double var = sum2 / static_cast<double>(gsize) - mu * mu;
            if (var < 0) var = 0;
            T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
            mean[static_cast<std::size_t>(b) * groups + g] = static_cast<T>(mu);
            inv_std[static_cast<std::size_t>(b) * groups + g] = inv;
            for (int cc = 0; cc < cg; ++cc) {
                const int c = g * cg + cc;
                const T ga = gamma->value.at(0, c, 0, 0);
                const T be = beta->value.at(0, c, 0, 0);
                const T* xc = x->value.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
                T* yc = y.ptr() + (static_cast<std::size_t>(b) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i)
                    yc[i] = ga * (xc[i] - static_cast<T>(mu)) * inv + be;
            }
        }

    auto out = make_op<T>(std::move(y), {x, gamma, beta});
    if (out->requires_grad)
        out->backward_fn = [x, gamma, beta, groups, mean = std::move(mean),
                            inv_std = std::move(inv_std)](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const int B = xs2.n, C = xs2.c;
            const int cg = C / groups;
            const std::size_t hw = static_cast<std::size_t>(xs2.h) * xs2.w;
            const double gsize = static_cast<double>(cg) * hw;
            for (int b = 0; b < B; ++b)
                for (int g = 0; g < groups; ++g) {
                    const T mu = mean[static_cast<std::size_t>(b) * groups + g];
                    const T inv = inv_std[static_cast<std::size_t>(b) * groups + g];
                    double sum_t = 0, sum_tx = 0;  // sums of dy*gamma and dy*gamma*xhat
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = g * cg + cc;
                        const T ga = gamma->value.at(0, c, 0, 0);
                        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
                        const T* dy = self.grad.ptr() + base;
                        const T* xp = x->value.ptr() + base;
                        for (std::size_t i = 0; i < hw; ++i) {
                            double t = static_cast<double>(dy[i]) * ga;
                            sum_t += t;
                            sum_tx += t * (xp[i] - mu) * inv;
                        }
                    }
                    for (int cc = 0; cc < cg; ++cc) {
                        const int c = g * cg + cc;
                        const T ga = gamma->value.at(0, c, 0, 0);
                        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
                        const T* dy = self.grad.ptr() + base;
                        const T* xp = x->value.ptr() + base;
                        if (gamma->requires_grad || beta->requires_grad) {
                            double dgam = 0, dbet = 0;
                            for (std::size_t i = 0; i < hw; ++i) {
                                dgam += static_cast<double>(dy[i]) * (xp[i] - mu) * inv;
                                dbet += dy[i];
                            }
                            if (gamma->requires_grad)
                                gamma->ensure_grad().at(0, c, 0, 0) += static_cast<T>(dgam);
                            if (beta->requires_grad)
                                beta->ensure_grad().at(0, c, 0, 0) += static_cast<T>(dbet);
                        }
                        if (x->requires_grad) {
                            T* gx = x->ensure_grad().ptr() + base;
                            for (std::size_t i = 0; i < hw; ++i) {
                                double xhat = (xp[i] - mu) * inv;
                                double t = static_cast<double>(dy[i]) * ga;
                                gx[i] += static_cast<T>(
                                    inv * (t - sum_t / gsize - xhat * sum_tx / gsize));
                            }
                        }
                    }
                }
        };
    return out;
}

// ---------------------------------------------------------------------------
// pooling / reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const Shape& xs = x->value.shape;
    const std::size_t hw = static_cast<std::size_t>(xs.h) * xs.w;
    Tensor<T> y({xs.n, xs.c, 1, 1});
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = x->value.ptr() + (static_cast<std::size_t>(b) * xs.c + c) * hw;
            double acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
            y.at(b, c, 0, 0) = static_cast<T>(acc / static_cast<double>(hw));
        }
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const std::size_t hw = static_cast<std::size_t>(xs2.h) * xs2.w;
            auto& gx = x->ensure_grad();
            for (int b = 0; b < xs2.n; ++b)
                for (int c = 0; c < xs2.c; ++c) {
                    T dv = self.grad.at(b, c, 0, 0) / static_cast<T>(hw);
                    T* gp = gx.ptr() + (static_cast<std::size_t>(b) * xs2.c + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) gp[i] += dv;
                }
        };
    return out;
}

template <typename T>
Var<T> channel_mean(const Var<T>& x) {
    const Shape& xs = x->value.shape;
    Tensor<T> y({xs.n, 1, xs.h, xs.w});
    const std::size_t hw = static_cast<std::size_t>(xs.h) * xs.w;
    for (int b = 0; b < xs.n; ++b) {
        T* yp = y.ptr() + static_cast<std::size_t>(b) * hw;
        std::fill(yp, yp + hw, T(0));
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = x->value.ptr() + (static_cast<std::size_t>(b) * xs.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) yp[i] += xp[i];
        }
        for (std::size_t i = 0; i < hw; ++i) yp[i] /= static_cast<T>(xs.c);
    }
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const std::size_t hw = static_cast<std::size_t>(xs2.h) * xs2.w;
            auto& gx = x->ensure_grad();
            for (int b = 0; b < xs2.n; ++b) {
                const T* dy = self.grad.ptr() + static_cast<std::size_t>(b) * hw;
                for (int c = 0; c < xs2.c; ++c) {
                    T* gp = gx.ptr() + (static_cast<std::size_t>(b) * xs2.c + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i)
                        gp[i] += dy[i] / static_cast<T>(xs2.c);
                }
            }
        };
    return out;
}

template <typename T>
Var<T> channel_max(const Var<T>& x) {
    const Shape& xs = x->value.shape;
    const std::size_t hw = static_cast<std::size_t>(xs.h) * xs.w;
    Tensor<T> y({xs.n, 1, xs.h, xs.w});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(xs.n) * hw);
    for (int b = 0; b < xs.n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
            T best = x->value.ptr()[(static_cast<std::size_t>(b) * xs.c) * hw + i];
            int bc = 0;
            for (int c = 1; c < xs.c; ++c) {
                T v = x->value.ptr()[(static_cast<std::size_t>(b) * xs.c + c) * hw + i];
                if (v > best) {
                    best = v;
                    bc = c;
                }
            }
            y.ptr()[static_cast<std::size_t>(b) * hw + i] = best;
            (*argmax)[static_cast<std::size_t>(b) * hw + i] = bc;
        }
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, argmax](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            const std::size_t hw = static_cast<std::size_t>(xs2.h) * xs2.w;
            auto& gx = x->ensure_grad();
            for (int b = 0; b < xs2.n; ++b)
                for (std::size_t i = 0; i < hw; ++i) {
                    int c = (*argmax)[static_cast<std::size_t>(b) * hw + i];
                    gx.ptr()[(static_cast<std::size_t>(b) * xs2.c + c) * hw + i] +=
                        self.grad.ptr()[static_cast<std::size_t>(b) * hw + i];
                }
        };
    return out;
}

// ---------------------------------------------------------------------------
// concat / resize
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    require(!xs.empty(), "concat_channels: empty input list");
    const Shape& s0 = xs[0]->value.shape;
    int Ctot = 0;
    for (const auto& v : xs) {
        const Shape& s = v->value.shape;
        require(s.n == s0.n && s.h == s0.h && s.w == s0.w,
                "concat_channels: spatial/batch mismatch");
        Ctot += s.c;
    }
    const std::size_t hw = static_cast<std::size_t>(s0.h) * s0.w;
    Tensor<T> y({s0.n, Ctot, s0.h, s0.w});
    for (int b = 0; b < s0.n; ++b) {
        int coff = 0;
        for (const auto& v : xs) {
            const int c = v->value.shape.c;
            std::copy(v->value.sample(b), v->value.sample(b) + c * hw,
                      y.ptr() + (static_cast<std::size_t>(b) * Ctot + coff) * hw);
            coff += c;
        }
    }
    auto out = make_op<T>(std::move(y), xs);
    if (out->requires_grad)
        out->backward_fn = [xs](Node<T>& self) {
            const Shape& ys = self.value.shape;
            const std::size_t hw = static_cast<std::size_t>(ys.h) * ys.w;
            for (int b = 0; b < ys.n; ++b) {
                int coff = 0;
                for (const auto& v : xs) {
                    const int c = v->value.shape.c;
                    if (v->requires_grad) {
                        T* gp = v->ensure_grad().sample(b);
                        const T* dy = self.grad.ptr() +
                                      (static_cast<std::size_t>(b) * ys.c + coff) * hw;
                        for (std::size_t i = 0; i < static_cast<std::size_t>(c) * hw; ++i)
                            gp[i] += dy[i];
                    }
                    coff += c;
                }
            }
        };
    return out;
}

namespace detail {

struct LerpIdx {
    std::vector<int> i0, i1;
    std::vector<double> f;
};

// align_corners=false sampling grid.
inline LerpIdx lerp_grid(int in, int out) {
    LerpIdx g;
    g.i0.resize(out);
    g.i1.resize(out);
    g.f.resize(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        if (s < 0) s = 0;
        int lo = static_cast<int>(s);
        if (lo > in - 1) lo = in - 1;
        int hi = std::min(lo + 1, in - 1);
        g.i0[o] = lo;
        g.i1[o] = hi;
        g.f[o] = s - lo;
    }
    return g;
}

}  // namespace detail

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w) {
    const Shape& xs = x->value.shape;
    require(out_h >= 1 && out_w >= 1, "upsample_bilinear: bad output size");
    auto gy = std::make_shared<detail::LerpIdx>(detail::lerp_grid(xs.h, out_h));
    auto gx = std::make_shared<detail::LerpIdx>(detail::lerp_grid(xs.w, out_w));
    Tensor<T> y({xs.n, xs.c, out_h, out_w});
    for (int b = 0; b < xs.n; ++b)
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = x->value.ptr() +
                          (static_cast<std::size_t>(b) * xs.c + c) *
                              (static_cast<std::size_t>(xs.h) * xs.w);
            T* yp = y.ptr() + (static_cast<std::size_t>(b) * xs.c + c) *
                                  (static_cast<std::size_t>(out_h) * out_w);
            for (int oh = 0; oh < out_h; ++oh) {
                const int y0 = gy->i0[oh], y1 = gy->i1[oh];
                const double fy = gy->f[oh];
                for (int ow = 0; ow < out_w; ++ow) {
                    const int x0 = gx->i0[ow], x1 = gx->i1[ow];
                    const double fx = gx->f[ow];
                    double v = (1 - fy) * (1 - fx) * xp[y0 * xs.w + x0] +
                               (1 - fy) * fx * xp[y0 * xs.w + x1] +
                               fy * (1 - fx) * xp[y1 * xs.w + x0] +
                               fy * fx * xp[y1 * xs.w + x1];
                    yp[oh * out_w + ow] = static_cast<T>(v);
                }
            }
        }
    auto out = make_op<T>(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, gy, gx, out_h, out_w](Node<T>& self) {
            const Shape& xs2 = x->value.shape;
            auto& gxt = x->ensure_grad();
            for (int b = 0; b < xs2.n; ++b)
                for (int c = 0; c < xs2.c; ++c) {
                    T* gp = gxt.ptr() + (static_cast<std::size_t>(b) * xs2.c + c) *
                                            (static_cast<std::size_t>(xs2.h) * xs2.w);
                    const T* dy = self.grad.ptr() +
                                  (static_cast<std::size_t>(b) * xs2.c + c) *
                                      (static_cast<std::size_t>(out_h) * out_w);
                    for (int oh = 0; oh < out_h; ++oh) {
                        const int y0 = gy->i0[oh], y1 = gy->i1[oh];
                        const double fy = gy->f[oh];
                        for (int ow = 0; ow < out_w; ++ow) {
                            const int x0 = gx->i0[ow], x1 = gx->i1[ow];
                            const double fx = gx->f[ow];
                            const T d = dy[oh * out_w + ow];
                            gp[y0 * xs2.w + x0] += static_cast<T>((1 - fy) * (1 - fx) * d);
                            gp[y0 * xs2.w + x1] += static_cast<T>((1 - fy) * fx * d);
                            gp[y1 * xs2.w + x0] += static_cast<T>(fy * (1 - fx) * d);
                            gp[y1 * xs2.w + x1] += static_cast<T>(fy * fx * d);
                        }
                    }
                }
        };
    return out;
}

// ---------------------------------------------------------------------------
// CDFA windowed attention core
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void softmax_rows(const T* logits, int rows, int cols, T* out) {
    for (int r = 0; r < rows; ++r) {
        const T* lp = logits + static_cast<std::size_t>(r) * cols;
        T* op = out + static_cast<std::size_t>(r) * cols;
        T m = lp[0];
        for (int s = 1; s < cols; ++s) m = std::max(m, lp[s]);
        double z = 0;
        for (int s = 0; s < cols; ++s) {
            op[s] = std::exp(lp[s] - m);
            z += op[s];
        }
        for (int s = 0; s < cols; ++s) op[s] = static_cast<T>(op[s] / z);
    }
}

}  // namespace detail

// Two-step windowed attention with dense overlap aggregation. Per spatial
// position (i,j): reshape the K^4 logit vectors into K^2 x K^2 matrices,
// row-softmax both, weight the unfolded value window V_(i,j) (K^2 x C) as
// Gfg * (Gbg * V), then scatter each weighted slot back to the position it
// was read from, summing contributions from every overlapping window.
//   V   (B, C,   H, W)
//   Afg (B, K^4, H, W), Abg likewise (pre-softmax logits)
template <typename T>
Var<T> cdfa_attention(const Var<T>& V, const Var<T>& Afg, const Var<T>& Abg,
                      int K) {
    require(K >= 1 && K % 2 == 1, "cdfa_attention: K must be odd");
    const Shape& vs = V->value.shape;
    const int K2 = K * K, K4 = K2 * K2;
    require(Afg->value.shape == Shape(vs.n, K4, vs.h, vs.w) &&
                Abg->value.shape == Shape(vs.n, K4, vs.h, vs.w),
            "cdfa_attention: attention logits must be (B,K^4,H,W)");
    const int B = vs.n, C = vs.c, H = vs.h, W = vs.w;
    const int r0 = K / 2;
    const std::size_t hw = static_cast<std::size_t>(H) * W;

    auto gather_logits = [K4, hw](const Tensor<T>& t, int b, int i, int j,
                                  int W_, T* out) {
        const T* base = t.ptr() + static_cast<std::size_t>(b) * K4 * hw +
                        static_cast<std::size_t>(i) * W_ + j;
        for (int ch = 0; ch < K4; ++ch) out[ch] = base[ch * hw];
    };

    Tensor<T> y(vs);  // zero-initialized
    {
        std::vector<T> lfg(K4), lbg(K4), Gfg(K4), Gbg(K4);
        std::vector<T> Vwin(static_cast<std::size_t>(K2) * C);
        std::vector<T> U(static_cast<std::size_t>(K2) * C);
        std::vector<T> Wt(static_cast<std::size_t>(K2) * C);
        for (int b = 0; b < B; ++b) {
            const T* vb = V->value.sample(b);
            T* yb = y.sample(b);
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    gather_logits(Afg->value, b, i, j, W, lfg.data());
                    gather_logits(Abg->value, b, i, j, W, lbg.data());
                    detail::softmax_rows(lfg.data(), K2, K2, Gfg.data());
                    detail::softmax_rows(lbg.data(), K2, K2, Gbg.data());
                    // unfold with zero padding
                    for (int p = 0; p < K; ++p)
                        for (int q = 0; q < K; ++q) {
                            const int s = p * K + q;
                            const int ii = i + p - r0, jj = j + q - r0;
                            T* row = Vwin.data() + static_cast<std::size_t>(s) * C;
                            if (ii < 0 || ii >= H || jj < 0 || jj >= W) {
                                std::fill(row, row + C, T(0));
                            } else {
                                for (int c = 0; c < C; ++c)
                                    row[c] = vb[static_cast<std::size_t>(c) * hw +
                                                ii * W + jj];
                            }
                        }
                    // U = Gbg * Vwin ; Wt = Gfg * U
                    for (int r = 0; r < K2; ++r) {
                        T* ur = U.data() + static_cast<std::size_t>(r) * C;
                        std::fill(ur, ur + C, T(0));
                        for (int s = 0; s < K2; ++s) {
                            const T g = Gbg[r * K2 + s];
                            const T* vr = Vwin.data() + static_cast<std::size_t>(s) * C;
                            for (int c = 0; c < C; ++c) ur[c] += g * vr[c];
                        }
                    }
                    for (int r = 0; r < K2; ++r) {
                        T* wr = Wt.data() + static_cast<std::size_t>(r) * C;
                        std::fill(wr, wr + C, T(0));
                        for (int s = 0; s < K2; ++s) {
                            const T g = Gfg[r * K2 + s];
                            const T* ur = U.data() + static_cast<std::size_t>(s) * C;
                            for (int c = 0; c < C; ++c) wr[c] += g * ur[c];
                        }
                    }
                    // dense aggregation: slot s of this window lands at (ii,jj)
                    for (int p = 0; p < K; ++p)
                        for (int q = 0; q < K; ++q) {
                            const int s = p * K + q;
                            const int ii = i + p - r0, jj = j + q - r0;
                            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                            const T* wr = Wt.data() + static_cast<std::size_t>(s) * C;
                            for (int c = 0; c < C; ++c)
                                yb[static_cast<std::size_t>(c) * hw + ii * W + jj] +=
                                    wr[c];
                        }
                }
        }
    }

    auto out = make_op<T>(std::move(y), {V, Afg, Abg});
    if (out->requires_grad)
        out->backward_fn = [V, Afg, Abg, K, gather_logits](Node<T>& self) {
            const Shape& vs2 = V->value.shape;
            const int B = vs2.n, C = vs2.c, H = vs2.h, W = vs2.w;
            const int K2 = K * K, K4 = K2 * K2;
            const int r0 = K / 2;
            const std::size_t hw = static_cast<std::size_t>(H) * W;
            const bool need_v = V->requires_grad;
            const bool need_fg = Afg->requires_grad;
            const bool need_bg = Abg->requires_grad;

            std::vector<T> lfg(K4), lbg(K4), Gfg(K4), Gbg(K4);
            std::vector<T> Vwin(static_cast<std::size_t>(K2) * C);
            std::vector<T> U(static_cast<std::size_t>(K2) * C);
            std::vector<T> dWt(static_cast<std::size_t>(K2) * C);
            std::vector<T> dU(static_cast<std::size_t>(K2) * C);
            std::vector<T> dVwin(static_cast<std::size_t>(K2) * C);
            std::vector<T> dG(K4), dA(K4);

            for (int b = 0; b < B; ++b) {
                const T* vb = V->value.sample(b);
                const T* dyb = self.grad.sample(b);
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        gather_logits(Afg->value, b, i, j, W, lfg.data());
                        gather_logits(Abg->value, b, i, j, W, lbg.data());
                        detail::softmax_rows(lfg.data(), K2, K2, Gfg.data());
                        detail::softmax_rows(lbg.data(), K2, K2, Gbg.data());
                        for (int p = 0; p < K; ++p)
                            for (int q = 0; q < K; ++q) {
                                const int s = p * K + q;
                                const int ii = i + p - r0, jj = j + q - r0;
                                T* row = Vwin.data() + static_cast<std::size_t>(s) * C;
                                T* drow = dWt.data() + static_cast<std::size_t>(s) * C;
                                if (ii < 0 || ii >= H || jj < 0 || jj >= W) {
                                    std::fill(row, row + C, T(0));
                                    std::fill(drow, drow + C, T(0));
                                } else {
                                    for (int c = 0; c < C; ++c) {
                                        row[c] = vb[static_cast<std::size_t>(c) * hw +
                                                    ii * W + jj];
                                        drow[c] = dyb[static_cast<std::size_t>(c) * hw +
                                                      ii * W + jj];
                                    }
                                }
                            }
                        for (int r = 0; r < K2; ++r) {
                            T* ur = U.data() + static_cast<std::size_t>(r) * C;
                            std::fill(ur, ur + C, T(0));
                            for (int s = 0; s < K2; ++s) {
                                const T g = Gbg[r * K2 + s];
                                const T* vr = Vwin.data() + static_cast<std::size_t>(s) * C;
                                for (int c = 0; c < C; ++c) ur[c] += g * vr[c];
                            }
                        }
                        // dU = Gfg^T * dWt
                        for (int s = 0; s < K2; ++s) {
                            T* dur = dU.data() + static_cast<std::size_t>(s) * C;
                            std::fill(dur, dur + C, T(0));
                            for (int r = 0; r < K2; ++r) {
                                const T g = Gfg[r * K2 + s];
                                const T* dwr = dWt.data() + static_cast<std::size_t>(r) * C;
                                for (int c = 0; c < C; ++c) dur[c] += g * dwr[c];
                            }
                        }
                        if (need_fg) {
                            // dGfg[r][s] = sum_c dWt[r][c] * U[s][c]
                            for (int r = 0; r < K2; ++r) {
                                const T* dwr = dWt.data() + static_cast<std::size_t>(r) * C;
                                for (int s = 0; s < K2; ++s) {
                                    const T* us = U.data() + static_cast<std::size_t>(s) * C;
                                    double acc = 0;
                                    for (int c = 0; c < C; ++c) acc += static_cast<double>(dwr[c]) * us[c];
                                    dG[r * K2 + s] = static_cast<T>(acc);
                                }
                            }
                            for (int r = 0; r < K2; ++r) {
                                double dot = 0;
                                for (int s = 0; s < K2; ++s)
                                    dot += static_cast<double>(dG[r * K2 + s]) * Gfg[r * K2 + s];
                                for (int s = 0; s < K2; ++s)
                                    dA[r * K2 + s] = static_cast<T>(
                                        Gfg[r * K2 + s] * (dG[r * K2 + s] - dot));
                            }
                            auto& ga = Afg->ensure_grad();
                            T* base = ga.ptr() + static_cast<std::size_t>(b) * K4 * hw +
                                      static_cast<std::size_t>(i) * W + j;
                            for (int ch = 0; ch < K4; ++ch) base[ch * hw] += dA[ch];
                        }
                        if (need_bg) {
                            for (int r = 0; r < K2; ++r) {
                                const T* dur = dU.data() + static_cast<std::size_t>(r) * C;
                                for (int s = 0; s < K2; ++s) {
                                    const T* vr = Vwin.data() + static_cast<std::size_t>(s) * C;
                                    double acc = 0;
                                    for (int c = 0; c < C; ++c) acc += static_cast<double>(dur[c]) * vr[c];
                                    dG[r * K2 + s] = static_cast<T>(acc);
                                }
                            }
                            for (int r = 0; r < K2; ++r) {
                                double dot = 0;
                                for (int s = 0; s < K2; ++s)
                                    dot += static_cast<double>(dG[r * K2 + s]) * Gbg[r * K2 + s];
                                for (int s = 0; s < K2; ++s)
                                    dA[r * K2 + s] = static_cast<T>(
                                        Gbg[r * K2 + s] * (dG[r * K2 + s] - dot));
                            }
                            auto& ga = Abg->ensure_grad();
                            T* base = ga.ptr() + static_cast<std::size_t>(b) * K4 * hw +
                                      static_cast<std::size_t>(i) * W + j;
                            for (int ch = 0; ch < K4; ++ch) base[ch * hw] += dA[ch];
                        }
                        if (need_v) {
                            // dVwin = Gbg^T * dU, scattered back to V
                            for (int s = 0; s < K2; ++s) {
                                T* dvr = dVwin.data() + static_cast<std::size_t>(s) * C;
                                std::fill(dvr, dvr + C, T(0));
                                for (int r = 0; r < K2; ++r) {
                                    const T g = Gbg[r * K2 + s];
                                    const T* dur = dU.data() + static_cast<std::size_t>(r) * C;
                                    for (int c = 0; c < C; ++c) dvr[c] += g * dur[c];
                                }
                            }
                            auto& gv = V->ensure_grad();
                            T* gvb = gv.sample(b);
                            for (int p = 0; p < K; ++p)
                                for (int q = 0; q < K; ++q) {
                                    const int s = p * K + q;
                                    const int ii = i + p - r0, jj = j + q - r0;
                                    if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                                    const T* dvr = dVwin.data() + static_cast<std::size_t>(s) * C;
                                    for (int c = 0; c < C; ++c)
                                        gvb[static_cast<std::size_t>(c) * hw + ii * W + jj] +=
                                            dvr[c];
                                }
                        }
                    }
            }
        };
    return out;
}

}  // namespace condseg
