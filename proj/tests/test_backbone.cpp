#include <catch2/catch_amalgamated.hpp>

#include "condseg/backbone.hpp"
#include "condseg/model.hpp"
#include "test_util.hpp"

using namespace condseg;
using testutil::fd_worst_ratio;

namespace {

ParamStore<double> tiny_net0(std::array<int, 4> widths, NormKind norm,
                             std::uint64_t seed, EncoderInfo* info = nullptr) {
    ParamStore<double> st;
    Rng rng(seed, "init");
    EncoderInfo i = init_encoder(st, "tiny-residual", widths, norm, rng);
    init_net0_head(st, i.channels[3], rng);
    if (info) *info = i;
    return st;
}

}  // namespace

TEST_CASE("encode: stride and channel contract") {
    for (int size : {64, 256}) {
        ParamStore<double> st = tiny_net0({4, 8, 12, 16}, NormKind::group, 1);
        Workspace<double> ws(st, Phase::eval);
        Rng rng(2, "x");
        auto X = constant(rand_uniform<double>({3, 3, size, size}, rng));
        auto feats = encode(ws, X);
        const int strides[4] = {4, 8, 16, 32};
        const int chans[4] = {4, 8, 12, 16};
        for (int i = 0; i < 4; ++i) {
            REQUIRE(feats[i].level == i + 1);
            REQUIRE(feats[i].node->value.shape ==
                    Shape(3, chans[i], size / strides[i], size / strides[i]));
        }
        if (size == 256) break;  // one large shape audit is enough
    }
}

TEST_CASE("encode: input size must divide by 32") {
    ParamStore<double> st = tiny_net0({4, 8, 12, 16}, NormKind::group, 1);
    Workspace<double> ws(st, Phase::eval);
    Rng rng(3, "x");
    auto X = constant(rand_uniform<double>({1, 3, 48, 48}, rng));
    REQUIRE_THROWS(encode(ws, X));
}

TEST_CASE("make_encoder: registry") {
    ParamStore<double> st;
    Rng rng(4, "init");
    REQUIRE_THROWS_WITH(
        make_encoder(st, "resnet-9000", {4, 8, 12, 16}, NormKind::group, rng),
        Catch::Matchers::ContainsSubstring("tiny-residual"));

    // paper-resnet50-shape pins its widths
    ParamStore<double> st2;
    EncoderInfo info =
        make_encoder(st2, "paper-resnet50-shape", {4, 8, 12, 16},
                     NormKind::group, rng);
    REQUIRE(info.channels == std::array<int, 4>{256, 512, 1024, 2048});
}

TEST_CASE("make_encoder: identical seeds give identical weights") {
    ParamStore<double> a = tiny_net0({4, 8, 12, 16}, NormKind::group, 7);
    ParamStore<double> b = tiny_net0({4, 8, 12, 16}, NormKind::group, 7);
    for (const auto& name : a.names())
        REQUIRE(bitwise_equal(a.value(name), b.value(name)));
    ParamStore<double> c = tiny_net0({4, 8, 12, 16}, NormKind::group, 8);
    bool any_diff = false;
    for (const auto& name : a.names())
        if (!bitwise_equal(a.value(name), c.value(name))) any_diff = true;
    REQUIRE(any_diff);
}

TEST_CASE("net0_forward: shape, range, zeroed head gives 0.5") {
    ParamStore<double> st = tiny_net0({4, 8, 12, 16}, NormKind::group, 9);
    Workspace<double> ws(st, Phase::eval);
    Rng rng(10, "x");
    auto X = constant(rand_uniform<double>({2, 3, 32, 32}, rng));
    auto m = net0_forward(ws, X);
    REQUIRE(m->value.shape == Shape(2, 1, 32, 32));
    for (double v : m->value.data) {
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
    }

    std::fill(st.value("net0.head.w").data.begin(),
              st.value("net0.head.w").data.end(), 0.0);
    std::fill(st.value("net0.head.b").data.begin(),
              st.value("net0.head.b").data.end(), 0.0);
    Workspace<double> ws2(st, Phase::eval);
    auto m2 = net0_forward(ws2, X);
    for (double v : m2->value.data) REQUIRE(v == 0.5);
}

TEST_CASE("net0_forward: analytic backprop matches finite differences") {
    // tiny encoder on 16x16 inputs; scalar loss = mean of the mask
    ParamStore<double> st = tiny_net0({4, 4, 8, 8}, NormKind::group, 11);
    Rng rng(12, "x");

    // 16 is not divisible by 32; use 32 to honor the encode contract
    Tensor<double> Xt = rand_uniform<double>({1, 3, 32, 32}, rng);

    auto run = [&](Workspace<double>& ws) {
        auto m = net0_forward(ws, constant(Xt));
        double acc = 0;
        for (double v : m->value.data) acc += v;
        auto node = make_op<double>(
            Tensor<double>::scalar(acc / static_cast<double>(m->value.size())),
            {m});
        node->backward_fn = [m](Node<double>& self) {
            auto& g = m->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] += self.grad.data[0] / static_cast<double>(g.size());
        };
        return node;
    };

    Workspace<double> ws(st, Phase::train);
    auto loss = run(ws);
    backward(loss);
    collect_grads(ws);

    Rng pick(13, "pick");
    auto names = st.names();
    int checked = 0;
    double worst = 0;
    while (checked < 12) {
        const std::string& name =
            names[pick.uniform_int(static_cast<int>(names.size()))];
        auto& e = st.at(name);
        if (!e.trainable) continue;
        std::size_t i = static_cast<std::size_t>(
            pick.uniform_int(static_cast<int>(e.value.size())));
        if (std::abs(e.grad.data[i]) < 1e-8) continue;  // skip dead entries
        auto f = [&]() {
            Workspace<double> w2(st, Phase::train);
            auto m = net0_forward(w2, constant(Xt));
            double acc = 0;
            for (double v : m->value.data) acc += v;
            return acc / static_cast<double>(m->value.size());
        };
        const double fd = testutil::fd_derivative(f, e.value.data[i], 1e-5);
        const double a = e.grad.data[i];
        worst = std::max(worst, std::abs(a - fd) /
                                    (1e-8 + 1e-3 * std::max(std::abs(a),
                                                            std::abs(fd))));
        ++checked;
    }
    REQUIRE(worst <= 1.0);
}
