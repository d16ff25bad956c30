#include <catch2/catch_amalgamated.hpp>

#include "condseg/losses.hpp"
#include "condseg/rng.hpp"
#include "test_util.hpp"

using namespace condseg;
using testutil::fd_worst_ratio;
using testutil::rand_prob_away_from;

// ---------------------------------------------------------------------------
// independent scalar oracles (straight transcriptions, no shared code)
// ---------------------------------------------------------------------------

namespace {

double bce_oracle(const Tensor<double>& Y, const Tensor<double>& M) {
    double acc = 0;
    for (std::size_t i = 0; i < Y.size(); ++i) {
        double m = std::min(std::max(M.data[i], 1e-7), 1.0 - 1e-7);
        acc += Y.data[i] * std::log(m) + (1.0 - Y.data[i]) * std::log(1.0 - m);
    }
    return -acc / static_cast<double>(Y.size());
}

double dice_oracle(const Tensor<double>& Y, const Tensor<double>& M) {
    double smy = 0, sm = 0, sy = 0;
    for (std::size_t i = 0; i < Y.size(); ++i) {
        smy += M.data[i] * Y.data[i];
        sm += M.data[i];
        sy += Y.data[i];
    }
    return 1.0 - (2.0 * smy + 1e-6) / (sm + sy + 1e-6);
}

double mask_oracle(const Tensor<double>& Y, const Tensor<double>& M) {
    return bce_oracle(Y, M) + dice_oracle(Y, M);
}

Tensor<double> binarize_oracle(const Tensor<double>& M, double t) {
    Tensor<double> out(M.shape);
    for (std::size_t i = 0; i < M.size(); ++i)
        out.data[i] = M.data[i] >= t ? 1.0 : 0.0;
    return out;
}

double cons_oracle(const Tensor<double>& M1, const Tensor<double>& M2,
                   double t) {
    return 0.5 * (bce_oracle(binarize_oracle(M2, t), M1) +
                  bce_oracle(binarize_oracle(M1, t), M2));
}

double compl_oracle(const Tensor<double>& a, const Tensor<double>& b,
                    const Tensor<double>& c) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += a.data[i] * b.data[i] + a.data[i] * c.data[i] +
               b.data[i] * c.data[i];
    return acc / static_cast<double>(a.size());
}

Tensor<double> random_binary(Shape s, Rng& rng, double p = 0.5) {
    Tensor<double> out(s);
    for (auto& v : out.data) v = rng.uniform() < p ? 1.0 : 0.0;
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// values
// ---------------------------------------------------------------------------

TEST_CASE("bce_loss: closed forms and scalar-loop oracle") {
    Shape s{1, 1, 2, 2};
    Tensor<double> y = Tensor<double>::full(s, 1.0);

    SECTION("perfect binary prediction is ~0 after clamping") {
        auto l = bce_loss(y, constant(y));
        REQUIRE(l.value() >= 0.0);
        REQUIRE(l.value() <= 1e-6);
    }
    SECTION("all-ones target, all-0.5 prediction: -log 0.5") {
        auto l = bce_loss(y, constant(Tensor<double>::full(s, 0.5)));
        REQUIRE(l.value() == Catch::Approx(0.6931471805599453).epsilon(1e-10));
    }
    SECTION("random 4x4 matches the per-pixel oracle") {
        Rng rng(21, "bce");
        Tensor<double> yt = random_binary({1, 1, 4, 4}, rng);
        Tensor<double> mt = rand_uniform<double>({1, 1, 4, 4}, rng, 0.02, 0.98);
        auto l = bce_loss(yt, constant(mt));
        REQUIRE(l.value() == Catch::Approx(bce_oracle(yt, mt)).epsilon(1e-12));
    }
    SECTION("shape mismatch is an error") {
        REQUIRE_THROWS(bce_loss(y, constant(Tensor<double>({1, 1, 2, 3}))));
    }
}

TEST_CASE("dice_loss: closed forms") {
    SECTION("perfect binary overlap ~ 0") {
        Rng rng(22, "dice");
        Tensor<double> y = random_binary({1, 1, 3, 3}, rng, 0.6);
        y.data[0] = 1.0;  // nonempty
        auto l = dice_loss(y, constant(y));
        REQUIRE(std::abs(l.value()) < 1e-6);
    }
    SECTION("empty vs empty ~ 0 via smoothing") {
        Tensor<double> z({1, 1, 2, 2});
        auto l = dice_loss(z, constant(z));
        REQUIRE(std::abs(l.value()) < 1e-6);
    }
    SECTION("half-ones target vs all-ones prediction on 2x2 = 1/3") {
        Tensor<double> y({1, 1, 2, 2});
        y.data[0] = y.data[1] = 1.0;
        Tensor<double> m = Tensor<double>::full({1, 1, 2, 2}, 1.0);
        auto l = dice_loss(y, constant(m));
        REQUIRE(l.value() == Catch::Approx(1.0 / 3.0).margin(1e-6));
    }
    SECTION("range [0,1] on random draws") {
        Rng rng(23, "dice.range");
        for (int i = 0; i < 200; ++i) {
            Tensor<double> y = random_binary({2, 1, 3, 3}, rng);
            Tensor<double> m = rand_uniform<double>({2, 1, 3, 3}, rng);
            double v = dice_loss(y, constant(m)).value();
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("mask_loss: composition and breakdown") {
    Rng rng(24, "mask");
    Tensor<double> y = random_binary({2, 1, 3, 3}, rng);
    Tensor<double> m = rand_uniform<double>({2, 1, 3, 3}, rng, 0.02, 0.98);
    auto l = mask_loss(y, constant(m));
    REQUIRE(l.value() ==
            Catch::Approx(bce_oracle(y, m) + dice_oracle(y, m)).epsilon(1e-12));
    REQUIRE(l.breakdown.at("bce") + l.breakdown.at("dice") ==
            Catch::Approx(l.value()).epsilon(1e-9));

    auto sep =
        bce_loss(y, constant(m)).value() + dice_loss(y, constant(m)).value();
    REQUIRE(l.value() == Catch::Approx(sep).epsilon(1e-12));

    auto perfect = mask_loss(y, constant(y));
    REQUIRE(perfect.value() < 1e-5);
}

TEST_CASE("binarize: inclusive boundary, idempotence, opacity") {
    Tensor<double> m({1, 1, 1, 3});
    m.data = {0.2, 0.5, 0.7};
    Tensor<double> b = binarize(m, 0.5);
    REQUIRE(b.data == std::vector<double>{0.0, 1.0, 1.0});
    REQUIRE(bitwise_equal(binarize(b, 0.5), b));
    REQUIRE_THROWS(binarize(m, 0.0));
    REQUIRE_THROWS(binarize(m, 1.0));

    // gradient-opaque: FD sensitivity of sum(binarize(M)) is exactly 0 away
    // from the threshold
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.data[i] == 0.5) continue;
        auto f = [&]() {
            Tensor<double> bb = binarize(m, 0.5);
            double acc = 0;
            for (double v : bb.data) acc += v;
            return acc;
        };
        REQUIRE(testutil::fd_derivative(f, m.data[i], 1e-5) == 0.0);
    }
}

TEST_CASE("consistency_loss: zero on identical binary masks, symmetric, oracle") {
    Rng rng(25, "cons");
    Tensor<double> mb = random_binary({2, 1, 3, 3}, rng);
    auto lb = consistency_loss(constant(mb), constant(mb), 0.5);
    REQUIRE(lb.value() < 1e-6);

    Tensor<double> m1 = rand_prob_away_from({2, 1, 3, 3}, rng, 0.5);
    Tensor<double> m2 = rand_prob_away_from({2, 1, 3, 3}, rng, 0.5);
    auto l12 = consistency_loss(constant(m1), constant(m2), 0.5);
    auto l21 = consistency_loss(constant(m2), constant(m1), 0.5);
    REQUIRE(l12.value() == l21.value());  // exact symmetry
    REQUIRE(l12.value() ==
            Catch::Approx(cons_oracle(m1, m2, 0.5)).epsilon(1e-12));
}

TEST_CASE("dynamic_penalties: formula transcription") {
    Shape s{1, 1, 4, 4};
    auto [b1, b2] = dynamic_penalties(Tensor<double>::full(s, 1.0),
                                      Tensor<double>::full(s, 0.0));
    REQUIRE(b1 == Catch::Approx(1.0 / std::tanh(1.0)).epsilon(1e-12));
    REQUIRE(b1 == Catch::Approx(1.3130352854993312).epsilon(1e-10));
    REQUIRE(b2 == Catch::Approx(1.0 / std::tanh(1e-4)).epsilon(1e-12));
    REQUIRE(b2 == Catch::Approx(1e4).epsilon(1e-3));
    REQUIRE(std::isfinite(b2));

    double bh = dynamic_penalty(Tensor<double>::full(s, 0.5));
    REQUIRE(bh == Catch::Approx(1.0 / std::tanh(0.5)).epsilon(1e-12));
    REQUIRE(bh == Catch::Approx(2.163953413738653).epsilon(1e-10));

    // floor: never below 1/tanh(1), with equality at full coverage
    Rng rng(26, "beta");
    for (int i = 0; i < 100; ++i) {
        double b = dynamic_penalty(rand_uniform<double>(s, rng));
        REQUIRE(b >= 1.0 / std::tanh(1.0) - 1e-12);
    }
}

TEST_CASE("complementarity_loss: closed forms and bounds") {
    Shape s{1, 1, 2, 2};
    SECTION("one-hot per pixel -> 0") {
        auto l = complementarity_loss(constant(Tensor<double>::full(s, 1.0)),
                                      constant(Tensor<double>(s)),
                                      constant(Tensor<double>(s)));
        REQUIRE(l.value() == 0.0);
    }
    SECTION("uniform thirds -> 1/3") {
        auto third = Tensor<double>::full(s, 1.0 / 3.0);
        auto l = complementarity_loss(constant(third), constant(third),
                                      constant(third));
        REQUIRE(l.value() == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SECTION("all ones -> 3 (worst case)") {
        auto ones = Tensor<double>::full(s, 1.0);
        auto l = complementarity_loss(constant(ones), constant(ones),
                                      constant(ones));
        REQUIRE(l.value() == Catch::Approx(3.0).epsilon(1e-12));
    }
    SECTION("range [0,3] on probability inputs; <= 1/3 when per-pixel sum <= 1") {
        Rng rng(27, "compl");
        for (int i = 0; i < 1000; ++i) {
            Tensor<double> a = rand_uniform<double>(s, rng);
            Tensor<double> b = rand_uniform<double>(s, rng);
            Tensor<double> c = rand_uniform<double>(s, rng);
            double v =
                complementarity_loss(constant(a), constant(b), constant(c))
                    .value();
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 3.0);
            REQUIRE(v == Catch::Approx(compl_oracle(a, b, c)).epsilon(1e-12));

            Tensor<double> an = a, bn = b, cn = c;
            for (std::size_t px = 0; px < a.size(); ++px) {
                double sum = a.data[px] + b.data[px] + c.data[px];
                double scale = sum > 1.0 ? 1.0 / sum : 1.0;
                an.data[px] *= scale;
                bn.data[px] *= scale;
                cn.data[px] *= scale;
            }
            double vn =
                complementarity_loss(constant(an), constant(bn), constant(cn))
                    .value();
            REQUIRE(vn <= 1.0 / 3.0 + 1e-12);
        }
    }
}

TEST_CASE("stage1_loss: breakdown keys and compositional oracle") {
    Rng rng(28, "s1");
    Tensor<double> y = random_binary({2, 1, 3, 3}, rng);
    auto perfect = stage1_loss(y, constant(y), constant(y), 0.5);
    REQUIRE(perfect.value() < 1e-5);

    Tensor<double> m1 = rand_prob_away_from({2, 1, 3, 3}, rng, 0.5);
    Tensor<double> m2 = rand_prob_away_from({2, 1, 3, 3}, rng, 0.5);
    auto l = stage1_loss(y, constant(m1), constant(m2), 0.5);
    REQUIRE(l.breakdown.size() == 3);
    REQUIRE(l.breakdown.count("mask1") == 1);
    REQUIRE(l.breakdown.count("mask2") == 1);
    REQUIRE(l.breakdown.count("cons") == 1);
    double expect =
        mask_oracle(y, m1) + mask_oracle(y, m2) + cons_oracle(m1, m2, 0.5);
    REQUIRE(l.value() == Catch::Approx(expect).epsilon(1e-12));
    double bsum = 0;
    for (const auto& [k, v] : l.breakdown) bsum += v;
    REQUIRE(bsum == Catch::Approx(l.value()).epsilon(1e-9));
}

TEST_CASE("stage2_loss: breakdown keys and compositional oracle") {
    Rng rng(29, "s2");
    Shape s{2, 1, 3, 3};
    Tensor<double> y = random_binary(s, rng);

    SECTION("perfect predictions -> ~0") {
        Tensor<double> yneg(s);
        for (std::size_t i = 0; i < y.size(); ++i) yneg.data[i] = 1 - y.data[i];
        auto l = stage2_loss(y, constant(y), constant(y), constant(yneg),
                             constant(Tensor<double>(s)));
        REQUIRE(l.value() < 1e-4);
    }
    SECTION("random case equals hand-composed sum with fixed betas") {
        Tensor<double> mf = rand_uniform<double>(s, rng, 0.02, 0.98);
        Tensor<double> mfg = rand_uniform<double>(s, rng, 0.02, 0.98);
        Tensor<double> mbg = rand_uniform<double>(s, rng, 0.02, 0.98);
        Tensor<double> muc = rand_uniform<double>(s, rng, 0.02, 0.98);
        auto l = stage2_loss(y, constant(mf), constant(mfg), constant(mbg),
                             constant(muc));
        REQUIRE(l.breakdown.size() == 4);
        for (const char* k : {"mask", "fg", "bg", "compl"})
            REQUIRE(l.breakdown.count(k) == 1);

        Tensor<double> yneg(s);
        for (std::size_t i = 0; i < y.size(); ++i) yneg.data[i] = 1 - y.data[i];
        double b1 = dynamic_penalty(mfg), b2 = dynamic_penalty(mbg);
        double expect = mask_oracle(y, mf) + b1 * mask_oracle(y, mfg) +
                        b2 * mask_oracle(yneg, mbg) +
                        compl_oracle(mfg, mbg, muc);
        REQUIRE(l.value() == Catch::Approx(expect).epsilon(1e-12));
        REQUIRE(l.breakdown.at("fg") ==
                Catch::Approx(b1 * mask_oracle(y, mfg)).epsilon(1e-12));
    }
}

TEST_CASE("kl/js consistency baselines: nonnegative, zero at equality") {
    Rng rng(30, "klds");
    Tensor<double> m = rand_uniform<double>({2, 1, 3, 3}, rng, 0.05, 0.95);
    REQUIRE(kl_consistency(constant(m), constant(m)).value() ==
            Catch::Approx(0.0).margin(1e-12));
    REQUIRE(js_consistency(constant(m), constant(m)).value() ==
            Catch::Approx(0.0).margin(1e-12));
    Tensor<double> m2 = rand_uniform<double>({2, 1, 3, 3}, rng, 0.05, 0.95);
    REQUIRE(kl_consistency(constant(m), constant(m2)).value() > 0.0);
    REQUIRE(js_consistency(constant(m), constant(m2)).value() > 0.0);
}

// ---------------------------------------------------------------------------
// gradient suite: analytic vs central differences, fp64, h=1e-5, rel 1e-4,
// >= 20 random 2x3x3 instances per loss op and ProbMask input
// ---------------------------------------------------------------------------

TEST_CASE("loss gradient suite") {
    Rng rng(31, "lossgrad");
    const Shape s{2, 1, 3, 3};
    const int instances = 20;

    for (int inst = 0; inst < instances; ++inst) {
        Tensor<double> y = random_binary(s, rng);
        Tensor<double> m1 = rand_prob_away_from(s, rng, 0.5);
        Tensor<double> m2 = rand_prob_away_from(s, rng, 0.5);
        Tensor<double> m3 = rand_prob_away_from(s, rng, 0.5);
        Tensor<double> m4 = rand_prob_away_from(s, rng, 0.5);

        {  // bce
            auto v = leaf(m1);
            backward(bce_loss(y, v).node);
            auto f = [&]() { return bce_oracle(y, m1); };
            REQUIRE(fd_worst_ratio(f, m1, v->grad, rng) <= 1.0);
        }
        {  // dice
            auto v = leaf(m1);
            backward(dice_loss(y, v).node);
            auto f = [&]() { return dice_oracle(y, m1); };
            REQUIRE(fd_worst_ratio(f, m1, v->grad, rng) <= 1.0);
        }
        {  // mask
            auto v = leaf(m1);
            backward(mask_loss(y, v).node);
            auto f = [&]() { return mask_oracle(y, m1); };
            REQUIRE(fd_worst_ratio(f, m1, v->grad, rng) <= 1.0);
        }
        {  // consistency (both inputs)
            auto v1 = leaf(m1), v2 = leaf(m2);
            backward(consistency_loss(v1, v2, 0.5).node);
            auto f = [&]() { return cons_oracle(m1, m2, 0.5); };
            REQUIRE(fd_worst_ratio(f, m1, v1->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m2, v2->grad, rng) <= 1.0);
        }
        {  // complementarity (all three inputs)
            auto a = leaf(m1), b = leaf(m2), c = leaf(m3);
            backward(complementarity_loss(a, b, c).node);
            auto f = [&]() { return compl_oracle(m1, m2, m3); };
            REQUIRE(fd_worst_ratio(f, m1, a->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m2, b->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m3, c->grad, rng) <= 1.0);
        }
        {  // stage1 (both masks)
            auto v1 = leaf(m1), v2 = leaf(m2);
            backward(stage1_loss(y, v1, v2, 0.5).node);
            auto f = [&]() {
                return mask_oracle(y, m1) + mask_oracle(y, m2) +
                       cons_oracle(m1, m2, 0.5);
            };
            REQUIRE(fd_worst_ratio(f, m1, v1->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m2, v2->grad, rng) <= 1.0);
        }
        {  // stage2 (all four masks); betas are detached, so the oracle holds
           // them fixed at their base-point values
            auto vf = leaf(m1), vfg = leaf(m2), vbg = leaf(m3), vuc = leaf(m4);
            backward(stage2_loss(y, vf, vfg, vbg, vuc).node);
            const double b1 = dynamic_penalty(m2), b2 = dynamic_penalty(m3);
            Tensor<double> yneg(s);
            for (std::size_t i = 0; i < y.size(); ++i)
                yneg.data[i] = 1 - y.data[i];
            auto f = [&]() {
                return mask_oracle(y, m1) + b1 * mask_oracle(y, m2) +
                       b2 * mask_oracle(yneg, m3) + compl_oracle(m2, m3, m4);
            };
            REQUIRE(fd_worst_ratio(f, m1, vf->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m2, vfg->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m3, vbg->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(f, m4, vuc->grad, rng) <= 1.0);
        }
        {  // kl / js baselines
            auto v1 = leaf(m1), v2 = leaf(m2);
            backward(kl_consistency(v1, v2).node);
            auto fk = [&]() {
                return kl_consistency(constant(m1), constant(m2)).value();
            };
            REQUIRE(fd_worst_ratio(fk, m1, v1->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(fk, m2, v2->grad, rng) <= 1.0);

            auto w1 = leaf(m1), w2 = leaf(m2);
            backward(js_consistency(w1, w2).node);
            auto fj = [&]() {
                return js_consistency(constant(m1), constant(m2)).value();
            };
            REQUIRE(fd_worst_ratio(fj, m1, w1->grad, rng) <= 1.0);
            REQUIRE(fd_worst_ratio(fj, m2, w2->grad, rng) <= 1.0);
        }
    }
}

TEST_CASE("losses stay finite at saturated inputs") {
    Shape s{1, 1, 2, 2};
    Tensor<double> y({1, 1, 2, 2});
    y.data = {1, 0, 1, 0};
    for (double v : {0.0, 1.0}) {
        Tensor<double> m = Tensor<double>::full(s, v);
        REQUIRE(std::isfinite(bce_loss(y, constant(m)).value()));
        REQUIRE(std::isfinite(dice_loss(y, constant(m)).value()));
        REQUIRE(std::isfinite(
            consistency_loss(constant(m), constant(m), 0.5).value()));
        REQUIRE(std::isfinite(kl_consistency(constant(m), constant(m)).value()));
        REQUIRE(std::isfinite(js_consistency(constant(m), constant(m)).value()));
    }
}
