#include <catch2/catch_amalgamated.hpp>

#include "condseg/metrics.hpp"
#include "condseg/rng.hpp"

using namespace condseg;

namespace {

Tensor<float> mask_from(const std::vector<int>& bits, int h, int w) {
    Tensor<float> m({1, 1, h, w});
    for (std::size_t i = 0; i < bits.size(); ++i)
        m.data[i] = static_cast<float>(bits[i]);
    return m;
}

}  // namespace

TEST_CASE("confusion: exact counts") {
    SECTION("pred == truth has no errors") {
        Rng rng(1, "conf");
        Tensor<float> m({1, 1, 4, 4});
        for (auto& v : m.data) v = rng.uniform() < 0.4 ? 1.f : 0.f;
        ConfusionCounts c = confusion(m, m);
        REQUIRE(c.fp == 0);
        REQUIRE(c.fn == 0);
        REQUIRE(c.total() == 16);
    }
    SECTION("pred == !truth has no correct pixels") {
        Tensor<float> t = mask_from({1, 0, 1, 0}, 2, 2);
        Tensor<float> p = mask_from({0, 1, 0, 1}, 2, 2);
        ConfusionCounts c = confusion(p, t);
        REQUIRE(c.tp == 0);
        REQUIRE(c.tn == 0);
        REQUIRE(c.fp == 2);
        REQUIRE(c.fn == 2);
    }
    SECTION("crafted 4x4 matches hand enumeration") {
        // truth: top half; pred: left half
        Tensor<float> t = mask_from({1,1,1,1, 1,1,1,1, 0,0,0,0, 0,0,0,0}, 4, 4);
        Tensor<float> p = mask_from({1,1,0,0, 1,1,0,0, 1,1,0,0, 1,1,0,0}, 4, 4);
        ConfusionCounts c = confusion(p, t);
        REQUIRE(c.tp == 4);
        REQUIRE(c.fp == 4);
        REQUIRE(c.fn == 4);
        REQUIRE(c.tn == 4);
    }
    SECTION("non-binary input is an error") {
        Tensor<float> t = mask_from({1, 0, 1, 0}, 2, 2);
        Tensor<float> bad = t;
        bad.data[0] = 0.5f;
        REQUIRE_THROWS(confusion(bad, t));
    }
}

TEST_CASE("image_metrics: formulas and conventions") {
    SECTION("perfect") {
        ImageMetrics m = image_metrics({10, 0, 0, 6});
        REQUIRE(m.iou == 1.0);
        REQUIRE(m.dsc == 1.0);
        REQUIRE(m.recall == 1.0);
        REQUIRE(m.precision == 1.0);
    }
    SECTION("tp=2 fp=1 fn=1") {
        ImageMetrics m = image_metrics({2, 1, 1, 12});
        REQUIRE(m.iou == Catch::Approx(0.5));
        REQUIRE(m.dsc == Catch::Approx(2.0 / 3.0));
        REQUIRE(m.recall == Catch::Approx(2.0 / 3.0));
        REQUIRE(m.precision == Catch::Approx(2.0 / 3.0));
    }
    SECTION("both empty -> all ones by convention") {
        ImageMetrics m = image_metrics({0, 0, 0, 16});
        REQUIRE(m.iou == 1.0);
        REQUIRE(m.dsc == 1.0);
        REQUIRE(m.recall == 1.0);
        REQUIRE(m.precision == 1.0);
    }
    SECTION("empty prediction vs nonempty truth -> recall 0") {
        ImageMetrics m = image_metrics({0, 0, 5, 11});
        REQUIRE(m.recall == 0.0);
        REQUIRE(m.iou == 0.0);
        REQUIRE(m.precision == 1.0);  // nothing claimed
    }
}

TEST_CASE("image_metrics: dsc = 2*iou/(1+iou) identity") {
    Rng rng(2, "ident");
    for (int i = 0; i < 500; ++i) {
        ConfusionCounts c;
        c.tp = rng.uniform_int(20);
        c.fp = rng.uniform_int(20);
        c.fn = rng.uniform_int(20);
        c.tn = rng.uniform_int(20);
        ImageMetrics m = image_metrics(c);
        REQUIRE(m.iou >= 0.0);
        REQUIRE(m.iou <= m.dsc + 1e-12);
        REQUIRE(m.dsc <= 1.0);
        REQUIRE(std::abs(m.dsc - 2.0 * m.iou / (1.0 + m.iou)) < 1e-12);
    }
}

TEST_CASE("metrics invariant under simultaneous spatial permutation") {
    Rng rng(3, "perm");
    Tensor<float> p({1, 1, 4, 4}), t({1, 1, 4, 4});
    for (auto& v : p.data) v = rng.uniform() < 0.5 ? 1.f : 0.f;
    for (auto& v : t.data) v = rng.uniform() < 0.5 ? 1.f : 0.f;

    std::vector<int> perm(16);
    for (int i = 0; i < 16; ++i) perm[i] = i;
    for (int i = 16; i > 1; --i)
        std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    Tensor<float> pp({1, 1, 4, 4}), tp({1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) {
        pp.data[perm[i]] = p.data[i];
        tp.data[perm[i]] = t.data[i];
    }
    ImageMetrics a = image_metrics(confusion(p, t));
    ImageMetrics b = image_metrics(confusion(pp, tp));
    REQUIRE(a.iou == b.iou);
    REQUIRE(a.dsc == b.dsc);
    REQUIRE(a.recall == b.recall);
    REQUIRE(a.precision == b.precision);
}

TEST_CASE("dataset_means: macro averaging") {
    SECTION("single image") {
        ImageMetrics m{0.5, 0.6, 0.7, 0.8};
        ImageMetrics avg = dataset_means({m});
        REQUIRE(avg.iou == 0.5);
        REQUIRE(avg.dsc == 0.6);
    }
    SECTION("two images at 0 and 1 average to 0.5") {
        ImageMetrics a{0, 0, 0, 0}, b{1, 1, 1, 1};
        ImageMetrics avg = dataset_means({a, b});
        REQUIRE(avg.iou == 0.5);
        REQUIRE(avg.precision == 0.5);
    }
    SECTION("five random images match a hand average") {
        Rng rng(4, "means");
        std::vector<ImageMetrics> ms;
        double siou = 0;
        for (int i = 0; i < 5; ++i) {
            ImageMetrics m{rng.uniform(), rng.uniform(), rng.uniform(),
                           rng.uniform()};
            siou += m.iou;
            ms.push_back(m);
        }
        REQUIRE(dataset_means(ms).iou == Catch::Approx(siou / 5.0));
    }
    SECTION("empty list is an error") {
        REQUIRE_THROWS(dataset_means({}));
    }
}
