#pragma once

#include <cstdint>
#include <vector>

#include "condseg/tensor.hpp"

namespace condseg {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::int64_t total() const { return tp + fp + fn + tn; }
};

// Exact integer counts; inputs must be strictly {0,1}.
inline ConfusionCounts confusion(const Tensor<float>& pred,
                                 const Tensor<float>& truth) {
    check_same_shape(pred.shape, truth.shape, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        float p = pred.data[i], t = truth.data[i];
        require((p == 0.f || p == 1.f) && (t == 0.f || t == 1.f),
                "confusion: inputs must be binary");
        if (p == 1.f && t == 1.f) ++c.tp;
        else if (p == 1.f) ++c.fp;
        else if (t == 1.f) ++c.fn;
        else ++c.tn;
    }
    return c;
}

struct ImageMetrics {
    double iou = 0, dsc = 0, recall = 0, precision = 0;
};

// 0/0 conventions: empty truth and empty prediction agree perfectly (1);
// nothing to find -> recall 1; nothing claimed -> precision 1.
inline ImageMetrics image_metrics(const ConfusionCounts& c) {
    ImageMetrics m;
    const double tp = static_cast<double>(c.tp);
    m.iou = (c.tp + c.fp + c.fn) == 0 ? 1.0 : tp / (c.tp + c.fp + c.fn);
    m.dsc = (2 * c.tp + c.fp + c.fn) == 0 ? 1.0 : 2 * tp / (2 * c.tp + c.fp + c.fn);
    m.recall = (c.tp + c.fn) == 0 ? 1.0 : tp / (c.tp + c.fn);
    m.precision = (c.tp + c.fp) == 0 ? 1.0 : tp / (c.tp + c.fp);
    return m;
}

// Macro average: arithmetic mean of per-image metrics.
inline ImageMetrics dataset_means(const std::vector<ImageMetrics>& per_image) {
    require(!per_image.empty(), "dataset_means: empty per-image list");
    ImageMetrics m;
    for (const auto& im : per_image) {
        m.iou += im.iou;
        m.dsc += im.dsc;
        m.recall += im.recall;
        m.precision += im.precision;
    }
    const double n = static_cast<double>(per_image.size());
    m.iou /= n;
    m.dsc /= n;
    m.recall /= n;
    m.precision /= n;
    return m;
}

}  // namespace condseg
