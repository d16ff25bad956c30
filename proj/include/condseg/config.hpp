#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condseg/common.hpp"

namespace condseg {

using ordered_json = nlohmann::ordered_json;

// Photometric strong-augmentation policy. Ranges are inclusive [lo, hi];
// identity is brightness/contrast/saturation 1, hue shift 0 (mod 1).
struct AugPolicy {
    double brightness_lo = 0.5, brightness_hi = 1.5;
    double contrast_lo = 0.5, contrast_hi = 1.5;
    double saturation_lo = 0.5, saturation_hi = 1.5;
    double hue_lo = -0.1, hue_hi = 0.1;
    double p_grayscale = 0.2;
    double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
    double p_blur = 0.5;
};

// Synthetic low-contrast blob dataset. Radii are fractions of the image
// side; contrast is the foreground/background intensity gap.
struct SynthSpec {
    int n_images = 240;
    int size = 64;
    int blob_count_lo = 1, blob_count_hi = 3;
    double radius_lo = 0.08, radius_hi = 0.22;
    double contrast_lo = 0.15, contrast_hi = 0.45;
    double illumination = 0.25;
    double noise_sigma = 0.03;
    bool co_occurrence = true;
    std::uint64_t seed = 7;
};

enum class NormKind { batch, group };

struct TrainConfig {
    int image_size = 64;       // paper: 256
    int batch_size = 4;        // paper: 4
    double lr_stage1 = 1e-4;   // paper: 1e-4
    double lr_stage2_encoder = 1e-5;  // paper: 1e-5
    double lr_stage2_rest = 1e-4;     // paper: 1e-4
    int epochs_stage1 = 50;
    int epochs_stage2 = 50;
    int K = 3;        // CDFA window size
    double t = 0.5;   // binarization threshold
    std::uint64_t seed = 42;
    std::string encoder_id = "tiny-residual";
    std::array<int, 4> channel_widths = {16, 32, 64, 128};
    std::string norm = "batch";  // "batch" | "group"
    AugPolicy augment;
    SynthSpec synth;

    NormKind norm_kind() const {
        if (norm == "batch") return NormKind::batch;
        if (norm == "group") return NormKind::group;
        throw ConfigError("norm must be \"batch\" or \"group\", got \"" +
                          norm + "\"");
    }
};

// Returns every violated invariant, not just the first.
inline std::vector<std::string> validate_config(const TrainConfig& cfg) {
    std::vector<std::string> errors;
    auto bad = [&](const std::string& m) { errors.push_back(m); };

    if (cfg.K < 1 || cfg.K % 2 == 0) bad("K must be odd");
    if (!(cfg.t > 0.0 && cfg.t < 1.0)) bad("t in (0,1)");
    if (cfg.image_size < 32 || cfg.image_size % 32 != 0)
        bad("image_size must be divisible by 32");
    if (cfg.batch_size < 1) bad("batch_size must be >= 1");
    if (!(cfg.lr_stage1 > 0)) bad("lr_stage1 must be > 0");
    if (!(cfg.lr_stage2_encoder > 0)) bad("lr_stage2_encoder must be > 0");
    if (!(cfg.lr_stage2_rest > 0)) bad("lr_stage2_rest must be > 0");
    if (cfg.epochs_stage1 < 0) bad("epochs_stage1 must be >= 0");
    if (cfg.epochs_stage2 < 0) bad("epochs_stage2 must be >= 0");
    for (int wch : cfg.channel_widths)
        if (wch < 1) {
            bad("channel_widths must all be >= 1");
            break;
        }
    if (cfg.norm != "batch" && cfg.norm != "group")
        bad("norm must be \"batch\" or \"group\"");

    const AugPolicy& a = cfg.augment;
    auto range_ok = [](double lo, double hi) { return lo <= hi; };
    if (!range_ok(a.brightness_lo, a.brightness_hi))
        bad("augment.brightness range must be ordered");
    if (!range_ok(a.contrast_lo, a.contrast_hi))
        bad("augment.contrast range must be ordered");
    if (!range_ok(a.saturation_lo, a.saturation_hi))
        bad("augment.saturation range must be ordered");
    if (!range_ok(a.hue_lo, a.hue_hi)) bad("augment.hue range must be ordered");
    if (!range_ok(a.blur_sigma_lo, a.blur_sigma_hi) || a.blur_sigma_lo < 0)
        bad("augment.blur_sigma range must be ordered and nonnegative");
    if (a.p_grayscale < 0 || a.p_grayscale > 1)
        bad("augment.p_grayscale in [0,1]");
    if (a.p_blur < 0 || a.p_blur > 1) bad("augment.p_blur in [0,1]");

    const SynthSpec& s = cfg.synth;
    if (s.n_images < 1) bad("synth.n_images must be >= 1");
    if (s.size < 32 || s.size % 32 != 0)
        bad("synth.size must be divisible by 32");
    if (s.blob_count_lo < 1 || s.blob_count_hi < s.blob_count_lo)
        bad("synth.blob_count range invalid");
    if (!(s.radius_lo > 0 && s.radius_hi < 0.5 && s.radius_lo <= s.radius_hi))
        bad("synth.radius range must lie in (0, 0.5)");
    if (!(s.contrast_lo > 0 && s.contrast_hi <= 1.0 &&
          s.contrast_lo <= s.contrast_hi))
        bad("synth.contrast range must lie in (0, 1]");
    if (s.illumination < 0) bad("synth.illumination must be >= 0");
    if (s.noise_sigma < 0) bad("synth.noise_sigma must be >= 0");

    return errors;
}

namespace detail {

inline void check_keys(const ordered_json& j,
                       const std::vector<std::string>& known,
                       const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError("unknown config key \"" + scope + it.key() +
                              "\"");
    }
}

template <typename T>
void fetch(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config key \"") + key +
                              "\": " + e.what());
        }
    }
}

}  // namespace detail

inline ordered_json augment_to_json(const AugPolicy& a) {
    return ordered_json{{"brightness", {a.brightness_lo, a.brightness_hi}},
                        {"contrast", {a.contrast_lo, a.contrast_hi}},
                        {"saturation", {a.saturation_lo, a.saturation_hi}},
                        {"hue", {a.hue_lo, a.hue_hi}},
                        {"p_grayscale", a.p_grayscale},
                        {"blur_sigma", {a.blur_sigma_lo, a.blur_sigma_hi}},
                        {"p_blur", a.p_blur}};
}

inline ordered_json synth_to_json(const SynthSpec& s) {
    return ordered_json{{"n_images", s.n_images},
                        {"size", s.size},
                        {"blob_count", {s.blob_count_lo, s.blob_count_hi}},
                        {"radius", {s.radius_lo, s.radius_hi}},
                        {"contrast", {s.contrast_lo, s.contrast_hi}},
                        {"illumination", s.illumination},
                        {"noise_sigma", s.noise_sigma},
                        {"co_occurrence", s.co_occurrence},
                        {"seed", s.seed}};
}

inline ordered_json config_to_json(const TrainConfig& c) {
    ordered_json j;
    j["image_size"] = c.image_size;
    j["batch_size"] = c.batch_size;
    j["lr_stage1"] = c.lr_stage1;
    j["lr_stage2_encoder"] = c.lr_stage2_encoder;
    j["lr_stage2_rest"] = c.lr_stage2_rest;
    j["epochs_stage1"] = c.epochs_stage1;
    j["epochs_stage2"] = c.epochs_stage2;
    j["K"] = c.K;
    j["t"] = c.t;
    j["seed"] = c.seed;
    j["encoder_id"] = c.encoder_id;
    j["channel_widths"] = c.channel_widths;
    j["norm"] = c.norm;
    j["augment"] = augment_to_json(c.augment);
    j["synth"] = synth_to_json(c.synth);
    return j;
}

inline std::string serialize_config(const TrainConfig& c) {
    return config_to_json(c).dump(2) + "\n";
}

namespace detail {

inline void range_from_json(const ordered_json& j, const char* key,
                            double& lo, double& hi) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2)
        throw ConfigError(std::string("config key \"") + key +
                          "\" must be a [lo, hi] pair");
    lo = v[0].get<double>();
    hi = v[1].get<double>();
}

}  // namespace detail

inline AugPolicy augment_from_json(const ordered_json& j) {
    detail::check_keys(j,
                       {"brightness", "contrast", "saturation", "hue",
                        "p_grayscale", "blur_sigma", "p_blur"},
                       "augment.");
    AugPolicy a;
    detail::range_from_json(j, "brightness", a.brightness_lo, a.brightness_hi);
    detail::range_from_json(j, "contrast", a.contrast_lo, a.contrast_hi);
    detail::range_from_json(j, "saturation", a.saturation_lo, a.saturation_hi);
    detail::range_from_json(j, "hue", a.hue_lo, a.hue_hi);
    detail::fetch(j, "p_grayscale", a.p_grayscale);
    detail::range_from_json(j, "blur_sigma", a.blur_sigma_lo, a.blur_sigma_hi);
    detail::fetch(j, "p_blur", a.p_blur);
    return a;
}

inline SynthSpec synth_from_json(const ordered_json& j) {
    detail::check_keys(j,
                       {"n_images", "size", "blob_count", "radius", "contrast",
                        "illumination", "noise_sigma", "co_occurrence",
                        "seed"},
                       "synth.");
    SynthSpec s;
    detail::fetch(j, "n_images", s.n_images);
    detail::fetch(j, "size", s.size);
    if (j.contains("blob_count")) {
        const auto& v = j.at("blob_count");
        if (!v.is_array() || v.size() != 2)
            throw ConfigError("synth.blob_count must be a [lo, hi] pair");
        s.blob_count_lo = v[0].get<int>();
        s.blob_count_hi = v[1].get<int>();
    }
    detail::range_from_json(j, "radius", s.radius_lo, s.radius_hi);
    detail::range_from_json(j, "contrast", s.contrast_lo, s.contrast_hi);
    detail::fetch(j, "illumination", s.illumination);
    detail::fetch(j, "noise_sigma", s.noise_sigma);
    detail::fetch(j, "co_occurrence", s.co_occurrence);
    detail::fetch(j, "seed", s.seed);
    return s;
}

inline TrainConfig config_from_json(const ordered_json& j) {
    detail::check_keys(
        j, {"image_size", "batch_size", "lr_stage1", "lr_stage2_encoder",
            "lr_stage2_rest", "epochs_stage1", "epochs_stage2", "K", "t",
            "seed", "encoder_id", "channel_widths", "norm", "augment",
            "synth"},
        "");
    TrainConfig c;
    detail::fetch(j, "image_size", c.image_size);
    detail::fetch(j, "batch_size", c.batch_size);
    detail::fetch(j, "lr_stage1", c.lr_stage1);
    detail::fetch(j, "lr_stage2_encoder", c.lr_stage2_encoder);
    detail::fetch(j, "lr_stage2_rest", c.lr_stage2_rest);
    detail::fetch(j, "epochs_stage1", c.epochs_stage1);
    detail::fetch(j, "epochs_stage2", c.epochs_stage2);
    detail::fetch(j, "K", c.K);
    detail::fetch(j, "t", c.t);
    detail::fetch(j, "seed", c.seed);
    detail::fetch(j, "encoder_id", c.encoder_id);
    if (j.contains("channel_widths")) {
        const auto& v = j.at("channel_widths");
        if (!v.is_array() || v.size() != 4)
            throw ConfigError("channel_widths must be a list of 4 counts");
        for (int i = 0; i < 4; ++i) c.channel_widths[i] = v[i].get<int>();
    }
    detail::fetch(j, "norm", c.norm);
    if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"));
    if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"));
    return c;
}

inline TrainConfig parse_config(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string config_hash(const TrainConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(
                      fnv1a64(serialize_config(c))));
    return buf;
}

// Identifies everything a checkpoint's encoder tensors depend on.
inline std::string encoder_signature(const TrainConfig& c) {
    std::string s = c.encoder_id + "|" + c.norm;
    for (int wch : c.channel_widths) s += "|" + std::to_string(wch);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(s)));
    return buf;
}

}  // namespace condseg
