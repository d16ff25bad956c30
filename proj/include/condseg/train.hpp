#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "condseg/augment.hpp"
#include "condseg/data.hpp"
#include "condseg/losses.hpp"
#include "condseg/metrics.hpp"
#include "condseg/model.hpp"

namespace condseg {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, std::pair<Tensor<float>, Tensor<float>>> mv;
    long step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct LrGroup {
    std::vector<std::string> names;
    double lr;
};

inline void adam_step(ParamStore<float>& store, AdamState& st,
                      const std::vector<LrGroup>& groups) {
    ++st.step;
    const double b1c = 1.0 - std::pow(st.beta1, st.step);
    const double b2c = 1.0 - std::pow(st.beta2, st.step);
    for (const auto& group : groups)
        for (const auto& name : group.names) {
            auto& e = store.at(name);
            if (!e.trainable) continue;
            auto it = st.mv.find(name);
            if (it == st.mv.end())
                it = st.mv.emplace(name,
                                   std::make_pair(Tensor<float>(e.value.shape),
                                                  Tensor<float>(e.value.shape)))
                         .first;
            auto& [m, v] = it->second;
            for (std::size_t i = 0; i < e.value.size(); ++i) {
                const double g = e.grad.data[i];
                m.data[i] = static_cast<float>(st.beta1 * m.data[i] +
                                               (1 - st.beta1) * g);
                v.data[i] = static_cast<float>(st.beta2 * v.data[i] +
                                               (1 - st.beta2) * g * g);
                const double mhat = m.data[i] / b1c;
                const double vhat = v.data[i] / b2c;
                e.value.data[i] -= static_cast<float>(
                    group.lr * mhat / (std::sqrt(vhat) + st.eps));
            }
        }
}

// ---------------------------------------------------------------------------
// records
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    std::string split;  // "train" | "val"
    std::vector<std::pair<std::string, double>> loss;
    std::map<std::string, double> metrics;  // val split only
    double wall_seconds = 0;
};

inline std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    return out + "\"";
}

inline void write_records_csv(const std::filesystem::path& path,
                              const std::vector<EpochRecord>& records) {
    std::vector<std::string> loss_keys;
    for (const auto& r : records)
        for (const auto& [k, v] : r.loss)
            if (std::find(loss_keys.begin(), loss_keys.end(), k) ==
                loss_keys.end())
                loss_keys.push_back(k);

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write CSV: " + path.string());
    out << "epoch,split";
    for (const auto& k : loss_keys) out << ',' << csv_quote("loss_" + k);
    out << ",miou,mdsc,recall,precision,wall_time\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return std::string(buf);
    };
    for (const auto& r : records) {
        out << r.epoch << ',' << csv_quote(r.split);
        for (const auto& k : loss_keys) {
            auto it = std::find_if(r.loss.begin(), r.loss.end(),
                                   [&](const auto& p) { return p.first == k; });
            out << ',';
            if (it != r.loss.end()) out << num(it->second);
        }
        for (const char* mk : {"miou", "mdsc", "recall", "precision"}) {
            auto it = r.metrics.find(mk);
            out << ',';
            if (it != r.metrics.end()) out << num(it->second);
        }
        out << ',' << num(r.wall_seconds) << '\n';
    }
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

namespace traindetail {

inline std::pair<Tensor<float>, Tensor<float>> make_batch(
    const std::vector<SampleRecord>& recs, const std::vector<std::size_t>& idx,
    std::size_t begin, std::size_t end) {
    const int B = static_cast<int>(end - begin);
    const Shape is = recs[idx[begin]].image.shape;
    const Shape ms = recs[idx[begin]].mask.shape;
    Tensor<float> X({B, is.c, is.h, is.w});
    Tensor<float> Y({B, ms.c, ms.h, ms.w});
    for (int b = 0; b < B; ++b) {
        const SampleRecord& r = recs[idx[begin + b]];
        check_same_shape(r.image.shape, is, "make_batch: image");
        check_same_shape(r.mask.shape, ms, "make_batch: mask");
        std::copy(r.image.data.begin(), r.image.data.end(), X.sample(b));
        std::copy(r.mask.data.begin(), r.mask.data.end(), Y.sample(b));
    }
    return {std::move(X), std::move(Y)};
}

inline void check_finite_loss(double v, const std::string& where) {
    if (!std::isfinite(v))
        throw std::runtime_error("non-finite loss (" + std::to_string(v) +
                                 ") at " + where +
                                 "; aborting (check learning rates and data)");
}

inline std::map<std::string, double> mask_metrics_batch(
    const Tensor<float>& pred_bin, const Tensor<float>& Y,
    std::vector<ImageMetrics>* sink) {
    const int B = pred_bin.shape.n;
    const std::size_t per = pred_bin.size() / B;
    std::map<std::string, double> out;
    for (int b = 0; b < B; ++b) {
        Tensor<float> p({1, 1, pred_bin.shape.h, pred_bin.shape.w});
        Tensor<float> t({1, 1, Y.shape.h, Y.shape.w});
        std::copy(pred_bin.sample(b), pred_bin.sample(b) + per, p.ptr());
        std::copy(Y.sample(b), Y.sample(b) + per, t.ptr());
        sink->push_back(image_metrics(confusion(p, t)));
    }
    return out;
}

}  // namespace traindetail

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::filesystem::path checkpoint;
    std::vector<EpochRecord> records;
    double best_val_mdsc = -1.0;
};

enum class Stage1Mode { cr, net0_only };  // with / without Consistency Reinforcement

// Stage 1: Consistency Reinforcement on Net0. Per batch, M1 = Net0(X) and
// M2 = Net0(Aug(X)) optimize L_stage1; in net0_only mode (the Table-3
// "without CR" rows) only L_mask(Y, M1) is used. Saves the epoch with the
// best validation mDSC.
inline TrainResult train_stage1(const TrainConfig& cfg,
                                const std::vector<SampleRecord>& train_set,
                                const std::vector<SampleRecord>& val_set,
                                const std::filesystem::path& out_dir,
                                Stage1Mode mode = Stage1Mode::cr,
                                ConsVariant cons = ConsVariant::builtin) {
    require(!train_set.empty(), "train_stage1: empty training set");
    require(!val_set.empty(), "train_stage1: empty validation set");
    auto errs = validate_config(cfg);
    if (!errs.empty()) {
        std::string all;
        for (const auto& e : errs) all += (all.empty() ? "" : "; ") + e;
        throw ConfigError("invalid config: " + all);
    }

    ParamStore<float> store;
    Rng init_rng(cfg.seed, "stage1.init");
    init_net0(store, cfg, init_rng);

    AdamState adam;
    std::vector<LrGroup> groups{{store.names(), cfg.lr_stage1}};

    Rng shuffle_rng(cfg.seed, "stage1.shuffle");
    Rng aug_rng(cfg.seed, "stage1.aug");

    TrainResult result;
    result.checkpoint = out_dir / "stage1_best.ckpt";
    std::vector<std::size_t> idx(train_set.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs_stage1; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1],
                      idx[shuffle_rng.uniform_int(static_cast<int>(i))]);

        std::map<std::string, double> loss_sums;
        int batches = 0;
        for (std::size_t off = 0; off < idx.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(off + static_cast<std::size_t>(cfg.batch_size),
                         idx.size());
            auto [X0, Y0] = traindetail::make_batch(train_set, idx, off, end);
            auto [X, Y] = simple_augment(X0, Y0, aug_rng);

            Workspace<float> ws(store, Phase::train);
            Var<float> m1 = net0_forward(ws, constant(X));
            LossValue<float> loss;
            if (mode == Stage1Mode::cr) {
                Tensor<float> Xs = strong_augment(X, cfg.augment, aug_rng);
                Var<float> m2 = net0_forward(ws, constant(std::move(Xs)));
                loss = stage1_loss_variant(Y, m1, m2, cfg.t, cons);
            } else {
                loss = mask_loss(Y, m1);
                loss.breakdown = {{"mask1", loss.value()}};
            }
            traindetail::check_finite_loss(
                loss.value(), "stage1 epoch " + std::to_string(epoch) +
                                  " batch " + std::to_string(batches));
            backward(loss.node);
            collect_grads(ws);
            adam_step(store, adam, groups);
            store.zero_grads();

            loss_sums["total"] += loss.value();
            for (const auto& [k, v] : loss.breakdown) loss_sums[k] += v;
            ++batches;
        }

        EpochRecord tr;
        tr.epoch = epoch;
        tr.split = "train";
        for (const auto& [k, v] : loss_sums)
            tr.loss.emplace_back(k, v / batches);
        tr.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        result.records.push_back(tr);

        // validation: L_mask on the clean image + metrics at threshold t
        auto tv0 = std::chrono::steady_clock::now();
        double vloss = 0;
        int vbatches = 0;
        std::vector<ImageMetrics> per_image;
        std::vector<std::size_t> vidx(val_set.size());
        for (std::size_t i = 0; i < vidx.size(); ++i) vidx[i] = i;
        for (std::size_t off = 0; off < vidx.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(off + static_cast<std::size_t>(cfg.batch_size),
                         vidx.size());
            auto [X, Y] = traindetail::make_batch(val_set, vidx, off, end);
            Workspace<float> ws(store, Phase::eval);
            Var<float> m1 = net0_forward(ws, constant(X));
            LossValue<float> lm = mask_loss(Y, m1);
            vloss += lm.value();
            ++vbatches;
            Tensor<float> bin = binarize(m1->value, cfg.t);
            traindetail::mask_metrics_batch(bin, Y, &per_image);
        }
        ImageMetrics means = dataset_means(per_image);
        EpochRecord vr;
        vr.epoch = epoch;
        vr.split = "val";
        vr.loss.emplace_back("mask1", vloss / vbatches);
        vr.metrics = {{"miou", means.iou},
                      {"mdsc", means.dsc},
                      {"recall", means.recall},
                      {"precision", means.precision}};
        vr.wall_seconds = std::chrono::duration<double>(
                              std::chrono::steady_clock::now() - tv0)
                              .count();
        result.records.push_back(vr);

        if (means.dsc > result.best_val_mdsc) {
            result.best_val_mdsc = means.dsc;
            std::filesystem::create_directories(out_dir);
            save_checkpoint(store, result.checkpoint, cfg);
        }
    }
    return result;
}

// Stage 2: full network. With an encoder checkpoint this is the two-stage
// regime (encoder fine-tunes at the lower rate); without one it is the
// paper's One-Stage ablation, trained from scratch at lr_stage2_rest
// everywhere.
inline TrainResult train_stage2(
    const TrainConfig& cfg, const std::vector<SampleRecord>& train_set,
    const std::vector<SampleRecord>& val_set,
    const std::optional<std::filesystem::path>& encoder_ckpt,
    const std::filesystem::path& out_dir) {
    require(!train_set.empty(), "train_stage2: empty training set");
    require(!val_set.empty(), "train_stage2: empty validation set");
    auto errs = validate_config(cfg);
    if (!errs.empty()) {
        std::string all;
        for (const auto& e : errs) all += (all.empty() ? "" : "; ") + e;
        throw ConfigError("invalid config: " + all);
    }

    ParamStore<float> store;
    Rng init_rng(cfg.seed, "stage2.init");
    init_condseg(store, cfg, init_rng);

    std::vector<LrGroup> groups;
    if (encoder_ckpt) {
        CkptManifest m = read_ckpt_manifest(*encoder_ckpt);
        if (m.encoder_sig != encoder_signature(cfg))
            throw std::runtime_error(
                "encoder checkpoint " + encoder_ckpt->string() +
                " was built with different encoder settings (signature " +
                m.encoder_sig + " vs " + encoder_signature(cfg) + ")");
        load_checkpoint_into(store, *encoder_ckpt, "encoder.");
        ParamGroups pg = param_groups(store, cfg);
        groups = {{pg.encoder, pg.lr_encoder}, {pg.rest, pg.lr_rest}};
    } else {
        groups = {{store.names(), cfg.lr_stage2_rest}};
    }

    AdamState adam;
    Rng shuffle_rng(cfg.seed, "stage2.shuffle");
    Rng aug_rng(cfg.seed, "stage2.aug");

    TrainResult result;
    result.checkpoint = out_dir / "stage2_best.ckpt";
    std::vector<std::size_t> idx(train_set.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs_stage2; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1],
                      idx[shuffle_rng.uniform_int(static_cast<int>(i))]);

        std::map<std::string, double> loss_sums;
        int batches = 0;
        for (std::size_t off = 0; off < idx.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(off + static_cast<std::size_t>(cfg.batch_size),
                         idx.size());
            auto [X0, Y0] = traindetail::make_batch(train_set, idx, off, end);
            auto [X, Y] = simple_augment(X0, Y0, aug_rng);

            Workspace<float> ws(store, Phase::train);
            Stage2Output<float> out = condseg_forward(ws, constant(X), cfg.K);
            LossValue<float> loss =
                stage2_loss(Y, out.m_final, out.m_fg, out.m_bg, out.m_uc);
            traindetail::check_finite_loss(
                loss.value(), "stage2 epoch " + std::to_string(epoch) +
                                  " batch " + std::to_string(batches));
            backward(loss.node);
            collect_grads(ws);
            adam_step(store, adam, groups);
            store.zero_grads();

            loss_sums["total"] += loss.value();
            for (const auto& [k, v] : loss.breakdown) loss_sums[k] += v;
            ++batches;
        }

        EpochRecord tr;
        tr.epoch = epoch;
        tr.split = "train";
        for (const auto& [k, v] : loss_sums)
            tr.loss.emplace_back(k, v / batches);
        tr.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        result.records.push_back(tr);

        auto tv0 = std::chrono::steady_clock::now();
        std::map<std::string, double> vloss_sums;
        int vbatches = 0;
        std::vector<ImageMetrics> per_image;
        std::vector<std::size_t> vidx(val_set.size());
        for (std::size_t i = 0; i < vidx.size(); ++i) vidx[i] = i;
        for (std::size_t off = 0; off < vidx.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(off + static_cast<std::size_t>(cfg.batch_size),
                         vidx.size());
            auto [X, Y] = traindetail::make_batch(val_set, vidx, off, end);
            Workspace<float> ws(store, Phase::eval);
            Stage2Output<float> out = condseg_forward(ws, constant(X), cfg.K);
            LossValue<float> loss =
                stage2_loss(Y, out.m_final, out.m_fg, out.m_bg, out.m_uc);
            vloss_sums["total"] += loss.value();
            for (const auto& [k, v] : loss.breakdown) vloss_sums[k] += v;
            ++vbatches;
            Tensor<float> bin = binarize(out.m_final->value, cfg.t);
            traindetail::mask_metrics_batch(bin, Y, &per_image);
        }
        ImageMetrics means = dataset_means(per_image);
        EpochRecord vr;
        vr.epoch = epoch;
        vr.split = "val";
        for (const auto& [k, v] : vloss_sums)
            vr.loss.emplace_back(k, v / vbatches);
        vr.metrics = {{"miou", means.iou},
                      {"mdsc", means.dsc},
                      {"recall", means.recall},
                      {"precision", means.precision}};
        vr.wall_seconds = std::chrono::duration<double>(
                              std::chrono::steady_clock::now() - tv0)
                              .count();
        result.records.push_back(vr);

        if (means.dsc > result.best_val_mdsc) {
            result.best_val_mdsc = means.dsc;
            std::filesystem::create_directories(out_dir);
            save_checkpoint(store, result.checkpoint, cfg);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
    std::string image_id;
    ImageMetrics metrics;
};

struct EvalResult {
    std::vector<EvalRow> per_image;
    ImageMetrics means;
};

// Runs the model a checkpoint describes (full ConDSeg or Net0), binarizes at
// threshold t, reports per-image metrics and their macro means.
inline EvalResult evaluate_checkpoint(const std::filesystem::path& ckpt,
                                      const std::vector<SampleRecord>& data,
                                      std::optional<double> t_override = {}) {
    require(!data.empty(), "evaluate: empty dataset");
    CkptManifest m = read_ckpt_manifest(ckpt);
    TrainConfig cfg = config_from_json(m.config);
    if (t_override) cfg.t = *t_override;
    require(cfg.t > 0 && cfg.t < 1, "t in (0,1)");

    bool is_full = false;
    for (const auto& ti : m.tensors)
        if (ti.name.rfind("decoder.", 0) == 0) {
            is_full = true;
            break;
        }

    ParamStore<float> store;
    Rng rng(cfg.seed, "eval.init");
    if (is_full) init_condseg(store, cfg, rng);
    else init_net0(store, cfg, rng);
    load_checkpoint_into(store, ckpt);

    const int S = data[0].image.shape.h;
    require(S == data[0].image.shape.w && S % 32 == 0,
            "evaluate: dataset images must be square and divisible by 32");

    EvalResult res;
    std::vector<ImageMetrics> per_image;
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t off = 0; off < idx.size();
         off += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(
            off + static_cast<std::size_t>(cfg.batch_size), idx.size());
        auto [X, Y] = traindetail::make_batch(data, idx, off, end);
        Workspace<float> ws(store, Phase::eval);
        Var<float> pred;
        if (is_full)
            pred = condseg_forward(ws, constant(X), cfg.K).m_final;
        else
            pred = net0_forward(ws, constant(X));
        Tensor<float> bin = binarize(pred->value, cfg.t);
        std::vector<ImageMetrics> batch_metrics;
        traindetail::mask_metrics_batch(bin, Y, &batch_metrics);
        for (std::size_t b = 0; b < batch_metrics.size(); ++b) {
            res.per_image.push_back(
                EvalRow{data[idx[off + b]].image_id, batch_metrics[b]});
            per_image.push_back(batch_metrics[b]);
        }
    }
    res.means = dataset_means(per_image);
    return res;
}

inline void write_per_image_csv(const std::filesystem::path& path,
                                const EvalResult& res) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write CSV: " + path.string());
    out << "image_id,iou,dsc,recall,precision\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return std::string(buf);
    };
    for (const auto& row : res.per_image)
        out << csv_quote(row.image_id) << ',' << num(row.metrics.iou) << ','
            << num(row.metrics.dsc) << ',' << num(row.metrics.recall) << ','
            << num(row.metrics.precision) << '\n';
}

}  // namespace condseg
