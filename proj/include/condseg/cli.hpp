#pragma once

#include <atomic>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "condseg/train.hpp"

namespace condseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

inline std::string iso_timestamp() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

inline std::string git_describe() {
    std::FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!p) return "unknown";
    char buf[128] = {0};
    std::string out;
    while (std::fgets(buf, sizeof buf, p)) out += buf;
    pclose(p);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r'))
        out.pop_back();
    return out.empty() ? "unknown" : out;
}

// Written before any side effect of a run. Rerunning into a directory that
// already holds a manifest refuses unless forced.
inline fs::path manifest_path(const fs::path& out_dir) {
    return out_dir / "manifest.json";
}

inline void check_fresh_out_dir(const fs::path& out_dir, bool force) {
    if (fs::exists(manifest_path(out_dir)) && !force)
        throw ConfigError("output dir " + out_dir.string() +
                          " already contains a manifest; rerun with --force "
                          "to overwrite");
}

inline void write_manifest(const fs::path& out_dir,
                           const std::string& command_line,
                           const TrainConfig& cfg,
                           const std::vector<std::string>& outputs,
                           const std::string& start_time,
                           const std::string& end_time = "") {
    fs::create_directories(out_dir);
    ordered_json j;
    j["command_line"] = command_line;
    j["config"] = config_to_json(cfg);
    j["seed"] = cfg.seed;
    j["git_describe"] = git_describe();
    j["start_time"] = start_time;
    j["end_time"] = end_time;
    j["outputs"] = outputs;
    std::ofstream out(manifest_path(out_dir));
    if (!out)
        throw std::runtime_error("cannot write manifest in " +
                                 out_dir.string());
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// config / data plumbing
// ---------------------------------------------------------------------------

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<double> t;
    std::optional<int> K;
    std::optional<int> image_size;
    std::optional<int> epochs_stage1, epochs_stage2;
    std::optional<std::string> encoder_id;
    std::optional<int> batch_size;

    void apply(TrainConfig& cfg) const {
        if (seed) cfg.seed = *seed;
        if (t) cfg.t = *t;
        if (K) cfg.K = *K;
        if (image_size) cfg.image_size = *image_size;
        if (epochs_stage1) cfg.epochs_stage1 = *epochs_stage1;
        if (epochs_stage2) cfg.epochs_stage2 = *epochs_stage2;
        if (encoder_id) cfg.encoder_id = *encoder_id;
        if (batch_size) cfg.batch_size = *batch_size;
    }
};

inline TrainConfig load_and_validate(const std::optional<fs::path>& config_path,
                                     const Overrides& ov) {
    TrainConfig cfg =
        config_path ? load_config(config_path->string()) : TrainConfig{};
    ov.apply(cfg);
    auto errs = validate_config(cfg);
    if (!errs.empty()) {
        std::string all;
        for (const auto& e : errs) all += (all.empty() ? "" : "; ") + e;
        throw ConfigError("invalid config: " + all);
    }
    return cfg;
}

struct DataSets {
    std::vector<SampleRecord> train, val, test;
};

// --data pointing at a folder expects the Kvasir layout (images/ + masks/);
// without --data the synthetic generator from the config's synth section is
// used. Training always works at cfg.image_size.
inline DataSets resolve_data(const TrainConfig& cfg,
                             const std::optional<fs::path>& data_dir) {
    std::vector<SampleRecord> records;
    if (data_dir) {
        records = load_folder((*data_dir / "images").string(),
                              (*data_dir / "masks").string(), cfg.image_size);
    } else {
        SynthSpec spec = cfg.synth;
        spec.size = cfg.image_size;
        records = gen_synthetic(spec);
    }
    SplitResult sp = split(records, {0.8, 0.2, 0.0}, cfg.seed);
    return DataSets{std::move(sp.train), std::move(sp.val),
                    std::move(sp.test)};
}

// ---------------------------------------------------------------------------
// commands (return process exit codes: 0 ok, 1 usage/config, 2 runtime)
// ---------------------------------------------------------------------------

template <typename F>
int run_command(F&& body) {
    try {
        body();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

inline int cmd_train_stage1(const std::optional<fs::path>& config,
                            const std::optional<fs::path>& data,
                            const fs::path& out, const Overrides& ov,
                            bool force, bool no_cr,
                            const std::string& cons_variant,
                            const std::string& command_line) {
    return run_command([&] {
        TrainConfig cfg = load_and_validate(config, ov);
        ConsVariant cons = cons_variant_from_string(cons_variant);
        check_fresh_out_dir(out, force);
        const std::string start = iso_timestamp();
        write_manifest(out, command_line, cfg,
                       {"stage1_best.ckpt", "records_stage1.csv"}, start);

        DataSets ds = resolve_data(cfg, data);
        TrainResult res =
            train_stage1(cfg, ds.train, ds.val, out,
                         no_cr ? Stage1Mode::net0_only : Stage1Mode::cr, cons);
        write_records_csv(out / "records_stage1.csv", res.records);
        write_manifest(out, command_line, cfg,
                       {"stage1_best.ckpt", "records_stage1.csv"}, start,
                       iso_timestamp());
        std::cout << "stage1 done; best val mDSC " << res.best_val_mdsc
                  << "; checkpoint " << res.checkpoint.string() << "\n";
    });
}

inline int cmd_train_stage2(const std::optional<fs::path>& config,
                            const std::optional<fs::path>& data,
                            const std::optional<fs::path>& encoder_ckpt,
                            const fs::path& out, const Overrides& ov,
                            bool force, const std::string& command_line) {
    return run_command([&] {
        TrainConfig cfg = load_and_validate(config, ov);
        check_fresh_out_dir(out, force);
        const std::string start = iso_timestamp();
        write_manifest(out, command_line, cfg,
                       {"stage2_best.ckpt", "records_stage2.csv"}, start);

        DataSets ds = resolve_data(cfg, data);
        TrainResult res = train_stage2(cfg, ds.train, ds.val, encoder_ckpt, out);
        write_records_csv(out / "records_stage2.csv", res.records);

        EvalResult ev = evaluate_checkpoint(res.checkpoint, ds.val);
        write_per_image_csv(out / "per_image_val.csv", ev);
        write_manifest(out, command_line, cfg,
                       {"stage2_best.ckpt", "records_stage2.csv",
                        "per_image_val.csv"},
                       start, iso_timestamp());
        std::cout << (encoder_ckpt ? "two-stage" : "one-stage")
                  << " stage2 done; val mIoU " << ev.means.iou << " mDSC "
                  << ev.means.dsc << " recall " << ev.means.recall
                  << " precision " << ev.means.precision << "\n";
    });
}

inline int cmd_eval(const fs::path& ckpt, const std::optional<fs::path>& data,
                    std::optional<double> t,
                    const std::optional<fs::path>& out_csv) {
    return run_command([&] {
        if (t) require(*t > 0 && *t < 1, "t in (0,1)");
        CkptManifest m = read_ckpt_manifest(ckpt);
        TrainConfig cfg = config_from_json(m.config);
        DataSets ds = resolve_data(cfg, data);
        const std::vector<SampleRecord>& eval_set =
            data ? ds.train : ds.val;  // folder data: evaluate everything
        std::vector<SampleRecord> all = eval_set;
        if (data) {
            all.insert(all.end(), ds.val.begin(), ds.val.end());
            all.insert(all.end(), ds.test.begin(), ds.test.end());
        }
        EvalResult ev = evaluate_checkpoint(ckpt, all, t);
        fs::path csv = out_csv ? *out_csv
                               : ckpt.parent_path() / "per_image_eval.csv";
        write_per_image_csv(csv, ev);
        std::cout << "mIoU " << ev.means.iou << " mDSC " << ev.means.dsc
                  << " recall " << ev.means.recall << " precision "
                  << ev.means.precision << " (" << ev.per_image.size()
                  << " images; per-image CSV " << csv.string() << ")\n";
    });
}

inline int cmd_predict(const fs::path& ckpt, const fs::path& image,
                       const fs::path& out_mask, std::optional<double> t) {
    return run_command([&] {
        if (t) require(*t > 0 && *t < 1, "t in (0,1)");
        CkptManifest m = read_ckpt_manifest(ckpt);
        TrainConfig cfg = config_from_json(m.config);
        if (t) cfg.t = *t;

        bool is_full = false;
        for (const auto& ti : m.tensors)
            if (ti.name.rfind("decoder.", 0) == 0) is_full = true;
        ParamStore<float> store;
        Rng rng(cfg.seed, "predict.init");
        if (is_full) init_condseg(store, cfg, rng);
        else init_net0(store, cfg, rng);
        load_checkpoint_into(store, ckpt);

        Tensor<float> img = datadetail::resize_bilinear(
            read_image_rgb(image.string()), cfg.image_size, cfg.image_size);
        Workspace<float> ws(store, Phase::eval);
        Var<float> pred = is_full
                              ? condseg_forward(ws, constant(img), cfg.K).m_final
                              : net0_forward(ws, constant(img));
        Tensor<float> bin = binarize(pred->value, cfg.t);
        write_png_gray(out_mask.string(), bin);
        std::cout << "wrote mask " << out_mask.string() << "\n";
    });
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

struct SweepPoint {
    std::string value;
    bool ok = false;
    std::string error;
    ImageMetrics metrics;
};

inline TrainConfig sweep_point_config(const TrainConfig& base,
                                      const std::string& kind,
                                      const std::string& value) {
    TrainConfig cfg = base;
    if (kind == "threshold") cfg.t = std::stod(value);
    else if (kind == "window") cfg.K = std::stoi(value);
    else if (kind == "stage1-epochs") cfg.epochs_stage1 = std::stoi(value);
    else if (kind == "encoder") cfg.encoder_id = value;
    else if (kind == "cons-loss") {
        cons_variant_from_string(value);  // validated here, applied in stage 1
    } else {
        throw ConfigError("unknown sweep kind \"" + kind +
                          "\" (threshold|window|stage1-epochs|cons-loss|encoder)");
    }
    auto errs = validate_config(cfg);
    if (!errs.empty())
        throw ConfigError("sweep point " + value + ": " + errs.front());
    return cfg;
}

// One grid point = full two-stage pipeline + evaluation of the best stage-2
// checkpoint on the validation split.
inline SweepPoint run_sweep_point(const TrainConfig& base,
                                  const std::string& kind,
                                  const std::string& value,
                                  const DataSets& ds, const fs::path& out) {
    SweepPoint pt;
    pt.value = value;
    try {
        TrainConfig cfg = sweep_point_config(base, kind, value);
        ConsVariant cons = kind == "cons-loss" ? cons_variant_from_string(value)
                                               : ConsVariant::builtin;
        fs::create_directories(out);
        TrainResult s1 = train_stage1(cfg, ds.train, ds.val, out,
                                      Stage1Mode::cr, cons);
        write_records_csv(out / "records_stage1.csv", s1.records);
        TrainResult s2 =
            train_stage2(cfg, ds.train, ds.val, s1.checkpoint, out);
        write_records_csv(out / "records_stage2.csv", s2.records);
        EvalResult ev = evaluate_checkpoint(s2.checkpoint, ds.val);
        pt.metrics = ev.means;
        pt.ok = true;
    } catch (const std::exception& e) {
        pt.error = e.what();
    }
    return pt;
}

inline std::vector<std::string> parse_grid(const std::string& grid) {
    std::vector<std::string> out;
    std::stringstream ss(grid);
    std::string item;
    while (std::getline(ss, item, ',')) {
        while (!item.empty() && item.front() == ' ') item.erase(item.begin());
        while (!item.empty() && item.back() == ' ') item.pop_back();
        if (!item.empty()) out.push_back(item);
    }
    require(!out.empty(), "sweep: empty grid");
    return out;
}

inline int cmd_sweep(const std::string& kind, const std::string& grid,
                     const std::optional<fs::path>& config,
                     const std::optional<fs::path>& data, const fs::path& out,
                     const Overrides& ov, bool force, int parallel,
                     const std::string& command_line) {
    int rc = 0;
    int inner = run_command([&] {
        TrainConfig base = load_and_validate(config, ov);
        std::vector<std::string> values = parse_grid(grid);
        for (const auto& v : values)
            sweep_point_config(base, kind, v);  // fail fast on bad grids
        check_fresh_out_dir(out, force);
        const std::string start = iso_timestamp();
        write_manifest(out, command_line, base, {"sweep.csv"}, start);

        DataSets ds = resolve_data(base, data);
        std::vector<SweepPoint> points(values.size());
        const int budget = std::min(std::max(parallel, 1), thread_budget());
        if (budget <= 1) {
            for (std::size_t i = 0; i < values.size(); ++i)
                points[i] = run_sweep_point(base, kind, values[i], ds,
                                            out / ("point_" + values[i]));
        } else {
            std::atomic<std::size_t> next{0};
            auto worker = [&] {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= values.size()) return;
                    points[i] = run_sweep_point(base, kind, values[i], ds,
                                                out / ("point_" + values[i]));
                }
            };
            std::vector<std::thread> threads;
            for (int n = 0; n < budget; ++n) threads.emplace_back(worker);
            for (auto& th : threads) th.join();
        }

        std::ofstream csv(out / "sweep.csv");
        if (!csv) throw std::runtime_error("cannot write sweep.csv");
        csv << "kind,value,status,miou,mdsc,recall,precision,error\n";
        char buf[64];
        auto num = [&](double v) {
            std::snprintf(buf, sizeof buf, "%.9g", v);
            return std::string(buf);
        };
        bool any_failed = false;
        for (const auto& pt : points) {
            csv << csv_quote(kind) << ',' << csv_quote(pt.value) << ','
                << (pt.ok ? "ok" : "failed") << ',';
            if (pt.ok)
                csv << num(pt.metrics.iou) << ',' << num(pt.metrics.dsc) << ','
                    << num(pt.metrics.recall) << ','
                    << num(pt.metrics.precision) << ",";
            else
                csv << ",,,," << csv_quote(pt.error);
            csv << '\n';
            if (!pt.ok) any_failed = true;
        }
        write_manifest(out, command_line, base, {"sweep.csv"}, start,
                       iso_timestamp());
        for (const auto& pt : points)
            std::cout << kind << "=" << pt.value << ": "
                      << (pt.ok ? "mIoU " + std::to_string(pt.metrics.iou)
                                : "FAILED (" + pt.error + ")")
                      << "\n";
        if (any_failed)
            throw std::runtime_error("one or more sweep points failed");
    });
    rc = inner;
    return rc;
}

}  // namespace condseg
