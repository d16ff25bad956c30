#include <CLI11.hpp>

#include "condseg/cli.hpp"

namespace {

std::string join_args(int argc, char** argv) {
    std::string out;
    for (int i = 0; i < argc; ++i) {
        if (i) out += ' ';
        out += argv[i];
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ConDSeg: contrast-driven medical image segmentation"};
    app.require_subcommand(1);

    std::string config_s, data_s, out_s = "runs/run", encoder_ckpt_s;
    std::string ckpt_s, image_s, out_mask_s, out_csv_s;
    std::string kind, grid, cons_variant = "builtin";
    bool force = false, no_cr = false;
    int parallel = 1;
    double t_flag = -1;
    condseg::Overrides ov;

    auto add_common = [&](CLI::App* cmd, bool with_data = true) {
        cmd->add_option("--config", config_s, "config file (JSON)");
        if (with_data)
            cmd->add_option("--data", data_s,
                            "dataset dir (images/ + masks/); synthetic when "
                            "omitted");
        cmd->add_option("--out", out_s, "output directory");
        cmd->add_flag("--force", force, "overwrite an existing run manifest");
        cmd->add_option("--seed", ov.seed, "override config seed");
        cmd->add_option("--t", ov.t, "override binarization threshold");
        cmd->add_option("--K", ov.K, "override CDFA window size");
        cmd->add_option("--image-size", ov.image_size, "override image size");
        cmd->add_option("--batch-size", ov.batch_size, "override batch size");
        cmd->add_option("--epochs-stage1", ov.epochs_stage1,
                        "override stage-1 epochs");
        cmd->add_option("--epochs-stage2", ov.epochs_stage2,
                        "override stage-2 epochs");
        cmd->add_option("--encoder", ov.encoder_id, "override encoder id");
    };

    CLI::App* s1 = app.add_subcommand("train-stage1",
                                      "stage-1 Consistency Reinforcement "
                                      "pre-training of Net0");
    add_common(s1);
    s1->add_flag("--no-cr", no_cr,
                 "train Net0 on the mask loss only (ablation)");
    s1->add_option("--cons-variant", cons_variant,
                   "consistency term: builtin|kl|js");

    CLI::App* s2 = app.add_subcommand("train-stage2",
                                      "full-network training (two-stage with "
                                      "--encoder-ckpt, one-stage without)");
    add_common(s2);
    s2->add_option("--encoder-ckpt", encoder_ckpt_s,
                   "stage-1 checkpoint to load the encoder from");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", ckpt_s, "checkpoint file")->required();
    ev->add_option("--data", data_s, "dataset dir; synthetic val when omitted");
    ev->add_option("--t", t_flag, "binarization threshold override");
    ev->add_option("--out-csv", out_csv_s, "per-image metrics CSV path");

    CLI::App* pr = app.add_subcommand("predict", "predict a mask for one image");
    pr->add_option("--ckpt", ckpt_s, "checkpoint file")->required();
    pr->add_option("--image", image_s, "input image (PNG/JPEG)")->required();
    pr->add_option("--out-mask", out_mask_s, "output mask PNG")->required();
    pr->add_option("--t", t_flag, "binarization threshold override");

    CLI::App* sw = app.add_subcommand("sweep", "ablation sweeps");
    add_common(sw);
    sw->add_option("--kind", kind,
                   "threshold|window|stage1-epochs|cons-loss|encoder")
        ->required();
    sw->add_option("--grid", grid, "comma-separated grid values")->required();
    sw->add_option("--parallel", parallel,
                   "run up to N points concurrently (capped by "
                   "CONDSEG_THREADS)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    const std::string cmdline = join_args(argc, argv);
    auto opt_path = [](const std::string& s) {
        return s.empty() ? std::optional<condseg::fs::path>{}
                         : std::optional<condseg::fs::path>{s};
    };
    std::optional<double> t_opt =
        t_flag >= 0 ? std::optional<double>{t_flag} : std::nullopt;

    if (s1->parsed())
        return condseg::cmd_train_stage1(opt_path(config_s), opt_path(data_s),
                                         out_s, ov, force, no_cr, cons_variant,
                                         cmdline);
    if (s2->parsed())
        return condseg::cmd_train_stage2(opt_path(config_s), opt_path(data_s),
                                         opt_path(encoder_ckpt_s), out_s, ov,
                                         force, cmdline);
    if (ev->parsed())
        return condseg::cmd_eval(ckpt_s, opt_path(data_s), t_opt,
                                 opt_path(out_csv_s));
    if (pr->parsed())
        return condseg::cmd_predict(ckpt_s, image_s, out_mask_s, t_opt);
    if (sw->parsed())
        return condseg::cmd_sweep(kind, grid, opt_path(config_s),
                                  opt_path(data_s), out_s, ov, force, parallel,
                                  cmdline);
    return 1;
}
