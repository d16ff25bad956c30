#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "condseg/cli.hpp"
#include "condseg/train.hpp"

using namespace condseg;
namespace fs = std::filesystem;

namespace {

TrainConfig smoke_cfg() {
    TrainConfig cfg;
    cfg.image_size = 32;
    cfg.channel_widths = {4, 8, 12, 16};
    cfg.batch_size = 4;
    cfg.norm = "batch";
    cfg.seed = 42;
    cfg.synth.size = 32;
    cfg.synth.n_images = 40;
    cfg.synth.contrast_lo = 0.35;
    cfg.synth.contrast_hi = 0.6;
    cfg.synth.illumination = 0.1;
    cfg.synth.noise_sigma = 0.01;
    cfg.synth.seed = 5;
    return cfg;
}

DataSets smoke_data(const TrainConfig& cfg) {
    SynthSpec spec = cfg.synth;
    spec.size = cfg.image_size;
    auto recs = gen_synthetic(spec);
    auto sp = split(recs, {0.8, 0.2, 0.0}, cfg.seed);
    return DataSets{sp.train, sp.val, sp.test};
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

double column_sum(const std::vector<EpochRecord>& recs,
                  const std::string& split, const std::string& key,
                  int epoch) {
    for (const auto& r : recs)
        if (r.epoch == epoch && r.split == split)
            for (const auto& [k, v] : r.loss)
                if (k == key) return v;
    FAIL("record not found: " + split + "/" + key);
    return 0;
}

}  // namespace

TEST_CASE("train_stage1: smoke run learns, records and checkpoint layout") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage1 = 6;
    DataSets ds = smoke_data(cfg);
    fs::path out = fresh_dir("condseg_s1_smoke");

    TrainResult res = train_stage1(cfg, ds.train, ds.val, out);
    REQUIRE(fs::exists(res.checkpoint));
    REQUIRE(res.records.size() ==
            static_cast<std::size_t>(cfg.epochs_stage1) * 2);

    const double first = column_sum(res.records, "train", "total", 1);
    const double last =
        column_sum(res.records, "train", "total", cfg.epochs_stage1);
    REQUIRE(first > 0.0);
    REQUIRE(last < first);  // strict decrease over the smoke budget

    // loss breakdown keys present on train rows
    for (const auto& r : res.records)
        if (r.split == "train") {
            bool has_mask1 = false, has_cons = false;
            for (const auto& [k, v] : r.loss) {
                if (k == "mask1") has_mask1 = true;
                if (k == "cons") has_cons = true;
            }
            REQUIRE(has_mask1);
            REQUIRE(has_cons);
        }
}

TEST_CASE("train_stage1: empty data and non-finite losses abort") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage1 = 1;
    DataSets ds = smoke_data(cfg);
    fs::path out = fresh_dir("condseg_s1_err");
    REQUIRE_THROWS(train_stage1(cfg, {}, ds.val, out));
    REQUIRE_THROWS(train_stage1(cfg, ds.train, {}, out));
    REQUIRE_THROWS_WITH(
        traindetail::check_finite_loss(
            std::numeric_limits<double>::quiet_NaN(), "stage1 epoch 1"),
        Catch::Matchers::ContainsSubstring("non-finite"));

    TrainConfig bad = cfg;
    bad.K = 2;
    REQUIRE_THROWS_AS(train_stage1(bad, ds.train, ds.val, out), ConfigError);
}

TEST_CASE("two-stage handoff: encoder tensors load bit-identically") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage1 = 1;
    cfg.epochs_stage2 = 1;
    DataSets ds = smoke_data(cfg);
    fs::path out = fresh_dir("condseg_handoff_train");

    TrainResult s1 = train_stage1(cfg, ds.train, ds.val, out);

    // the loaded prefix must equal the file contents bitwise
    ParamStore<float> probe;
    Rng rng(cfg.seed, "stage2.init");
    init_condseg(probe, cfg, rng);
    load_checkpoint_into(probe, s1.checkpoint, "encoder.");
    ParamStore<float> net0_like;
    Rng rng1(cfg.seed, "stage1.init");
    init_net0(net0_like, cfg, rng1);
    load_checkpoint_into(net0_like, s1.checkpoint);
    for (const auto& name : probe.names("encoder."))
        REQUIRE(bitwise_equal(probe.value(name), net0_like.value(name)));

    TrainResult s2 = train_stage2(cfg, ds.train, ds.val, s1.checkpoint, out);
    REQUIRE(fs::exists(s2.checkpoint));

    // mismatched encoder settings are rejected via the manifest signature
    TrainConfig other = cfg;
    other.channel_widths = {8, 8, 8, 8};
    REQUIRE_THROWS_WITH(
        train_stage2(other, ds.train, ds.val, s1.checkpoint, out),
        Catch::Matchers::ContainsSubstring("signature"));
}

TEST_CASE("train_stage2: one-stage mode runs without a checkpoint") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage2 = 2;
    DataSets ds = smoke_data(cfg);
    fs::path out = fresh_dir("condseg_s2_onestage");
    TrainResult res = train_stage2(cfg, ds.train, ds.val, std::nullopt, out);
    REQUIRE(res.records.size() == 4);
    for (const auto& r : res.records)
        if (r.split == "val") {
            REQUIRE(r.metrics.count("miou") == 1);
            REQUIRE(r.metrics.count("mdsc") == 1);
        } else {
            REQUIRE(r.metrics.empty());
        }
}

TEST_CASE("determinism: identical config+seed reproduces loss records") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage1 = 2;
    DataSets ds = smoke_data(cfg);
    fs::path out1 = fresh_dir("condseg_det1");
    fs::path out2 = fresh_dir("condseg_det2");

    TrainResult a = train_stage1(cfg, ds.train, ds.val, out1);
    TrainResult b = train_stage1(cfg, ds.train, ds.val, out2);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        REQUIRE(a.records[i].loss == b.records[i].loss);
        REQUIRE(a.records[i].metrics == b.records[i].metrics);
    }
}

TEST_CASE("evaluate_checkpoint: per-image table and hand-averaged means") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage2 = 1;
    cfg.synth.n_images = 20;
    DataSets ds = smoke_data(cfg);
    fs::path out = fresh_dir("condseg_eval");
    TrainResult s2 = train_stage2(cfg, ds.train, ds.val, std::nullopt, out);

    std::vector<SampleRecord> five(ds.train.begin(), ds.train.begin() + 5);
    EvalResult ev = evaluate_checkpoint(s2.checkpoint, five);
    REQUIRE(ev.per_image.size() == 5);
    double iou = 0, dsc = 0;
    for (const auto& row : ev.per_image) {
        iou += row.metrics.iou;
        dsc += row.metrics.dsc;
    }
    REQUIRE(ev.means.iou == Catch::Approx(iou / 5).epsilon(1e-12));
    REQUIRE(ev.means.dsc == Catch::Approx(dsc / 5).epsilon(1e-12));

    // threshold override validation
    REQUIRE_THROWS(evaluate_checkpoint(s2.checkpoint, five, 1.5));
}

TEST_CASE("records CSV: header, one row per epoch/split, quoting") {
    TrainConfig cfg = smoke_cfg();
    cfg.epochs_stage1 = 1;
    DataSets ds = smoke_data(cfg);
    fs::path out = fresh_dir("condseg_csv");
    TrainResult res = train_stage1(cfg, ds.train, ds.val, out);
    fs::path csv = out / "records.csv";
    write_records_csv(csv, res.records);

    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    REQUIRE(header.rfind("epoch,split,", 0) == 0);
    REQUIRE(header.find("wall_time") != std::string::npos);
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    REQUIRE(rows == 2);

    REQUIRE(csv_quote("plain") == "plain");
    REQUIRE(csv_quote("a,b") == "\"a,b\"");
    REQUIRE(csv_quote("say \"hi\"") == "\"say \"\"hi\"\"\"");
}
