#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "matssl/config.hpp"
#include "matssl/segmenter.hpp"
#include "matssl/sslhead.hpp"
#include "matssl/trainer.hpp"
#include "test_util.hpp"

using namespace matssl;
using testutil::rand_tensor;

namespace {

std::filesystem::path work_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "matssl_trainer_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::vector<NamedParam> single_param(float value, const std::string& name = "p") {
    std::vector<NamedParam> params;
    Tensor t = Tensor::from({1}, {value});
    t.set_requires_grad(true);
    params.push_back({name, t});
    return params;
}

// Writes images/masks plus a manifest covering train/val/test/unlabeled tags.
RunConfig make_tiny_run(const std::filesystem::path& dir, int image_count, int size,
                        bool unlabeled, double noise = 10.0) {
    SyntheticSpec spec;
    spec.seed = 9;
    spec.grain_count = 6;
    spec.phase_count = 2;
    spec.noise_std = noise;
    PatchDataset manifest;
    manifest.patch_size = size;
    for (int i = 0; i < image_count; ++i) {
        const ImageRecord img = generate_synthetic_image(spec, size, size, i);
        save_image((dir / (img.id + ".pgm")).string(), img);
        char mask_name[32];
        std::snprintf(mask_name, sizeof(mask_name), "mask_%04d", i);
        save_mask((dir / mask_name).string() + ".pgm", img.mask, size, size);
        Split split = Split::kUnlabeled;
        if (!unlabeled) {
            split = i < image_count - 2 ? Split::kTrain
                                        : (i == image_count - 2 ? Split::kVal : Split::kTest);
        }
        manifest.entries.push_back({img.id, 0, 0, size, split});
    }
    save_manifest((dir / "patches.tsv").string(), manifest);

    RunConfig cfg;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.seed = 0;
    cfg.encoder.stage_count = 2;
    cfg.encoder.base_channels = 4;
    cfg.encoder.blocks_per_stage = 1;
    cfg.fusion.hidden = 16;
    cfg.fusion.embed_dim = 8;
    cfg.decoder.num_classes = 2;
    cfg.data.num_classes = 2;
    cfg.data.image_dir = dir.string();
    cfg.data.manifest = (dir / "patches.tsv").string();
    cfg.data.output_dir = (dir / "out").string();
    return cfg;
}

}  // namespace

TEST_CASE("sgd hand-unrolled updates") {
    {
        auto params = single_param(0.0f);
        params[0].tensor.grad()[0] = 1.0f;
        SgdState st;
        sgd_step(params, st, {0.1, 0.0, 0.0}, 0.1);
        CHECK(params[0].tensor.data()[0] == doctest::Approx(-0.1f));
    }
    {
        // constant gradient g with momentum 0.9: second step moves by -lr*1.9*g
        const double g = 0.7, lr = 0.05;
        auto params = single_param(0.0f);
        SgdState st;
        params[0].tensor.grad()[0] = static_cast<float>(g);
        sgd_step(params, st, {lr, 0.9, 0.0}, lr);
        const float after_one = params[0].tensor.data()[0];
        params[0].tensor.zero_grad();
        params[0].tensor.grad()[0] = static_cast<float>(g);
        sgd_step(params, st, {lr, 0.9, 0.0}, lr);
        CHECK(params[0].tensor.data()[0] - after_one == doctest::Approx(-lr * 1.9 * g).epsilon(1e-6));
    }
    {
        // zero gradient: velocity decays geometrically, parameter coasts
        auto params = single_param(1.0f);
        SgdState st;
        params[0].tensor.grad()[0] = 1.0f;
        sgd_step(params, st, {0.1, 0.9, 0.0}, 0.1);
        params[0].tensor.zero_grad();
        const float before = params[0].tensor.data()[0];
        sgd_step(params, st, {0.1, 0.9, 0.0}, 0.1);
        CHECK(st.velocity[0][0] == doctest::Approx(0.9f));
        CHECK(params[0].tensor.data()[0] - before == doctest::Approx(-0.1 * 0.9).epsilon(1e-6));
    }
    {
        // grad 0 and wd 0 from rest: parameters never move
        auto params = single_param(0.5f);
        SgdState st;
        sgd_step(params, st, {0.1, 0.9, 0.0}, 0.1);
        CHECK(params[0].tensor.data()[0] == 0.5f);
    }
}

TEST_CASE("adam first-step magnitude equals the learning rate") {
    for (float g : {0.3f, -2.0f, 14.0f}) {
        auto params = single_param(1.0f);
        params[0].tensor.grad()[0] = g;
        AdamState st;
        AdamConfig cfg;
        cfg.lr = 1e-3;
        cfg.eps = 1e-16;  // the limit the closed form assumes
        cfg.weight_decay = 0.0;
        adam_step(params, st, cfg, cfg.lr);
        // bias correction cancels the gradient scale on step 1
        CHECK(std::abs(params[0].tensor.data()[0] - 1.0f) ==
              doctest::Approx(1e-3).epsilon(1e-6));
    }
    {
        auto params = single_param(0.25f);
        AdamState st;
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        adam_step(params, st, cfg, cfg.lr);
        CHECK(params[0].tensor.data()[0] == 0.25f);  // zero grad from init
    }
    // named defaults
    AdamConfig defaults;
    CHECK(defaults.beta1 == 0.9);
    CHECK(defaults.beta2 == 0.999);
    CHECK(defaults.eps == 1e-8);
}

TEST_CASE("cosine schedule endpoints and monotonicity") {
    CHECK(cosine_lr(0, 50, 0.1, 1e-4) == 0.1);
    CHECK(cosine_lr(50, 50, 0.1, 1e-4) == 1e-4);
    CHECK(cosine_lr(25, 50, 0.1, 1e-4) == doctest::Approx(0.05005).epsilon(1e-6));
    CHECK(cosine_lr(0, 0, 0.1, 1e-4) == 0.1);
    double prev = 1.0;
    for (int t = 0; t <= 100; ++t) {
        const double lr = cosine_lr(t, 100, 0.1, 1e-4);
        CHECK(lr <= prev + 1e-15);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(-1, 10, 0.1, 1e-4), ValueError);
    CHECK_THROWS_AS(cosine_lr(11, 10, 0.1, 1e-4), ValueError);
}

TEST_CASE("checkpoint round-trip preserves bytes and forward outputs") {
    const auto dir = work_dir("ckpt");
    EncoderConfig cfg;
    cfg.stage_count = 2;
    cfg.base_channels = 4;
    cfg.blocks_per_stage = 1;
    Encoder enc(cfg);
    enc.init_random(7);

    Rng rng(8);
    const Tensor probe = rand_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
    Tape tape(false);
    const std::uint64_t before = testutil::hash_tensor(enc.forward(tape, probe).gap_vectors.back());

    const Checkpoint ckpt = make_checkpoint(enc.params().entries(), 3, {1, 2, 3, 4}, "snapshot");
    const std::string path = (dir / "enc.ckpt").string();
    save_checkpoint(path, ckpt);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.epoch == 3);
    CHECK(loaded.rng_state == std::array<std::uint64_t, 4>{1, 2, 3, 4});
    CHECK(loaded.config_snapshot == "snapshot");
    const std::string path2 = (dir / "enc2.ckpt").string();
    save_checkpoint(path2, loaded);
    CHECK(read_file(path) == read_file(path2));  // save -> load -> save is byte-identical

    Encoder enc2(cfg);
    enc2.init_random(99);
    apply_checkpoint(loaded, enc2.params());
    CHECK(testutil::hash_tensor(enc2.forward(tape, probe).gap_vectors.back()) == before);

    // corrupted payload length is rejected with a named error
    std::string bytes = read_file(path);
    bytes.resize(bytes.size() - 4);
    {
        std::ofstream f(dir / "bad.ckpt", std::ios::binary);
        f << bytes;
    }
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bad.ckpt").string()),
                         doctest::Contains("payload length mismatch"), CheckpointError);

    // mismatched architecture names the first offending parameter
    EncoderConfig other = cfg;
    other.stage_count = 3;
    Encoder enc3(other);
    CHECK_THROWS_WITH_AS(apply_checkpoint(loaded, enc3.params()),
                         doctest::Contains("encoder.stage2"), CheckpointError);
    EncoderConfig wider = cfg;
    wider.base_channels = 8;
    Encoder enc4(wider);
    CHECK_THROWS_WITH_AS(apply_checkpoint(loaded, enc4.params()),
                         doctest::Contains("encoder.stage0.down.weight"), CheckpointError);
}

TEST_CASE("best tracker keeps the first maximum") {
    BestTracker tracker;
    CHECK(tracker.offer(1, 0.3));
    CHECK(tracker.offer(2, 0.7));
    CHECK_FALSE(tracker.offer(3, 0.5));
    CHECK(tracker.best_epoch == 2);
    CHECK(tracker.best_value == 0.7);
    CHECK_FALSE(tracker.offer(4, 0.7));  // ties keep the earlier epoch
}

TEST_CASE("metrics csv round-trips and validates") {
    const auto dir = work_dir("csv");
    std::vector<MetricsRow> rows;
    MetricsRow r0;
    r0.epoch = 0;
    r0.phase = "ssl";
    r0.loss = 2.5;
    r0.lr = 0.1;
    r0.gates = {1.0, 0.75};
    rows.push_back(r0);
    MetricsRow r1;
    r1.epoch = 1;
    r1.phase = "finetune";
    r1.loss = 0.25;
    r1.lr = 1e-4;
    r1.miou = 0.875;
    rows.push_back(r1);
    const std::string text = format_metrics_csv(rows, 2);
    CHECK(text.rfind("epoch,phase,loss,lr,miou,gate_0,gate_1\n", 0) == 0);
    const std::string path = (dir / "metrics.csv").string();
    write_metrics_csv(path, rows, 2);
    const auto back = load_metrics_csv(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].loss == 2.5);
    CHECK(back[0].gates == std::vector<double>{1.0, 0.75});
    CHECK_FALSE(back[0].miou.has_value());
    CHECK(back[1].miou == 0.875);

    {
        std::ofstream f(dir / "bad.csv", std::ios::binary);
        f << "epoch,phase,loss,lr,miou\n0,ssl,oops,0.1,\n";
    }
    CHECK_THROWS_WITH_AS(load_metrics_csv((dir / "bad.csv").string()), doctest::Contains(":2"),
                         ParseError);
    {
        std::ofstream f(dir / "band.csv", std::ios::binary);
        f << "banana\n";
    }
    CHECK_THROWS_AS(load_metrics_csv((dir / "band.csv").string()), ParseError);
}

TEST_CASE("run config defaults, write-back, and unknown-key rejection") {
    const RunConfig defaults = parse_run_config_text("", "<empty>");
    CHECK(defaults.train.epochs == 50);
    CHECK(defaults.train.batch_size == 128);
    CHECK(defaults.train.sgd.lr == 0.1);
    CHECK(defaults.train.sgd.momentum == 0.9);
    CHECK(defaults.train.sgd.weight_decay == 1e-6);
    CHECK(defaults.train.adam.lr == 1e-4);
    CHECK(defaults.train.adam.weight_decay == 1e-5);
    CHECK(defaults.train.temperature == 0.07f);
    CHECK(defaults.train.lr_min == 1e-4);
    CHECK(defaults.augment.jitter_delta == 0.1);
    CHECK(defaults.augment.crop_scale_range.first == 0.2);
    CHECK(defaults.encoder.stage_count == 4);
    CHECK(defaults.encoder.base_channels == 16);

    // resolved write-back parses to the same resolved write-back
    const std::string text = format_run_config(defaults);
    const RunConfig reparsed = parse_run_config_text(text, "<writeback>");
    CHECK(format_run_config(reparsed) == text);

    CHECK_THROWS_WITH_AS(parse_run_config_text("[run]\nepocsh = 3\n", "<typo>"),
                         doctest::Contains("unknown key 'run.epocsh'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_run_config_text("[optimizer]\nkind = \"sgdd\"\n", "<enum>"),
                         doctest::Contains("must be one of"), ConfigError);
    CHECK_THROWS_AS(parse_run_config_text("[run]\nepochs = 0\n", "<bad>"), ConfigError);

    const RunConfig adam_cfg =
        parse_run_config_text("[optimizer]\nkind = \"adam\"\nlr = 0.5\n", "<adam>");
    CHECK(adam_cfg.train.adam.lr == 0.5);
    CHECK(adam_cfg.train.sgd.lr == 0.1);  // untouched
    // finetune phase defaults to a constant schedule
    const RunConfig ft = parse_run_config_text("[run]\nphase = \"finetune\"\n", "<ft>");
    CHECK(ft.train.schedule == ScheduleKind::kConstant);
    const RunConfig ssl_cfg = parse_run_config_text("[run]\nphase = \"ssl\"\n", "<ssl>");
    CHECK(ssl_cfg.train.schedule == ScheduleKind::kCosine);
}

TEST_CASE("image store finds images and masks") {
    const auto dir = work_dir("store");
    SyntheticSpec spec;
    spec.seed = 2;
    spec.grain_count = 6;
    spec.phase_count = 2;
    const ImageRecord img = generate_synthetic_image(spec, 32, 32, 0);
    save_image((dir / "img_0000.pgm").string(), img);
    save_mask((dir / "mask_0000.pgm").string(), img.mask, 32, 32);
    ImageStore store(dir.string(), 2);
    const ImageRecord& loaded = store.get("img_0000");
    CHECK(loaded.has_mask());
    CHECK(loaded.mask == img.mask);
    CHECK(&store.get("img_0000") == &loaded);  // cached
    CHECK_THROWS_AS(store.get("missing"), ParseError);

    CHECK(dominant_class({0, 0, 1, 1, 1}, 2) == 1);
    CHECK(dominant_class({0, 0, 1, 1}, 2) == 0);  // tie goes to the lower class
}

TEST_CASE("one plain-descent ssl step lowers the loss on its own batch") {
    EncoderConfig cfg;
    cfg.stage_count = 2;
    cfg.base_channels = 4;
    cfg.blocks_per_stage = 1;
    Encoder enc(cfg);
    enc.init_random(31);
    FusionConfig fcfg;
    fcfg.hidden = 16;
    fcfg.embed_dim = 8;
    FusionHead head(cfg, fcfg);
    head.init_random(32);
    std::vector<NamedParam> params = ParamStore::merge({&enc.params(), &head.params()});

    Rng rng(33);
    const Tensor views = rand_tensor({8, 3, 16, 16}, rng, 0.0, 1.0);
    const auto eval_loss = [&]() {
        Tape t(false);
        return ssl_forward(t, views, enc, head, 0.07f).value_f64();
    };
    const double before = eval_loss();
    Tape tape;
    const Tensor loss = ssl_forward(tape, views, enc, head, 0.07f);
    for (auto& p : params) p.tensor.zero_grad();
    tape.backward(loss);
    SgdState st;
    sgd_step(params, st, {1e-4, 0.0, 0.0}, 1e-4);
    CHECK(eval_loss() < before);
}

TEST_CASE("frozen encoder receives no gradient and does not move") {
    EncoderConfig cfg;
    cfg.stage_count = 2;
    cfg.base_channels = 4;
    cfg.blocks_per_stage = 1;
    DecoderConfig dec;
    dec.num_classes = 2;
    SegModel model(cfg, dec);
    model.init_random(41);
    for (auto& p : model.encoder.params().entries()) p.tensor.set_requires_grad(false);
    std::vector<NamedParam> params = model.all_params();

    std::vector<std::uint64_t> encoder_hashes;
    for (const auto& p : model.encoder.params().entries()) {
        encoder_hashes.push_back(testutil::hash_tensor(p.tensor));
    }
    Rng rng(42);
    LabeledBatch batch{rand_tensor({2, 3, 16, 16}, rng, 0.0, 1.0), {}};
    batch.labels.assign(2 * 16 * 16, 0);
    for (std::size_t i = 0; i < batch.labels.size(); i += 2) batch.labels[i] = 1;
    AdamState st;
    AdamConfig acfg;
    const float loss = finetune_step(model, batch, params, st, acfg, 0, 0);
    CHECK(std::isfinite(loss));
    std::size_t i = 0;
    for (const auto& p : model.encoder.params().entries()) {
        for (float g : p.tensor.grad()) CHECK(g == 0.0f);
        CHECK(testutil::hash_tensor(p.tensor) == encoder_hashes[i++]);
    }
    bool decoder_moved = false;
    for (const auto& p : model.decoder.params().entries()) {
        for (float g : p.tensor.grad()) decoder_moved = decoder_moved || g != 0.0f;
    }
    CHECK(decoder_moved);
}

TEST_CASE("finetune_step aborts on a non-finite loss with diagnostics") {
    EncoderConfig cfg;
    cfg.stage_count = 2;
    cfg.base_channels = 4;
    cfg.blocks_per_stage = 0;
    DecoderConfig dec;
    dec.num_classes = 2;
    SegModel model(cfg, dec);
    model.init_random(51);
    Tensor w = model.encoder.params().find("encoder.stage0.down.weight");
    w.data()[0] = NAN;
    std::vector<NamedParam> params = model.all_params();
    Rng rng(52);
    LabeledBatch batch{rand_tensor({1, 3, 16, 16}, rng, 0.0, 1.0), {}};
    batch.labels.assign(16 * 16, 1);
    batch.labels[0] = 0;
    AdamState st;
    AdamConfig acfg;
    CHECK_THROWS_WITH_AS(finetune_step(model, batch, params, st, acfg, 7, 3),
                         doctest::Contains("epoch 7"), TrainAbortError);
}

TEST_CASE("ssl run writes deterministic metrics, checkpoints, and gate columns") {
    const auto dir_a = work_dir("ssl_a");
    RunConfig cfg = make_tiny_run(dir_a, 8, 16, /*unlabeled=*/true);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    const SslRunResult first = run_ssl(cfg);
    REQUIRE(first.rows.size() == 2);
    CHECK(first.rows[0].gates.size() == 2);
    CHECK(first.rows[0].lr == 0.1);
    CHECK(std::filesystem::exists(first.encoder_checkpoint));
    CHECK(std::filesystem::exists(first.head_checkpoint));
    CHECK(std::filesystem::exists(dir_a / "out" / "resolved_ssl.toml"));

    const std::string csv_a = read_file(first.metrics_csv);
    const std::string enc_a = read_file(first.encoder_checkpoint);

    cfg.data.output_dir = (dir_a / "out2").string();
    const SslRunResult second = run_ssl(cfg);
    CHECK(read_file(second.metrics_csv) == csv_a);
    CHECK(read_file(second.encoder_checkpoint) == enc_a);

    // the encoder checkpoint holds encoder parameters only
    const Checkpoint enc_ckpt = load_checkpoint(first.encoder_checkpoint);
    for (const auto& p : enc_ckpt.params) CHECK(p.name.rfind("encoder.", 0) == 0);
    const Checkpoint head_ckpt = load_checkpoint(first.head_checkpoint);
    for (const auto& p : head_ckpt.params) CHECK(p.name.rfind("fusion.", 0) == 0);
}

TEST_CASE("initial ssl loss sits near log(2N-1) under random init") {
    const auto dir = work_dir("ssl_loss0");
    RunConfig cfg = make_tiny_run(dir, 8, 16, /*unlabeled=*/true);
    cfg.train.epochs = 1;
    cfg.train.batch_size = 8;
    const SslRunResult res = run_ssl(cfg);
    const double expected = std::log(2.0 * 8.0 - 1.0);
    CHECK(*res.rows[0].loss == doctest::Approx(expected).epsilon(0.15));
}

TEST_CASE("finetune run tracks the best validation epoch and reports test miou") {
    const auto dir = work_dir("ft");
    RunConfig cfg = make_tiny_run(dir, 8, 16, /*unlabeled=*/false, /*noise=*/0.0);
    cfg.train.epochs = 3;
    cfg.train.batch_size = 4;
    cfg.train.optimizer = OptimizerKind::kAdam;
    cfg.train.adam.lr = 2e-3;
    cfg.train.schedule = ScheduleKind::kConstant;
    const FinetuneRunResult res = run_finetune(cfg);
    REQUIRE(res.rows.size() == 3);
    CHECK(res.best_epoch >= 0);
    CHECK(res.rows.back().miou.has_value());
    CHECK(res.test_miou >= 0.0);
    CHECK(res.test_miou <= 1.0);
    CHECK_FALSE(res.val_is_test);
    CHECK(std::filesystem::exists(res.model_checkpoint));

    const std::string csv_a = read_file(res.metrics_csv);
    cfg.data.output_dir = (dir / "out2").string();
    const FinetuneRunResult res2 = run_finetune(cfg);
    CHECK(read_file(res2.metrics_csv) == csv_a);

    // the kept checkpoint reproduces the reported validation score
    RunConfig eval_cfg = cfg;
    const EvalReport report =
        evaluate_checkpoint(eval_cfg, res2.model_checkpoint, Split::kVal);
    CHECK(report.pooled_miou == doctest::Approx(res.best_val_miou).epsilon(1e-9));
}

TEST_CASE("source pretraining excludes the classifier head from its checkpoint") {
    const auto dir = work_dir("src");
    RunConfig cfg = make_tiny_run(dir, 8, 16, /*unlabeled=*/false, /*noise=*/0.0);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    const SourcePretrainResult res = pretrain_source(cfg);
    CHECK(res.final_train_accuracy >= 0.0);
    const Checkpoint ckpt = load_checkpoint(res.encoder_checkpoint);
    for (const auto& p : ckpt.params) {
        CHECK(p.name.rfind("encoder.", 0) == 0);
        CHECK(p.name.find("classifier") == std::string::npos);
    }
    const std::string bytes = read_file(res.encoder_checkpoint);
    cfg.data.output_dir = (dir / "out2").string();
    const SourcePretrainResult res2 = pretrain_source(cfg);
    CHECK(read_file(res2.encoder_checkpoint) == bytes);

    // the encoder checkpoint initializes downstream runs
    RunConfig ft = cfg;
    ft.train.epochs = 1;
    ft.train.optimizer = OptimizerKind::kAdam;
    ft.data.encoder_init = res.encoder_checkpoint;
    ft.data.output_dir = (dir / "ft").string();
    const FinetuneRunResult fres = run_finetune(ft);
    CHECK(fres.rows.size() == 1);
}
