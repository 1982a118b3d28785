// matssl command line: synthetic data generation, patch manifests, the three
// training phases, evaluation, and metric plots.
//
// Exit codes: 0 success, 2 validation/configuration error, 3 training abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "matssl/config.hpp"
#include "matssl/dataset.hpp"
#include "matssl/svgplot.hpp"
#include "matssl/synthetic.hpp"
#include "matssl/trainer.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitTrainAbort = 3;

struct SynthArgs {
    int count = 50;
    int size = 128;
    int phases = 2;
    int grains = 16;
    std::uint64_t seed = 0;
    double noise = 0.0;
    int stripe_phase = -1;
    int stripe_period = 6;
    std::vector<double> intensities;
    std::string out_dir = "data";
};

int cmd_synth(const SynthArgs& args) {
    matssl::SyntheticSpec spec;
    spec.seed = args.seed;
    spec.grain_count = args.grains;
    spec.phase_count = args.phases;
    spec.noise_std = args.noise;
    if (args.stripe_phase >= 0) spec.stripe_phase = args.stripe_phase;
    spec.stripe_period = args.stripe_period;
    spec.intensities = args.intensities;
    spec.validate();

    std::filesystem::create_directories(args.out_dir);
    matssl::PatchDataset manifest;
    for (int i = 0; i < args.count; ++i) {
        const matssl::ImageRecord img =
            matssl::generate_synthetic_image(spec, args.size, args.size, i);
        matssl::save_image(args.out_dir + "/" + img.id + ".pgm", img);
        char mask_name[32];
        std::snprintf(mask_name, sizeof(mask_name), "mask_%04d", i);
        matssl::save_mask(args.out_dir + "/" + mask_name + ".pgm", img.mask, img.width, img.height);
        manifest.entries.push_back({img.id, 0, 0, args.size, matssl::Split::kUnlabeled});
    }
    manifest.patch_size = args.size;
    matssl::save_manifest(args.out_dir + "/images.tsv", manifest);
    std::cout << "wrote " << args.count << " image/mask pairs to " << args.out_dir << "\n";
    return 0;
}

struct PatchifyArgs {
    std::string input_dir;
    int patch = 256;
    double overlap = 0.0;
    double split_ratio = 0.8;
    double val_ratio = 0.0;
    std::uint64_t seed = 0;
    bool unlabeled = false;
    std::string out_manifest;
};

int cmd_patchify(const PatchifyArgs& args) {
    std::vector<matssl::SourceImage> sources;
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(args.input_dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = entry.path().extension().string();
        const std::string stem = entry.path().stem().string();
        if ((ext != ".pgm" && ext != ".ppm") || stem.rfind("mask", 0) == 0 ||
            stem.rfind("pred_", 0) == 0) {
            continue;
        }
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        const matssl::ImageRecord img = matssl::load_image(path.string());
        sources.push_back({img.id, img.width, img.height});
    }
    if (sources.empty()) {
        throw matssl::ValueError("patchify: no .pgm/.ppm images under '" + args.input_dir + "'");
    }
    const matssl::PatchDataset ds =
        matssl::build_patch_dataset(sources, args.patch, args.overlap, args.split_ratio, args.seed,
                                    args.val_ratio, args.unlabeled);
    const std::string out =
        args.out_manifest.empty() ? args.input_dir + "/patches.tsv" : args.out_manifest;
    if (const auto parent = std::filesystem::path(out).parent_path(); !parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    matssl::save_manifest(out, ds);
    std::size_t counts[4] = {0, 0, 0, 0};
    for (const auto& e : ds.entries) counts[static_cast<int>(e.split)]++;
    std::cout << "manifest " << out << ": " << ds.entries.size() << " patches (train " << counts[0]
              << ", val " << counts[1] << ", test " << counts[2] << ", unlabeled " << counts[3]
              << ")\n";
    return 0;
}

matssl::RunConfig load_config(const std::string& path, matssl::Phase expect,
                              const std::string& encoder_init_override,
                              const std::string& output_dir_override) {
    matssl::RunConfig cfg = matssl::parse_run_config(path);
    if (cfg.train.phase != matssl::Phase::kAuto && cfg.train.phase != expect) {
        throw matssl::ConfigError(std::string("config declares phase '") +
                                  matssl::phase_name(cfg.train.phase) + "' but the subcommand runs '" +
                                  matssl::phase_name(expect) + "'");
    }
    cfg.train.phase = expect;
    if (!encoder_init_override.empty()) cfg.data.encoder_init = encoder_init_override;
    if (!output_dir_override.empty()) cfg.data.output_dir = output_dir_override;
    if (cfg.data.manifest.empty()) throw matssl::ConfigError("data.manifest is required");
    if (cfg.data.image_dir.empty()) throw matssl::ConfigError("data.image_dir is required");
    if (cfg.data.encoder_init != "random" && !std::filesystem::exists(cfg.data.encoder_init)) {
        throw matssl::ConfigError("data.encoder_init: checkpoint '" + cfg.data.encoder_init +
                                  "' does not exist");
    }
    cfg.validate();
    return cfg;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& split_tag, const std::string& out_dir) {
    matssl::RunConfig cfg = matssl::parse_run_config(config_path);
    if (!std::filesystem::exists(checkpoint)) {
        throw matssl::ConfigError("checkpoint '" + checkpoint + "' does not exist");
    }
    const matssl::Split split = matssl::split_from_name(split_tag);
    const std::string out = out_dir.empty() ? cfg.data.output_dir + "/eval" : out_dir;
    const matssl::EvalReport report = matssl::evaluate_checkpoint(cfg, checkpoint, split, out);

    std::ostringstream csv;
    csv << "image,miou";
    for (int c = 0; c < report.num_classes; ++c) csv << ",iou_" << c;
    csv << "\n";
    const auto row = [&](const std::string& name, double miou, const std::vector<double>& per_class) {
        csv << name << ',' << matssl::format_double(miou);
        for (double v : per_class) {
            csv << ',';
            if (std::isfinite(v)) csv << matssl::format_double(v);
        }
        csv << "\n";
    };
    for (const auto& img : report.per_image) row(img.image_id, img.miou, img.per_class_iou);
    row("pooled", report.pooled_miou, report.pooled_per_class);
    row("mean_per_image", report.mean_per_image_miou, {});
    std::filesystem::create_directories(out);
    const std::string report_path = out + "/eval_report.csv";
    std::ofstream f(report_path, std::ios::binary);
    f << csv.str();
    if (!f) throw matssl::ParseError("write failed on '" + report_path + "'");

    std::cout << "split: " << split_tag << "\n";
    std::cout << "pooled mIoU:          " << matssl::format_double(report.pooled_miou) << "\n";
    std::cout << "mean per-image mIoU:  " << matssl::format_double(report.mean_per_image_miou)
              << "\n";
    std::cout << "per-class IoU (pooled):";
    for (double v : report.pooled_per_class) {
        std::cout << ' ' << (std::isfinite(v) ? matssl::format_double(v) : "absent");
    }
    std::cout << "\nreport: " << report_path << "\n";
    return 0;
}

int cmd_plot(const std::vector<std::string>& csv_paths, const std::string& out_path) {
    matssl::PlotPanel miou_panel{"validation mIoU per epoch", "epoch", "mIoU", {}};
    matssl::PlotPanel loss_panel{"training loss per epoch", "epoch", "loss", {}};
    for (const auto& path : csv_paths) {
        const std::vector<matssl::MetricsRow> rows = matssl::load_metrics_csv(path);
        const std::string stem = std::filesystem::path(path).stem().string();
        matssl::PlotSeries miou_series{stem, {}};
        matssl::PlotSeries loss_series{stem, {}};
        for (const auto& row : rows) {
            if (row.miou) miou_series.points.push_back({static_cast<double>(row.epoch), *row.miou});
            if (row.loss) loss_series.points.push_back({static_cast<double>(row.epoch), *row.loss});
        }
        if (miou_series.points.empty()) {
            std::cerr << "warning: '" << path << "' has no mIoU values; series omitted\n";
        } else {
            miou_panel.series.push_back(std::move(miou_series));
        }
        if (loss_series.points.empty()) {
            std::cerr << "warning: '" << path << "' has no loss values; series omitted\n";
        } else {
            loss_panel.series.push_back(std::move(loss_series));
        }
    }
    const std::string svg = matssl::render_svg({miou_panel, loss_panel});
    std::ofstream f(out_path, std::ios::binary);
    if (!f) throw matssl::ParseError("cannot open '" + out_path + "' for writing");
    f << svg;
    if (!f) throw matssl::ParseError("write failed on '" + out_path + "'");
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"matssl: contrastive pretraining and segmentation fine-tuning on micrographs"};
    app.require_subcommand(1);

    SynthArgs synth;
    CLI::App* synth_cmd = app.add_subcommand("synth", "generate synthetic micrographs with masks");
    synth_cmd->add_option("--count", synth.count, "number of images")->capture_default_str();
    synth_cmd->add_option("--size", synth.size, "image side in pixels")->capture_default_str();
    synth_cmd->add_option("--phases", synth.phases, "phase (class) count")->capture_default_str();
    synth_cmd->add_option("--grains", synth.grains, "Voronoi grain count")->capture_default_str();
    synth_cmd->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
    synth_cmd->add_option("--noise", synth.noise, "Gaussian pixel noise std")->capture_default_str();
    synth_cmd->add_option("--stripe-phase", synth.stripe_phase,
                          "phase index carrying lamellar stripes (-1 = none)")
        ->capture_default_str();
    synth_cmd->add_option("--stripe-period", synth.stripe_period, "stripe period in pixels")
        ->capture_default_str();
    synth_cmd->add_option("--intensities", synth.intensities,
                          "per-phase base intensities (default: evenly spaced)");
    synth_cmd->add_option("--out", synth.out_dir, "output directory")->capture_default_str();

    PatchifyArgs patchify;
    CLI::App* patchify_cmd =
        app.add_subcommand("patchify", "slide windows over images and write a patch manifest");
    patchify_cmd->add_option("input", patchify.input_dir, "directory of .pgm/.ppm images")
        ->required();
    patchify_cmd->add_option("--patch", patchify.patch, "patch side in pixels")
        ->capture_default_str();
    patchify_cmd->add_option("--overlap", patchify.overlap, "window overlap fraction in [0,1)")
        ->capture_default_str();
    patchify_cmd->add_option("--split-ratio", patchify.split_ratio, "train fraction of images")
        ->capture_default_str();
    patchify_cmd->add_option("--val-ratio", patchify.val_ratio,
                             "validation fraction of images (taken after train)")
        ->capture_default_str();
    patchify_cmd->add_option("--seed", patchify.seed, "split assignment seed")
        ->capture_default_str();
    patchify_cmd->add_flag("--unlabeled", patchify.unlabeled,
                           "tag every patch 'unlabeled' instead of splitting");
    patchify_cmd->add_option("--out", patchify.out_manifest,
                             "manifest path (default: <input>/patches.tsv)");

    std::string config_path, encoder_init, output_dir;
    CLI::App* source_cmd = app.add_subcommand(
        "pretrain-source", "supervised dominant-phase pretraining of the encoder");
    source_cmd->add_option("--config", config_path, "run config file")->required();
    source_cmd->add_option("--out", output_dir, "override data.output_dir");

    CLI::App* ssl_cmd =
        app.add_subcommand("ssl", "contrastive self-supervised adaptation of the encoder");
    ssl_cmd->add_option("--config", config_path, "run config file")->required();
    ssl_cmd->add_option("--encoder-init", encoder_init,
                        "override data.encoder_init (checkpoint path or 'random')");
    ssl_cmd->add_option("--out", output_dir, "override data.output_dir");

    CLI::App* finetune_cmd =
        app.add_subcommand("finetune", "supervised segmentation fine-tuning with Dice loss");
    finetune_cmd->add_option("--config", config_path, "run config file")->required();
    finetune_cmd->add_option("--encoder-init", encoder_init,
                             "override data.encoder_init (checkpoint path or 'random')");
    finetune_cmd->add_option("--out", output_dir, "override data.output_dir");

    std::string eval_checkpoint, eval_split = "test", eval_out;
    CLI::App* eval_cmd =
        app.add_subcommand("eval", "evaluate a checkpoint: mIoU report and predicted masks");
    eval_cmd->add_option("--config", config_path, "run config file")->required();
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "model checkpoint to evaluate")
        ->required();
    eval_cmd->add_option("--split", eval_split, "manifest split to score")->capture_default_str();
    eval_cmd->add_option("--out", eval_out, "report/mask output directory");

    std::vector<std::string> plot_csvs;
    std::string plot_out = "metrics.svg";
    CLI::App* plot_cmd = app.add_subcommand("plot", "render metrics CSVs as SVG line charts");
    plot_cmd->add_option("csv", plot_csvs, "metrics CSV files")->required()->expected(-1);
    plot_cmd->add_option("--out", plot_out, "output SVG path")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitValidation;
    }

    try {
        if (*synth_cmd) return cmd_synth(synth);
        if (*patchify_cmd) return cmd_patchify(patchify);
        if (*source_cmd) {
            const matssl::RunConfig cfg =
                load_config(config_path, matssl::Phase::kSourcePretrain, "", output_dir);
            const matssl::SourcePretrainResult res = matssl::pretrain_source(cfg);
            std::cout << "final train accuracy: " << matssl::format_double(res.final_train_accuracy)
                      << "\nencoder checkpoint:   " << res.encoder_checkpoint
                      << "\nmetrics:              " << res.metrics_csv << "\n";
            return 0;
        }
        if (*ssl_cmd) {
            const matssl::RunConfig cfg =
                load_config(config_path, matssl::Phase::kSsl, encoder_init, output_dir);
            const matssl::SslRunResult res = matssl::run_ssl(cfg);
            std::cout << "final loss:         "
                      << matssl::format_double(res.rows.back().loss.value())
                      << "\nencoder checkpoint: " << res.encoder_checkpoint
                      << "\nfusion head:        " << res.head_checkpoint
                      << "\nmetrics:            " << res.metrics_csv << "\n";
            return 0;
        }
        if (*finetune_cmd) {
            const matssl::RunConfig cfg =
                load_config(config_path, matssl::Phase::kFinetune, encoder_init, output_dir);
            const matssl::FinetuneRunResult res = matssl::run_finetune(cfg);
            std::cout << "best epoch:      " << res.best_epoch << " (val mIoU "
                      << matssl::format_double(res.best_val_miou) << ")\n";
            if (res.val_is_test) {
                std::cout << "note: no val split in manifest; test split used for validation\n";
            }
            std::cout << "test mIoU:       " << matssl::format_double(res.test_miou)
                      << "\nmodel checkpoint: " << res.model_checkpoint
                      << "\nmetrics:          " << res.metrics_csv << "\n";
            return 0;
        }
        if (*eval_cmd) return cmd_eval(config_path, eval_checkpoint, eval_split, eval_out);
        if (*plot_cmd) return cmd_plot(plot_csvs, plot_out);
    } catch (const matssl::TrainAbortError& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return kExitTrainAbort;
    } catch (const matssl::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return 0;
}
