// Python bindings over the core pipeline operations.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>

#include "matssl/augment.hpp"
#include "matssl/config.hpp"
#include "matssl/dataset.hpp"
#include "matssl/segmenter.hpp"
#include "matssl/sslhead.hpp"
#include "matssl/synthetic.hpp"
#include "matssl/trainer.hpp"

namespace py = pybind11;

namespace {

matssl::Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
    matssl::Shape shape;
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape.push_back(arr.shape(i));
    std::vector<float> data(static_cast<std::size_t>(arr.size()));
    std::memcpy(data.data(), arr.data(), data.size() * sizeof(float));
    return matssl::Tensor::from(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const matssl::Tensor& t) {
    std::vector<py::ssize_t> shape;
    for (int i = 0; i < t.ndim(); ++i) shape.push_back(t.dim(i));
    py::array_t<float> out(shape);
    std::memcpy(out.mutable_data(), t.data().data(), t.data().size() * sizeof(float));
    return out;
}

std::vector<std::uint8_t> bytes_from_array(
    const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& arr) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(arr.size()));
    std::memcpy(out.data(), arr.data(), out.size());
    return out;
}

matssl::AbsentClassRule rule_from_name(const std::string& name) {
    if (name == "exclude") return matssl::AbsentClassRule::kExclude;
    if (name == "one") return matssl::AbsentClassRule::kScoreOne;
    if (name == "zero") return matssl::AbsentClassRule::kScoreZero;
    throw matssl::ValueError("absent_rule must be exclude | one | zero");
}

}  // namespace

PYBIND11_MODULE(matssl, m) {
    m.doc() = "Contrastive encoder adaptation and micrograph segmentation (C++ core)";

    py::register_exception<matssl::Error>(m, "MatsslError");

    m.def(
        "generate_synthetic",
        [](std::uint64_t seed, int width, int height, int count, int grain_count, int phase_count,
           double noise_std, std::optional<int> stripe_phase, int stripe_period,
           const std::vector<double>& intensities) {
            matssl::SyntheticSpec spec;
            spec.seed = seed;
            spec.grain_count = grain_count;
            spec.phase_count = phase_count;
            spec.noise_std = noise_std;
            spec.stripe_phase = stripe_phase;
            spec.stripe_period = stripe_period;
            spec.intensities = intensities;
            const auto images = matssl::generate_synthetic(spec, width, height, count);
            py::array_t<std::uint8_t> pixels({count, height, width});
            py::array_t<std::uint8_t> masks({count, height, width});
            for (int i = 0; i < count; ++i) {
                const auto& img = images[static_cast<std::size_t>(i)];
                std::memcpy(pixels.mutable_data(i, 0, 0), img.pixels.data(), img.pixels.size());
                std::memcpy(masks.mutable_data(i, 0, 0), img.mask.data(), img.mask.size());
            }
            return py::make_tuple(pixels, masks);
        },
        py::arg("seed"), py::arg("width"), py::arg("height"), py::arg("count") = 1,
        py::arg("grain_count") = 16, py::arg("phase_count") = 2, py::arg("noise_std") = 0.0,
        py::arg("stripe_phase") = std::nullopt, py::arg("stripe_period") = 6,
        py::arg("intensities") = std::vector<double>{},
        "Voronoi-grain micrographs with ground-truth phase masks; returns (images, masks)");

    m.def(
        "patchify",
        [](int width, int height, int patch_size, double overlap) {
            std::vector<std::pair<int, int>> out;
            for (const auto& w : matssl::patchify(width, height, patch_size, overlap)) {
                out.emplace_back(w.x, w.y);
            }
            return out;
        },
        py::arg("width"), py::arg("height"), py::arg("patch_size"), py::arg("overlap") = 0.0,
        "Sliding-window origins (x, y) with the clamped final window");

    m.def(
        "ntxent_loss",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& z, double tau) {
            matssl::Tape tape(false);
            return static_cast<double>(
                matssl::ntxent_loss(tape, tensor_from_array(z), static_cast<float>(tau)).value());
        },
        py::arg("z"), py::arg("tau") = 0.07,
        "NT-Xent over embeddings [2N,D]; rows k and k+N are positives");

    m.def(
        "ntxent_per_anchor",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& z, double tau) {
            matssl::Tape tape(false);
            std::vector<double> per_anchor;
            matssl::ntxent_loss(tape, tensor_from_array(z), static_cast<float>(tau),
                                matssl::kNormEps, &per_anchor);
            return per_anchor;
        },
        py::arg("z"), py::arg("tau") = 0.07, "Per-anchor NT-Xent terms in float64");

    m.def(
        "dice_loss",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& logits,
           const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& labels) {
            matssl::Tape tape(false);
            const matssl::Tensor probs = matssl::softmax_channels(tape, tensor_from_array(logits));
            return static_cast<double>(
                matssl::soft_dice_loss(tape, probs, bytes_from_array(labels)).value());
        },
        py::arg("logits"), py::arg("labels"),
        "Macro-averaged soft Dice of softmax(logits [N,C,H,W]) against labels [N,H,W]");

    m.def(
        "miou",
        [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& pred,
           const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& truth,
           int num_classes, const std::string& absent_rule) {
            const auto res = matssl::miou(bytes_from_array(pred), bytes_from_array(truth),
                                          num_classes, rule_from_name(absent_rule));
            return py::make_tuple(res.per_class, res.mean);
        },
        py::arg("pred"), py::arg("truth"), py::arg("num_classes"),
        py::arg("absent_rule") = "exclude",
        "(per-class IoU, mean); classes absent from both sides follow absent_rule");

    m.def(
        "cosine_lr",
        [](std::int64_t t, std::int64_t total, double lr_max, double lr_min) {
            return matssl::cosine_lr(t, total, lr_max, lr_min);
        },
        py::arg("t"), py::arg("total"), py::arg("lr_max") = 0.1, py::arg("lr_min") = 1e-4);

    m.def(
        "cosine_similarity",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& b) {
            matssl::Tape tape(false);
            return static_cast<double>(
                matssl::cosine_similarity(tape, tensor_from_array(a), tensor_from_array(b)).value());
        },
        py::arg("a"), py::arg("b"));

    m.def(
        "conv2d",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& input,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& kernel,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& bias, int stride,
           int padding) {
            matssl::Tape tape(false);
            return array_from_tensor(matssl::conv2d(tape, tensor_from_array(input),
                                                    tensor_from_array(kernel),
                                                    tensor_from_array(bias), stride, padding));
        },
        py::arg("input"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1,
        py::arg("padding") = 0, "Cross-correlation forward pass");

    m.def(
        "global_average_pool",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& input) {
            matssl::Tape tape(false);
            return array_from_tensor(matssl::global_average_pool(tape, tensor_from_array(input)));
        },
        py::arg("input"));

    m.def(
        "run_ssl",
        [](const std::string& config_path) {
            matssl::RunConfig cfg = matssl::parse_run_config(config_path);
            cfg.train.phase = matssl::Phase::kSsl;
            const auto res = matssl::run_ssl(cfg);
            py::dict out;
            out["encoder_checkpoint"] = res.encoder_checkpoint;
            out["head_checkpoint"] = res.head_checkpoint;
            out["metrics_csv"] = res.metrics_csv;
            out["final_loss"] = res.rows.back().loss.value();
            return out;
        },
        py::arg("config_path"), "Contrastive adaptation run driven by a config file");

    m.def(
        "run_finetune",
        [](const std::string& config_path) {
            matssl::RunConfig cfg = matssl::parse_run_config(config_path);
            cfg.train.phase = matssl::Phase::kFinetune;
            const auto res = matssl::run_finetune(cfg);
            py::dict out;
            out["model_checkpoint"] = res.model_checkpoint;
            out["metrics_csv"] = res.metrics_csv;
            out["best_epoch"] = res.best_epoch;
            out["best_val_miou"] = res.best_val_miou;
            out["test_miou"] = res.test_miou;
            return out;
        },
        py::arg("config_path"), "Dice fine-tuning run driven by a config file");

    m.def(
        "pretrain_source",
        [](const std::string& config_path) {
            matssl::RunConfig cfg = matssl::parse_run_config(config_path);
            cfg.train.phase = matssl::Phase::kSourcePretrain;
            const auto res = matssl::pretrain_source(cfg);
            py::dict out;
            out["encoder_checkpoint"] = res.encoder_checkpoint;
            out["metrics_csv"] = res.metrics_csv;
            out["final_train_accuracy"] = res.final_train_accuracy;
            return out;
        },
        py::arg("config_path"), "Supervised dominant-phase pretraining driven by a config file");
}
