#include "matssl/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace matssl {

void DecoderConfig::validate() const {
    if (num_classes < 2) throw ValueError("decoder: num_classes must be >= 2");
}

Decoder::Decoder(const EncoderConfig& encoder_cfg, DecoderConfig cfg)
    : encoder_cfg_(encoder_cfg), cfg_(cfg) {
    cfg_.validate();
    const int stages = encoder_cfg_.stage_count;
    // level k consumes the upsampled deeper features plus the stage k-1 skip;
    // level 0 upsamples to full resolution without a skip.
    for (int k = stages - 1; k >= 0; --k) {
        const int in_above = encoder_cfg_.stage_channels(k);
        const int skip_ch = k >= 1 ? encoder_cfg_.stage_channels(k - 1) : 0;
        const int out_ch = k >= 1 ? encoder_cfg_.stage_channels(k - 1) : encoder_cfg_.base_channels;
        const std::string prefix = "decoder.level" + std::to_string(k) + ".";
        params_.add(prefix + "conv1.weight", Tensor::zeros({out_ch, in_above + skip_ch, 3, 3}));
        params_.add(prefix + "conv1.bias", Tensor::zeros({out_ch}));
        params_.add(prefix + "conv2.weight", Tensor::zeros({out_ch, out_ch, 3, 3}));
        params_.add(prefix + "conv2.bias", Tensor::zeros({out_ch}));
        if (cfg_.nested_skip && k >= 1) {
            const int nested_in = encoder_cfg_.stage_channels(k - 1) + encoder_cfg_.stage_channels(k);
            const std::string np = "decoder.nested" + std::to_string(k) + ".";
            params_.add(np + "weight", Tensor::zeros({skip_ch, nested_in, 3, 3}));
            params_.add(np + "bias", Tensor::zeros({skip_ch}));
        }
    }
    params_.add("decoder.head.weight",
                Tensor::zeros({cfg_.num_classes, encoder_cfg_.base_channels, 1, 1}));
    params_.add("decoder.head.bias", Tensor::zeros({cfg_.num_classes}));
}

void Decoder::init_random(std::uint64_t seed) {
    Rng rng = Rng::stream(seed, /*stream_id=*/0xdec0de);
    for (auto& p : params_.entries()) {
        if (p.tensor.ndim() == 4) {
            const std::int64_t fan_in = p.tensor.dim(1) * p.tensor.dim(2) * p.tensor.dim(3);
            Tensor init = kaiming_uniform(p.tensor.shape(), fan_in, rng);
            std::copy(init.data().begin(), init.data().end(), p.tensor.data().begin());
        } else {
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
        }
        p.tensor.zero_grad();
    }
}

Tensor Decoder::forward(Tape& tape, const StageFeatureSet& features) const {
    const int stages = encoder_cfg_.stage_count;
    if (static_cast<int>(features.maps.size()) != stages) {
        throw ShapeError("decoder: expected " + std::to_string(stages) + " stage maps, got " +
                         std::to_string(features.maps.size()));
    }
    Tensor x = features.maps[static_cast<std::size_t>(stages - 1)];
    for (int k = stages - 1; k >= 0; --k) {
        const std::string prefix = "decoder.level" + std::to_string(k) + ".";
        x = upsample_nearest2x(tape, x);
        if (k >= 1) {
            Tensor skip = features.maps[static_cast<std::size_t>(k - 1)];
            if (cfg_.nested_skip) {
                const std::string np = "decoder.nested" + std::to_string(k) + ".";
                Tensor deeper = upsample_nearest2x(tape, features.maps[static_cast<std::size_t>(k)]);
                const Tensor pieces[] = {skip, deeper};
                skip = relu(tape, conv2d(tape, concat(tape, pieces),
                                         params_.find(np + "weight"), params_.find(np + "bias"), 1, 1));
            }
            const Tensor pieces[] = {x, skip};
            x = concat(tape, pieces);
        }
        x = relu(tape, conv2d(tape, x, params_.find(prefix + "conv1.weight"),
                              params_.find(prefix + "conv1.bias"), 1, 1));
        x = relu(tape, conv2d(tape, x, params_.find(prefix + "conv2.weight"),
                              params_.find(prefix + "conv2.bias"), 1, 1));
    }
    return conv2d(tape, x, params_.find("decoder.head.weight"), params_.find("decoder.head.bias"),
                  1, 0);
}

PredBatch SegModel::forward(Tape& tape, const Tensor& batch) const {
    const StageFeatureSet features = encoder.forward(tape, batch);
    PredBatch pred;
    pred.logits = decoder.forward(tape, features);
    pred.probabilities = softmax_channels(tape, pred.logits);
    return pred;
}

Tensor soft_dice_loss(Tape& tape, const Tensor& probs, const std::vector<std::uint8_t>& labels,
                      float eps) {
    if (probs.ndim() != 4) {
        throw ShapeError("dice: expected probabilities [N,C,H,W], got " + shape_str(probs.shape()));
    }
    const std::int64_t n = probs.dim(0), c = probs.dim(1);
    const std::int64_t plane = probs.dim(2) * probs.dim(3);
    if (static_cast<std::int64_t>(labels.size()) != n * plane) {
        throw ShapeError("dice: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n * plane) + " pixels");
    }
    for (auto l : labels) {
        if (l >= c) {
            throw ValueError("dice: label " + std::to_string(l) + " >= class count " +
                             std::to_string(c));
        }
    }
    const float* p = probs.data().data();
    std::vector<double> inter(static_cast<std::size_t>(c), 0.0);   // sum y*p per class
    std::vector<double> sum_p(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sum_y(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < plane; ++j) {
            const std::uint8_t y = labels[static_cast<std::size_t>(i * plane + j)];
            inter[y] += p[(i * c + y) * plane + j];
            for (std::int64_t ci = 0; ci < c; ++ci) {
                sum_p[static_cast<std::size_t>(ci)] += p[(i * c + ci) * plane + j];
            }
        }
    }
    for (auto l : labels) sum_y[l] += 1.0;

    // Classes with no truth pixels are skipped rather than scored, so absent
    // phases contribute neither loss nor gradient.
    double dice_total = 0.0;
    int present = 0;
    std::vector<double> numer(static_cast<std::size_t>(c), 0.0);
    std::vector<double> denom(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        const auto cz = static_cast<std::size_t>(ci);
        if (sum_y[cz] == 0.0) continue;
        numer[cz] = 2.0 * inter[cz];
        denom[cz] = sum_y[cz] + sum_p[cz] + static_cast<double>(eps);
        dice_total += numer[cz] / denom[cz];
        ++present;
    }
    Tensor out = Tensor::scalar64(1.0 - dice_total / present);

    const Tensor ins[] = {probs};
    tape.record("soft_dice_loss", ins, out,
                [probs, out, labels, numer, denom, sum_y, present, n, c, plane]() mutable {
        if (!probs.requires_grad()) return;
        float* gp = probs.grad().data();
        const double g = static_cast<double>(out.grad()[0]) / present;
        // d dice_c / d p_i^c = (2*y_i - dice_c) / denom_c with dice_c = numer/denom
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const auto cz = static_cast<std::size_t>(ci);
            if (sum_y[cz] == 0.0) continue;
            const double dice_c = numer[cz] / denom[cz];
            const double inv_den = 1.0 / denom[cz];
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < plane; ++j) {
                    const double y =
                        labels[static_cast<std::size_t>(i * plane + j)] == ci ? 1.0 : 0.0;
                    gp[(i * c + ci) * plane + j] +=
                        static_cast<float>(-g * (2.0 * y - dice_c) * inv_den);
                }
            }
        }
    });
    return out;
}

IouResult miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
               int num_classes, AbsentClassRule rule) {
    if (pred.size() != truth.size()) {
        throw ShapeError("miou: prediction has " + std::to_string(pred.size()) + " pixels, truth " +
                         std::to_string(truth.size()));
    }
    std::vector<std::int64_t> inter(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> in_pred(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> in_truth(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= num_classes || truth[i] >= num_classes) {
            throw ValueError("miou: class index exceeds num_classes");
        }
        ++in_pred[pred[i]];
        ++in_truth[truth[i]];
        if (pred[i] == truth[i]) ++inter[pred[i]];
    }
    IouResult res;
    res.per_class.assign(static_cast<std::size_t>(num_classes),
                         std::numeric_limits<double>::quiet_NaN());
    res.present.assign(static_cast<std::size_t>(num_classes), false);
    double total = 0.0;
    int counted = 0;
    for (int ci = 0; ci < num_classes; ++ci) {
        const auto cz = static_cast<std::size_t>(ci);
        const std::int64_t uni = in_pred[cz] + in_truth[cz] - inter[cz];
        if (uni > 0) {
            res.present[cz] = true;
            res.per_class[cz] = static_cast<double>(inter[cz]) / static_cast<double>(uni);
            total += res.per_class[cz];
            ++counted;
        } else {
            switch (rule) {
                case AbsentClassRule::kExclude: break;
                case AbsentClassRule::kScoreOne:
                    res.per_class[cz] = 1.0;
                    total += 1.0;
                    ++counted;
                    break;
                case AbsentClassRule::kScoreZero:
                    res.per_class[cz] = 0.0;
                    ++counted;
                    break;
            }
        }
    }
    res.mean = counted > 0 ? total / counted : 0.0;
    return res;
}

std::vector<std::uint8_t> argmax_classes(const Tensor& logits) {
    if (logits.ndim() != 4) {
        throw ShapeError("argmax_classes: expected [N,C,H,W], got " + shape_str(logits.shape()));
    }
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    const std::int64_t plane = logits.dim(2) * logits.dim(3);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(n * plane));
    const float* p = logits.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < plane; ++j) {
            int best = 0;
            float best_v = p[(i * c) * plane + j];
            for (std::int64_t ci = 1; ci < c; ++ci) {
                const float v = p[(i * c + ci) * plane + j];
                if (v > best_v) {
                    best_v = v;
                    best = static_cast<int>(ci);
                }
            }
            out[static_cast<std::size_t>(i * plane + j)] = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

float finetune_step(SegModel& model, const LabeledBatch& batch, std::vector<NamedParam>& params,
                    AdamState& state, const AdamConfig& cfg, int epoch, int batch_index) {
    Tape tape;
    const PredBatch pred = model.forward(tape, batch.images);
    const Tensor loss = soft_dice_loss(tape, pred.probabilities, batch.labels);
    const float loss_v = loss.value();
    if (!std::isfinite(loss_v)) {
        throw TrainAbortError("non-finite dice loss " + std::to_string(loss_v) + " at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch_index));
    }
    for (auto& p : params) p.tensor.zero_grad();
    tape.backward(loss);
    adam_step(params, state, cfg, cfg.lr);
    return loss_v;
}

}  // namespace matssl
