// U-Net style decoder over the staged encoder, soft Dice loss, and IoU metrics.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "matssl/encoder.hpp"
#include "matssl/optim.hpp"
#include "matssl/params.hpp"

namespace matssl {

struct DecoderConfig {
    int num_classes = 2;
    // Adds one U-Net++ style nested column: each skip is refined with the
    // upsampled deeper map before the main path consumes it.
    bool nested_skip = false;

    void validate() const;
};

// Mirrors the encoder: per level nearest 2x upsample -> concat encoder skip ->
// conv3x3 -> ReLU -> conv3x3 -> ReLU; the shallowest level has no skip (the
// stem keeps no full-resolution map); 1x1 conv to class logits at input size.
class Decoder {
public:
    Decoder(const EncoderConfig& encoder_cfg, DecoderConfig cfg);

    void init_random(std::uint64_t seed);

    const DecoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Tensor forward(Tape& tape, const StageFeatureSet& features) const;  // logits [N,K,H,W]

private:
    EncoderConfig encoder_cfg_;
    DecoderConfig cfg_;
    ParamStore params_;
};

struct PredBatch {
    Tensor logits;         // [N,num_classes,H,W]
    Tensor probabilities;  // softmax over the class axis
};

struct SegModel {
    Encoder encoder;
    Decoder decoder;

    SegModel(EncoderConfig enc_cfg, DecoderConfig dec_cfg)
        : encoder(enc_cfg), decoder(enc_cfg, dec_cfg) {}

    void init_random(std::uint64_t seed) {
        encoder.init_random(seed);
        decoder.init_random(splitmix64(seed ^ 0xdecdecULL));
    }

    std::vector<NamedParam> all_params() {
        return ParamStore::merge({&encoder.params(), &decoder.params()});
    }

    PredBatch forward(Tape& tape, const Tensor& batch) const;
};

// Macro-averaged soft Dice over one-hot targets: per class c present in the
// truth, dice_c = 2 sum(y*p) / (sum y + sum p + eps); loss = 1 - mean dice.
// labels holds N*H*W class indices matching probs [N,C,H,W].
Tensor soft_dice_loss(Tape& tape, const Tensor& probs,
                      const std::vector<std::uint8_t>& labels, float eps = 1e-6f);

enum class AbsentClassRule { kExclude, kScoreOne, kScoreZero };

struct IouResult {
    std::vector<double> per_class;  // absent classes carry the rule's score (or NaN when excluded)
    std::vector<bool> present;      // class appears in pred or truth
    double mean = 0.0;
};

IouResult miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
               int num_classes, AbsentClassRule rule = AbsentClassRule::kExclude);

std::vector<std::uint8_t> argmax_classes(const Tensor& logits);

struct LabeledBatch {
    Tensor images;                    // [N,3,H,W]
    std::vector<std::uint8_t> labels; // N*H*W
};

// forward -> dice -> backward -> Adam update on every registered parameter.
// Returns the pre-update loss. Throws TrainAbortError on a non-finite loss,
// tagging epoch/batch diagnostics.
float finetune_step(SegModel& model, const LabeledBatch& batch, std::vector<NamedParam>& params,
                    AdamState& state, const AdamConfig& cfg, int epoch = -1, int batch_index = -1);

}  // namespace matssl
