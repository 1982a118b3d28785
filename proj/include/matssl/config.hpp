// The run configuration record: every knob of a training/eval run in one
// serializable file. The on-disk format is a small TOML subset (sections,
// key = value with ints, floats, bools, quoted strings, and flat numeric
// arrays). Unknown keys are rejected; every run writes back the fully
// resolved configuration so a run is replayable from its output directory.
#pragma once

#include <cstdint>
#include <string>

#include "matssl/augment.hpp"
#include "matssl/encoder.hpp"
#include "matssl/optim.hpp"
#include "matssl/segmenter.hpp"
#include "matssl/sslhead.hpp"

namespace matssl {

enum class Phase { kAuto, kSourcePretrain, kSsl, kFinetune };
enum class OptimizerKind { kSgd, kAdam };
enum class ScheduleKind { kCosine, kConstant };
enum class ScheduleGranularity { kEpoch, kIteration };
enum class MiouConvention { kPooled, kPerImage };

struct TrainConfig {
    Phase phase = Phase::kAuto;
    int epochs = 50;
    int batch_size = 128;
    OptimizerKind optimizer = OptimizerKind::kSgd;
    SgdConfig sgd;    // lr 0.1, momentum 0.9, weight decay 1e-6
    AdamConfig adam;  // lr 1e-4, weight decay 1e-5
    ScheduleKind schedule = ScheduleKind::kCosine;
    double lr_min = 1e-4;
    ScheduleGranularity granularity = ScheduleGranularity::kEpoch;
    float temperature = 0.07f;
    std::uint64_t seed = 0;
    int eval_every = 1;
    bool freeze_encoder = false;

    void validate() const;
    double base_lr() const { return optimizer == OptimizerKind::kSgd ? sgd.lr : adam.lr; }
};

struct DataConfig {
    std::string image_dir;
    std::string manifest;
    int num_classes = 2;
    std::string encoder_init = "random";  // "random" or a checkpoint path
    std::string output_dir = "out";
};

struct MetaConfig {
    MiouConvention miou_convention = MiouConvention::kPooled;
    AbsentClassRule miou_absent_rule = AbsentClassRule::kExclude;
};

struct RunConfig {
    TrainConfig train;
    AugmentConfig augment;
    EncoderConfig encoder;
    FusionConfig fusion;
    DecoderConfig decoder;
    DataConfig data;
    MetaConfig meta;

    void validate() const;
};

RunConfig parse_run_config_text(const std::string& text, const std::string& origin);
RunConfig parse_run_config(const std::string& path);

// Fully resolved write-back: every key appears, defaults included, numbers in
// shortest round-trip form. Parsing the output reproduces the config.
std::string format_run_config(const RunConfig& cfg);
void write_run_config(const std::string& path, const RunConfig& cfg);

const char* phase_name(Phase p);

}  // namespace matssl
