// Staged residual backbone exposing per-stage feature maps and GAP vectors.
//
// Stage i halves resolution with a stride-2 3x3 conv and runs blocks_per_stage
// residual blocks (conv3x3 -> ReLU -> conv3x3, additive skip, ReLU).
// Channels double per stage: base_channels * 2^i. No normalization layers, so
// items in a batch never interact.
#pragma once

#include <cstdint>
#include <vector>

#include "matssl/params.hpp"
#include "matssl/tensor.hpp"

namespace matssl {

struct EncoderConfig {
    int stage_count = 4;
    int base_channels = 16;
    int blocks_per_stage = 2;
    int input_channels = 3;

    void validate() const;
    int stage_channels(int i) const { return base_channels << i; }
};

struct StageFeatureSet {
    std::vector<Tensor> maps;         // maps[i]: [N, C_i, H/2^(i+1), W/2^(i+1)]
    std::vector<Tensor> gap_vectors;  // gap_vectors[i]: [N, C_i]
};

class Encoder {
public:
    explicit Encoder(EncoderConfig cfg);

    void init_random(std::uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // batch: [N, input_channels, H, W]; H and W must be divisible by 2^stage_count.
    StageFeatureSet forward(Tape& tape, const Tensor& batch) const;

private:
    EncoderConfig cfg_;
    ParamStore params_;
};

}  // namespace matssl
