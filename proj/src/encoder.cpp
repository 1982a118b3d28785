#include "matssl/encoder.hpp"

#include <cmath>

namespace matssl {

Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

void EncoderConfig::validate() const {
    if (stage_count < 2) throw ValueError("encoder: stage_count must be >= 2");
    if (base_channels < 1) throw ValueError("encoder: base_channels must be >= 1");
    if (blocks_per_stage < 0) throw ValueError("encoder: blocks_per_stage must be >= 0");
    if (input_channels != 1 && input_channels != 3) {
        throw ValueError("encoder: input_channels must be 1 or 3");
    }
}

Encoder::Encoder(EncoderConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    int in_ch = cfg_.input_channels;
    for (int s = 0; s < cfg_.stage_count; ++s) {
        const int out_ch = cfg_.stage_channels(s);
        const std::string prefix = "encoder.stage" + std::to_string(s) + ".";
        params_.add(prefix + "down.weight", Tensor::zeros({out_ch, in_ch, 3, 3}));
        params_.add(prefix + "down.bias", Tensor::zeros({out_ch}));
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::string bp = prefix + "block" + std::to_string(b) + ".";
            params_.add(bp + "conv1.weight", Tensor::zeros({out_ch, out_ch, 3, 3}));
            params_.add(bp + "conv1.bias", Tensor::zeros({out_ch}));
            params_.add(bp + "conv2.weight", Tensor::zeros({out_ch, out_ch, 3, 3}));
            params_.add(bp + "conv2.bias", Tensor::zeros({out_ch}));
        }
        in_ch = out_ch;
    }
}

void Encoder::init_random(std::uint64_t seed) {
    Rng rng = Rng::stream(seed, /*stream_id=*/0xe2c0de);
    for (auto& p : params_.entries()) {
        if (p.tensor.ndim() == 4) {
            const std::int64_t fan_in = p.tensor.dim(1) * p.tensor.dim(2) * p.tensor.dim(3);
            Tensor init = kaiming_uniform(p.tensor.shape(), fan_in, rng);
            std::copy(init.data().begin(), init.data().end(), p.tensor.data().begin());
        } else {
            for (auto& v : p.tensor.data()) v = 0.0f;  // zero biases
        }
        p.tensor.zero_grad();
    }
}

StageFeatureSet Encoder::forward(Tape& tape, const Tensor& batch) const {
    if (batch.ndim() != 4 || batch.dim(1) != cfg_.input_channels) {
        throw ShapeError("encoder: expected [N," + std::to_string(cfg_.input_channels) +
                         ",H,W], got " + shape_str(batch.shape()));
    }
    const std::int64_t div = std::int64_t{1} << cfg_.stage_count;
    if (batch.dim(2) % div != 0 || batch.dim(3) % div != 0) {
        throw ShapeError("encoder: spatial size " + std::to_string(batch.dim(2)) + "x" +
                         std::to_string(batch.dim(3)) + " not divisible by 2^" +
                         std::to_string(cfg_.stage_count));
    }
    StageFeatureSet features;
    Tensor x = batch;
    for (int s = 0; s < cfg_.stage_count; ++s) {
        const std::string prefix = "encoder.stage" + std::to_string(s) + ".";
        x = relu(tape, conv2d(tape, x, params_.find(prefix + "down.weight"),
                              params_.find(prefix + "down.bias"), /*stride=*/2, /*padding=*/1));
        for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
            const std::string bp = prefix + "block" + std::to_string(b) + ".";
            Tensor h = relu(tape, conv2d(tape, x, params_.find(bp + "conv1.weight"),
                                         params_.find(bp + "conv1.bias"), 1, 1));
            h = conv2d(tape, h, params_.find(bp + "conv2.weight"), params_.find(bp + "conv2.bias"),
                       1, 1);
            x = relu(tape, add(tape, x, h));
        }
        features.maps.push_back(x);
        features.gap_vectors.push_back(global_average_pool(tape, x));
    }
    return features;
}

}  // namespace matssl
