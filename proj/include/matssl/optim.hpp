// SGD with momentum, Adam, and the cosine learning-rate schedule.
#pragma once

#include <cstdint>
#include <vector>

#include "matssl/params.hpp"

namespace matssl {

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-6;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// Velocity buffers, one per parameter, allocated on first step.
struct SgdState {
    std::vector<std::vector<float>> velocity;
};

// First/second moment buffers plus the shared step counter.
struct AdamState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::int64_t step = 0;
};

// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v
void sgd_step(std::vector<NamedParam>& params, SgdState& state, const SgdConfig& cfg, double lr);

// Bias-corrected Adam with coupled weight decay (decay added to the gradient).
void adam_step(std::vector<NamedParam>& params, AdamState& state, const AdamConfig& cfg, double lr);

// lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*t/T)); returns lr_max when T == 0.
double cosine_lr(std::int64_t t, std::int64_t total, double lr_max, double lr_min);

}  // namespace matssl
