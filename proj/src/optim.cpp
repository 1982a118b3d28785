#include "matssl/optim.hpp"

#include <cmath>

namespace matssl {

namespace {

void ensure_buffers(std::vector<std::vector<float>>& bufs, const std::vector<NamedParam>& params) {
    if (bufs.size() == params.size()) return;
    if (!bufs.empty()) throw ValueError("optimizer state does not match the parameter list");
    bufs.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        bufs[i].assign(static_cast<std::size_t>(params[i].tensor.numel()), 0.0f);
    }
}

}  // namespace

void sgd_step(std::vector<NamedParam>& params, SgdState& state, const SgdConfig& cfg, double lr) {
    ensure_buffers(state.velocity, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].tensor;
        if (!t.requires_grad()) continue;
        auto data = t.data();
        auto grad = t.grad();
        auto& vel = state.velocity[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = static_cast<double>(grad[j]) + cfg.weight_decay * data[j];
            const double v = cfg.momentum * vel[j] + g;
            vel[j] = static_cast<float>(v);
            data[j] = static_cast<float>(data[j] - lr * v);
        }
    }
}

void adam_step(std::vector<NamedParam>& params, AdamState& state, const AdamConfig& cfg, double lr) {
    ensure_buffers(state.m, params);
    ensure_buffers(state.v, params);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].tensor;
        if (!t.requires_grad()) continue;
        auto data = t.data();
        auto grad = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = static_cast<double>(grad[j]) + cfg.weight_decay * data[j];
            const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            data[j] = static_cast<float>(data[j] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

double cosine_lr(std::int64_t t, std::int64_t total, double lr_max, double lr_min) {
    if (total == 0) return lr_max;
    if (t < 0 || t > total) throw ValueError("cosine_lr: t must lie in [0, total]");
    if (t == 0) return lr_max;      // endpoints are exact, not within rounding
    if (t == total) return lr_min;
    return lr_min + 0.5 * (lr_max - lr_min) *
                        (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                        static_cast<double>(total)));
}

}  // namespace matssl
