// Gated feature fusion over encoder stage taps, projection MLP, and the
// normalized-temperature cross-entropy contrastive loss.
#pragma once

#include <cstdint>
#include <vector>

#include "matssl/augment.hpp"
#include "matssl/encoder.hpp"
#include "matssl/params.hpp"

namespace matssl {

enum class GateVariant { kScalar, kPerChannel };

struct FusionConfig {
    std::vector<int> tap_stages;  // empty = every encoder stage
    GateVariant gate_variant = GateVariant::kScalar;
    float gate_init = 1.0f;
    int hidden = 256;
    int embed_dim = 128;
};

// out[n,c] = x[n,c] * gate (scalar gate broadcast over channels, vector gate
// elementwise); differentiable in both x and gate.
Tensor gate_scale(Tape& tape, const Tensor& x, const Tensor& gate);

class FusionHead {
public:
    FusionHead(const EncoderConfig& encoder_cfg, FusionConfig cfg);

    void init_random(std::uint64_t seed);

    const FusionConfig& config() const { return cfg_; }
    const std::vector<int>& tap_stages() const { return cfg_.tap_stages; }
    int fused_width() const { return fused_width_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // sigmoid(GAP vector of each tapped stage) scaled by that stage's gate,
    // concatenated in stage order -> [N, sum C_i].
    Tensor fuse(Tape& tape, const StageFeatureSet& features) const;

    // linear -> ReLU -> linear; no output normalization (the loss normalizes).
    Tensor project(Tape& tape, const Tensor& fused) const;

    // Scalar summary per gate (mean of the vector variant), for metrics rows.
    std::vector<float> gate_values() const;

private:
    FusionConfig cfg_;
    std::vector<int> stage_channels_;
    int fused_width_ = 0;
    ParamStore params_;
};

// Eq-style NT-Xent over embeddings z[2N,D] with positives (k, k+N): per anchor
// -log exp(sim(z_i,z_p)/tau) / sum_{k != i} exp(sim(z_i,z_k)/tau), averaged
// over all 2N anchors, log-sum-exp stabilized, float64 accumulation.
// per_anchor, when given, receives the 2N per-anchor losses in double.
Tensor ntxent_loss(Tape& tape, const Tensor& z, float tau, float eps = kNormEps,
                   std::vector<double>* per_anchor = nullptr);

// Stacks pair views as rows [0..N) = view_a, [N..2N) = view_b.
Tensor stack_view_pairs(const std::vector<ViewPair>& pairs);

// encode 2N views -> gated fuse -> project -> NT-Xent.
Tensor ssl_forward(Tape& tape, const Tensor& views, const Encoder& encoder,
                   const FusionHead& head, float tau, float eps = kNormEps);

}  // namespace matssl
