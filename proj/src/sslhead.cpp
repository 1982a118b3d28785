#include "matssl/sslhead.hpp"

#include <algorithm>
#include <cmath>

namespace matssl {

Tensor gate_scale(Tape& tape, const Tensor& x, const Tensor& gate) {
    if (x.ndim() != 2) throw ShapeError("gate_scale: expected [N,C], got " + shape_str(x.shape()));
    if (gate.ndim() != 1 || (gate.dim(0) != 1 && gate.dim(0) != x.dim(1))) {
        throw ShapeError("gate_scale: gate must be [1] or [" + std::to_string(x.dim(1)) +
                         "], got " + shape_str(gate.shape()));
    }
    const std::int64_t n = x.dim(0), c = x.dim(1);
    const bool scalar_gate = gate.dim(0) == 1;
    Tensor out = Tensor::zeros(x.shape());
    const float* in = x.data().data();
    const float* g = gate.data().data();
    float* o = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            o[i * c + j] = in[i * c + j] * g[scalar_gate ? 0 : j];
        }
    }
    const Tensor ins[] = {x, gate};
    tape.record("gate_scale", ins, out, [x, gate, out, scalar_gate]() mutable {
        const std::int64_t n = x.dim(0), c = x.dim(1);
        const float* go = out.grad().data();
        const float* in = x.data().data();
        const float* g = gate.data().data();
        if (x.requires_grad()) {
            float* gx = x.grad().data();
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < c; ++j) {
                    gx[i * c + j] += go[i * c + j] * g[scalar_gate ? 0 : j];
                }
            }
        }
        if (gate.requires_grad()) {
            float* gg = gate.grad().data();
            if (scalar_gate) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < n * c; ++i) {
                    acc += static_cast<double>(go[i]) * in[i];
                }
                gg[0] += static_cast<float>(acc);
            } else {
                for (std::int64_t j = 0; j < c; ++j) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) {
                        acc += static_cast<double>(go[i * c + j]) * in[i * c + j];
                    }
                    gg[j] += static_cast<float>(acc);
                }
            }
        }
    });
    return out;
}

FusionHead::FusionHead(const EncoderConfig& encoder_cfg, FusionConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.tap_stages.empty()) {
        for (int s = 0; s < encoder_cfg.stage_count; ++s) cfg_.tap_stages.push_back(s);
    }
    for (int s : cfg_.tap_stages) {
        if (s < 0 || s >= encoder_cfg.stage_count) {
            throw ValueError("fusion: tap stage " + std::to_string(s) + " out of range");
        }
        stage_channels_.push_back(encoder_cfg.stage_channels(s));
        fused_width_ += stage_channels_.back();
    }
    if (cfg_.hidden < 1 || cfg_.embed_dim < 1) {
        throw ValueError("fusion: hidden and embed_dim must be >= 1");
    }
    for (std::size_t i = 0; i < cfg_.tap_stages.size(); ++i) {
        const int gate_len = cfg_.gate_variant == GateVariant::kScalar ? 1 : stage_channels_[i];
        params_.add("fusion.gate" + std::to_string(cfg_.tap_stages[static_cast<std::size_t>(i)]),
                    Tensor::full({gate_len}, cfg_.gate_init));
    }
    params_.add("fusion.proj1.weight", Tensor::zeros({fused_width_, cfg_.hidden}));
    params_.add("fusion.proj1.bias", Tensor::zeros({cfg_.hidden}));
    params_.add("fusion.proj2.weight", Tensor::zeros({cfg_.hidden, cfg_.embed_dim}));
    params_.add("fusion.proj2.bias", Tensor::zeros({cfg_.embed_dim}));
}

void FusionHead::init_random(std::uint64_t seed) {
    Rng rng = Rng::stream(seed, /*stream_id=*/0xf00d);
    for (auto& p : params_.entries()) {
        if (p.tensor.ndim() == 2) {
            Tensor init = kaiming_uniform(p.tensor.shape(), p.tensor.dim(0), rng);
            std::copy(init.data().begin(), init.data().end(), p.tensor.data().begin());
        } else if (p.name.find("gate") != std::string::npos) {
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), cfg_.gate_init);
        } else {
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
        }
        p.tensor.zero_grad();
    }
}

Tensor FusionHead::fuse(Tape& tape, const StageFeatureSet& features) const {
    if (features.gap_vectors.size() < cfg_.tap_stages.size()) {
        throw ShapeError("fusion: " + std::to_string(cfg_.tap_stages.size()) + " gates for " +
                         std::to_string(features.gap_vectors.size()) + " stages");
    }
    std::vector<Tensor> gated;
    gated.reserve(cfg_.tap_stages.size());
    for (std::size_t i = 0; i < cfg_.tap_stages.size(); ++i) {
        const int s = cfg_.tap_stages[i];
        const Tensor& gap = features.gap_vectors[static_cast<std::size_t>(s)];
        if (gap.dim(1) != stage_channels_[i]) {
            throw ShapeError("fusion: stage " + std::to_string(s) + " has " +
                             std::to_string(gap.dim(1)) + " channels, expected " +
                             std::to_string(stage_channels_[i]));
        }
        Tensor squashed = sigmoid(tape, gap);
        gated.push_back(gate_scale(tape, squashed, params_.find("fusion.gate" + std::to_string(s))));
    }
    return concat(tape, gated);
}

Tensor FusionHead::project(Tape& tape, const Tensor& fused) const {
    if (fused.ndim() != 2 || fused.dim(1) != fused_width_) {
        throw ShapeError("fusion: projection expects [N," + std::to_string(fused_width_) +
                         "], got " + shape_str(fused.shape()));
    }
    Tensor h = relu(tape, linear(tape, fused, params_.find("fusion.proj1.weight"),
                                 params_.find("fusion.proj1.bias")));
    return linear(tape, h, params_.find("fusion.proj2.weight"), params_.find("fusion.proj2.bias"));
}

std::vector<float> FusionHead::gate_values() const {
    std::vector<float> out;
    for (int s : cfg_.tap_stages) {
        const Tensor g = params_.find("fusion.gate" + std::to_string(s));
        double acc = 0.0;
        for (float v : g.data()) acc += v;
        out.push_back(static_cast<float>(acc / static_cast<double>(g.numel())));
    }
    return out;
}

Tensor ntxent_loss(Tape& tape, const Tensor& z, float tau, float eps,
                   std::vector<double>* per_anchor) {
    if (z.ndim() != 2) throw ShapeError("ntxent: expected [2N,D], got " + shape_str(z.shape()));
    const std::int64_t m = z.dim(0), d = z.dim(1);
    if (m < 4 || m % 2 != 0) {
        throw ValueError("ntxent: need an even batch of at least 4 embeddings, got " +
                         std::to_string(m));
    }
    if (tau <= 0.0f) throw ValueError("ntxent: temperature must be positive");
    const std::int64_t half = m / 2;
    const float* pz = z.data().data();

    // Row norms and normalized rows, double precision throughout.
    std::vector<double> zhat(static_cast<std::size_t>(m * d));
    std::vector<double> rnorm(static_cast<std::size_t>(m));
    std::vector<bool> norm_active(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        double n2 = 0.0;
        for (std::int64_t k = 0; k < d; ++k) {
            const double v = pz[i * d + k];
            n2 += v * v;
        }
        const double norm = std::sqrt(n2);
        const double r = std::max(norm, static_cast<double>(eps));
        rnorm[static_cast<std::size_t>(i)] = r;
        norm_active[static_cast<std::size_t>(i)] = norm > eps;
        for (std::int64_t k = 0; k < d; ++k) {
            zhat[static_cast<std::size_t>(i * d + k)] = pz[i * d + k] / r;
        }
    }

    // Cosine similarity matrix.
    std::vector<double> sim(static_cast<std::size_t>(m * m), 0.0);
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = i + 1; j < m; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < d; ++k) {
                acc += zhat[static_cast<std::size_t>(i * d + k)] *
                       zhat[static_cast<std::size_t>(j * d + k)];
            }
            sim[static_cast<std::size_t>(i * m + j)] = acc;
            sim[static_cast<std::size_t>(j * m + i)] = acc;
        }
    }

    const double inv_tau = 1.0 / static_cast<double>(tau);
    std::vector<double> lse(static_cast<std::size_t>(m));
    std::vector<double> anchors(static_cast<std::size_t>(m));
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        double mx = -1e300;
        for (std::int64_t k = 0; k < m; ++k) {
            if (k == i) continue;
            mx = std::max(mx, sim[static_cast<std::size_t>(i * m + k)] * inv_tau);
        }
        double sum = 0.0;
        for (std::int64_t k = 0; k < m; ++k) {
            if (k == i) continue;
            sum += std::exp(sim[static_cast<std::size_t>(i * m + k)] * inv_tau - mx);
        }
        lse[static_cast<std::size_t>(i)] = mx + std::log(sum);
        const std::int64_t pos = i < half ? i + half : i - half;
        anchors[static_cast<std::size_t>(i)] =
            lse[static_cast<std::size_t>(i)] - sim[static_cast<std::size_t>(i * m + pos)] * inv_tau;
        total += anchors[static_cast<std::size_t>(i)];
    }
    if (per_anchor) *per_anchor = anchors;
    Tensor out = Tensor::scalar64(total / static_cast<double>(m));

    const Tensor ins[] = {z};
    tape.record("ntxent_loss", ins, out,
                [z, out, sim, zhat, rnorm, norm_active, lse, inv_tau, m, d, half]() mutable {
        if (!z.requires_grad()) return;
        const double gscale = static_cast<double>(out.grad()[0]) / static_cast<double>(m);
        // dL/ds_ij for ordered pairs i != j, then symmetrized: H = G + G^T.
        std::vector<double> h(static_cast<std::size_t>(m * m), 0.0);
        for (std::int64_t i = 0; i < m; ++i) {
            const std::int64_t pos = i < half ? i + half : i - half;
            for (std::int64_t j = 0; j < m; ++j) {
                if (j == i) continue;
                const double q = std::exp(sim[static_cast<std::size_t>(i * m + j)] * inv_tau -
                                          lse[static_cast<std::size_t>(i)]);
                const double g = gscale * inv_tau * (q - (j == pos ? 1.0 : 0.0));
                h[static_cast<std::size_t>(i * m + j)] += g;
                h[static_cast<std::size_t>(j * m + i)] += g;
            }
        }
        float* gz = z.grad().data();
        for (std::int64_t i = 0; i < m; ++i) {
            // u_i = sum_j H_ij zhat_j; chain through the row normalization:
            // dL/dz_i = (u_i - (u_i . zhat_i) zhat_i) / r_i while the norm is
            // above the eps guard, u_i / eps below it.
            double udotz = 0.0;
            if (norm_active[static_cast<std::size_t>(i)]) {
                for (std::int64_t j = 0; j < m; ++j) {
                    udotz += h[static_cast<std::size_t>(i * m + j)] *
                             sim[static_cast<std::size_t>(i * m + j)];
                }
            }
            for (std::int64_t k = 0; k < d; ++k) {
                double u = 0.0;
                for (std::int64_t j = 0; j < m; ++j) {
                    u += h[static_cast<std::size_t>(i * m + j)] *
                         zhat[static_cast<std::size_t>(j * d + k)];
                }
                const double proj = udotz * zhat[static_cast<std::size_t>(i * d + k)];
                gz[i * d + k] += static_cast<float>((u - proj) / rnorm[static_cast<std::size_t>(i)]);
            }
        }
    });
    return out;
}

Tensor stack_view_pairs(const std::vector<ViewPair>& pairs) {
    if (pairs.empty()) throw ValueError("stack_view_pairs: empty batch");
    const auto n = static_cast<std::int64_t>(pairs.size());
    const Shape& vs = pairs[0].view_a.shape();
    Tensor out = Tensor::zeros({2 * n, vs[0], vs[1], vs[2]});
    const std::int64_t item = vs[0] * vs[1] * vs[2];
    float* o = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto& p = pairs[static_cast<std::size_t>(i)];
        if (p.view_a.shape() != vs || p.view_b.shape() != vs) {
            throw ShapeError("stack_view_pairs: inconsistent view shapes");
        }
        std::copy(p.view_a.data().begin(), p.view_a.data().end(), o + i * item);
        std::copy(p.view_b.data().begin(), p.view_b.data().end(), o + (n + i) * item);
    }
    return out;
}

Tensor ssl_forward(Tape& tape, const Tensor& views, const Encoder& encoder, const FusionHead& head,
                   float tau, float eps) {
    const StageFeatureSet features = encoder.forward(tape, views);
    const Tensor fused = head.fuse(tape, features);
    const Tensor z = head.project(tape, fused);
    return ntxent_loss(tape, z, tau, eps);
}

}  // namespace matssl
