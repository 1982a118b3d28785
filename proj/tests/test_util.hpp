// Shared test helpers: random tensors, a weighting op for gradient probes,
// byte hashing, and independent loss oracles.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "matssl/tensor.hpp"

namespace testutil {

// Uniform in [lo,hi] with a dead zone around 0 so kinked ops (ReLU) are never
// probed at their kink by finite differences.
inline matssl::Tensor rand_tensor(matssl::Shape shape, matssl::Rng& rng, double lo = -1.0,
                                  double hi = 1.0, double dead_zone = 0.0) {
    matssl::Tensor t = matssl::Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) {
        double x = rng.uniform(lo, hi);
        if (dead_zone > 0.0 && std::abs(x) < dead_zone) {
            x = x >= 0.0 ? x + dead_zone : x - dead_zone;
        }
        v = static_cast<float>(x);
    }
    return t;
}

// Scalar loss sum_i w_i * x_i with fixed weights; a non-uniform upstream
// gradient so Jacobian structure cannot cancel out (a plain sum() would feed
// softmax an all-ones gradient, which it annihilates).
inline matssl::Tensor weighted_sum(matssl::Tape& tape, const matssl::Tensor& x,
                                   const std::vector<float>& w) {
    double acc = 0.0;
    auto data = x.data();
    for (std::size_t i = 0; i < data.size(); ++i) acc += static_cast<double>(data[i]) * w[i];
    matssl::Tensor out = matssl::Tensor::scalar64(acc);
    const matssl::Tensor ins[] = {x};
    tape.record("test_weighted_sum", ins, out, [x, out, w]() mutable {
        if (!x.requires_grad()) return;
        auto gx = x.grad();
        const float g = out.grad()[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
    });
    return out;
}

inline std::vector<float> rand_weights(std::size_t n, matssl::Rng& rng) {
    std::vector<float> w(n);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return w;
}

inline std::uint64_t hash_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_tensor(const matssl::Tensor& t) {
    return hash_bytes(t.data().data(), t.data().size() * sizeof(float));
}

// Naive double-loop NT-Xent: cosine similarities and the softmax denominator
// evaluated term by term in double, no log-sum-exp tricks. Rows k and k+N are
// positives.
inline double ntxent_bruteforce(const std::vector<std::vector<double>>& z, double tau) {
    const std::size_t m = z.size();
    const std::size_t half = m / 2;
    const auto cos_sim = [&](std::size_t i, std::size_t j) {
        double dot = 0.0, ni = 0.0, nj = 0.0;
        for (std::size_t k = 0; k < z[i].size(); ++k) {
            dot += z[i][k] * z[j][k];
            ni += z[i][k] * z[i][k];
            nj += z[j][k] * z[j][k];
        }
        const double ri = std::max(std::sqrt(ni), 1e-8);
        const double rj = std::max(std::sqrt(nj), 1e-8);
        return dot / (ri * rj);
    };
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t pos = i < half ? i + half : i - half;
        double denom = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            if (k == i) continue;
            denom += std::exp(cos_sim(i, k) / tau);
        }
        total += -std::log(std::exp(cos_sim(i, pos) / tau) / denom);
    }
    return total / static_cast<double>(m);
}

// Direct soft-Dice evaluation from probabilities and integer labels, mirroring
// the definition rather than the implementation.
inline double dice_bruteforce(const std::vector<std::vector<double>>& probs_per_class,
                              const std::vector<int>& labels, double eps = 1e-6) {
    const std::size_t c = probs_per_class.size();
    double total = 0.0;
    int present = 0;
    for (std::size_t ci = 0; ci < c; ++ci) {
        double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const double y = labels[i] == static_cast<int>(ci) ? 1.0 : 0.0;
            inter += y * probs_per_class[ci][i];
            sum_p += probs_per_class[ci][i];
            sum_y += y;
        }
        if (sum_y == 0.0) continue;
        total += 2.0 * inter / (sum_y + sum_p + eps);
        ++present;
    }
    return 1.0 - total / present;
}

}  // namespace testutil
