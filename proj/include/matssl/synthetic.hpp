// Synthetic micrograph generator: Voronoi grain textures with optional
// lamellar stripes and Gaussian pixel noise, with exact ground-truth masks.
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "matssl/image.hpp"

namespace matssl {

struct SyntheticSpec {
    std::uint64_t seed = 0;
    int grain_count = 16;
    int phase_count = 2;
    double noise_std = 0.0;
    std::optional<int> stripe_phase;   // phase whose grains carry stripes
    int stripe_period = 6;             // pixels, used when stripe_phase is set
    // Base intensity per phase; empty = evenly spaced over [40, 215].
    std::vector<double> intensities;

    void validate() const;
    std::vector<double> resolved_intensities() const;
};

// Image `index` is fully determined by (spec.seed, index): grain seed points
// are uniform, each grain's phase is index-balanced so every phase owns
// grain_count/phase_count grains, stripes are clipped to their grain, noise is
// per-pixel Gaussian clamped to [0,255]. The mask is the per-pixel phase.
ImageRecord generate_synthetic_image(const SyntheticSpec& spec, int width, int height, int index);
std::vector<ImageRecord> generate_synthetic(const SyntheticSpec& spec, int width, int height,
                                            int count);

}  // namespace matssl
