#include "matssl/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace matssl {

void SyntheticSpec::validate() const {
    if (phase_count < 2) throw ValueError("synthetic: phase_count must be >= 2");
    if (grain_count < phase_count) {
        throw ValueError("synthetic: grain_count " + std::to_string(grain_count) +
                         " must be >= phase_count " + std::to_string(phase_count));
    }
    if (noise_std < 0.0) throw ValueError("synthetic: noise_std must be >= 0");
    if (stripe_phase && (*stripe_phase < 0 || *stripe_phase >= phase_count)) {
        throw ValueError("synthetic: stripe_phase out of range");
    }
    if (stripe_phase && stripe_period < 2) throw ValueError("synthetic: stripe_period must be >= 2");
    if (!intensities.empty() && static_cast<int>(intensities.size()) != phase_count) {
        throw ValueError("synthetic: intensities must list one value per phase");
    }
}

std::vector<double> SyntheticSpec::resolved_intensities() const {
    if (!intensities.empty()) return intensities;
    std::vector<double> out(static_cast<std::size_t>(phase_count));
    for (int p = 0; p < phase_count; ++p) {
        out[static_cast<std::size_t>(p)] = 40.0 + 175.0 * p / (phase_count - 1);
    }
    return out;
}

namespace {

struct Grain {
    double x, y;
    int phase;
    double stripe_angle;  // per-grain lamellae orientation
    double stripe_shift;
};

inline std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

ImageRecord generate_synthetic_image(const SyntheticSpec& spec, int width, int height, int index) {
    spec.validate();
    if (width <= 0 || height <= 0) throw ValueError("synthetic: non-positive image size");

    Rng rng = Rng::stream(spec.seed, /*stream_id=*/0x6e61, static_cast<std::uint64_t>(index));

    std::vector<Grain> grains(static_cast<std::size_t>(spec.grain_count));
    // index-balanced phases: every phase owns grain_count/phase_count grains
    std::vector<int> phase_of(grains.size());
    for (std::size_t g = 0; g < grains.size(); ++g) {
        phase_of[g] = static_cast<int>(g) % spec.phase_count;
    }
    rng.shuffle(phase_of);
    for (std::size_t g = 0; g < grains.size(); ++g) {
        grains[g].x = rng.uniform(0.0, static_cast<double>(width));
        grains[g].y = rng.uniform(0.0, static_cast<double>(height));
        grains[g].phase = phase_of[g];
        grains[g].stripe_angle = rng.uniform(0.0, 3.14159265358979323846);
        grains[g].stripe_shift = rng.uniform(0.0, static_cast<double>(spec.stripe_period));
    }

    const std::vector<double> base = spec.resolved_intensities();
    // Stripe alternate sits between phases so it never collides with another
    // phase's base value.
    const auto stripe_alt = [&](int phase) {
        const double b = base[static_cast<std::size_t>(phase)];
        return b >= 128.0 ? b - 27.0 : b + 27.0;
    };

    ImageRecord img;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%04d", index);
    img.id = buf;
    img.width = width;
    img.height = height;
    img.channels = 1;
    img.pixels.resize(static_cast<std::size_t>(width) * height);
    img.mask.resize(img.pixels.size());
    img.num_classes = spec.phase_count;

    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            // nearest grain seed point = Voronoi cell
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t g = 0; g < grains.size(); ++g) {
                const double dx = x + 0.5 - grains[g].x;
                const double dy = y + 0.5 - grains[g].y;
                const double d = dx * dx + dy * dy;
                if (d < best_d) {
                    best_d = d;
                    best = g;
                }
            }
            const Grain& grain = grains[best];
            double v = base[static_cast<std::size_t>(grain.phase)];
            if (spec.stripe_phase && grain.phase == *spec.stripe_phase) {
                const double proj = x * std::cos(grain.stripe_angle) +
                                    y * std::sin(grain.stripe_angle) + grain.stripe_shift;
                const auto band = static_cast<std::int64_t>(std::floor(proj / spec.stripe_period));
                if (band % 2 != 0) v = stripe_alt(grain.phase);
            }
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            img.mask[i] = static_cast<std::uint8_t>(grain.phase);
            img.pixels[i] = clamp_u8(v);
        }
    }
    if (spec.noise_std > 0.0) {
        // noise drawn after layout so (seed,index) fixes geometry first
        for (auto& p : img.pixels) {
            p = clamp_u8(static_cast<double>(p) + rng.normal() * spec.noise_std);
        }
    }
    return img;
}

std::vector<ImageRecord> generate_synthetic(const SyntheticSpec& spec, int width, int height,
                                            int count) {
    if (count < 1) throw ValueError("synthetic: count must be >= 1");
    std::vector<ImageRecord> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_image(spec, width, height, i));
    return out;
}

}  // namespace matssl
