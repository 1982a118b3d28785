// SSL view generation (SimCLR-style chain) and joint image/mask augmentation
// for the supervised phase.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>

#include "matssl/image.hpp"
#include "matssl/tensor.hpp"

namespace matssl {

struct AugmentConfig {
    std::pair<double, double> crop_scale_range{0.2, 1.0};  // area fractions
    double flip_prob = 0.5;
    double jitter_delta = 0.1;  // brightness/contrast/saturation half-range
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    std::pair<double, double> blur_sigma_range{0.1, 2.0};
    std::array<float, 3> normalize_mean{0.485f, 0.456f, 0.406f};
    std::array<float, 3> normalize_std{0.229f, 0.224f, 0.225f};
    int view_size = 0;  // output side P; 0 = keep the source patch size

    void validate() const;
};

struct ViewPair {
    Tensor view_a;  // [3,P,P], normalized
    Tensor view_b;
    std::string source_id;
};

// Channelwise (x/255 - mean)/std on a [3,H,W] tensor holding 0..255 values.
Tensor normalize(const Tensor& image, const std::array<float, 3>& mean,
                 const std::array<float, 3>& std);
Tensor denormalize(const Tensor& image, const std::array<float, 3>& mean,
                   const std::array<float, 3>& std);

// Converts a 1- or 3-channel uint8 patch to a float [3,H,W] tensor of 0..255
// values (grayscale replicated across channels).
Tensor patch_to_tensor(const ImageRecord& patch);

// One augmented view: random resized crop (area in crop_scale_range, aspect
// uniform in [3/4,4/3], bilinear to PxP), horizontal flip, brightness/contrast/
// saturation jitter in [1-delta,1+delta] applied in a per-call random order,
// grayscale (luma 0.299/0.587/0.114 replicated), Gaussian blur (radius
// ceil(3*sigma), truncated+renormalized), then normalization.
Tensor augment_view(const ImageRecord& patch, const AugmentConfig& cfg, Rng& rng);

// Two independent draws from the same source patch.
ViewPair make_view_pair(const ImageRecord& patch, const AugmentConfig& cfg, Rng& rng);

// Joint flips (horizontal then vertical, each p=0.5, same draw for image and
// mask); normalization applies to the image only.
struct LabeledSample {
    Tensor image;                     // [3,H,W] normalized
    std::vector<std::uint8_t> mask;   // H*W class indices
    int width = 0;
    int height = 0;
};
LabeledSample finetune_augment(const ImageRecord& patch, const AugmentConfig& cfg, Rng& rng,
                               bool apply_flips = true);

}  // namespace matssl
