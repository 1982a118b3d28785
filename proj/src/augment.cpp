#include "matssl/augment.hpp"

#include <algorithm>
#include <cmath>

namespace matssl {

void AugmentConfig::validate() const {
    const auto check_prob = [](double p, const char* name) {
        if (p < 0.0 || p > 1.0) {
            throw ValueError(std::string("augment: ") + name + " must lie in [0,1]");
        }
    };
    check_prob(flip_prob, "flip_prob");
    check_prob(grayscale_prob, "grayscale_prob");
    check_prob(blur_prob, "blur_prob");
    if (!(crop_scale_range.first > 0.0 && crop_scale_range.first <= crop_scale_range.second &&
          crop_scale_range.second <= 1.0)) {
        throw ValueError("augment: crop_scale_range must satisfy 0 < min <= max <= 1");
    }
    if (jitter_delta < 0.0) throw ValueError("augment: jitter_delta must be >= 0");
    if (blur_sigma_range.first <= 0.0 || blur_sigma_range.first > blur_sigma_range.second) {
        throw ValueError("augment: blur_sigma_range must satisfy 0 < min <= max");
    }
    for (float s : normalize_std) {
        if (s == 0.0f) throw ValueError("augment: normalize_std components must be nonzero");
    }
    if (view_size < 0) throw ValueError("augment: view_size must be >= 0");
}

Tensor normalize(const Tensor& image, const std::array<float, 3>& mean,
                 const std::array<float, 3>& std_dev) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw ShapeError("normalize: expected [3,H,W], got " + shape_str(image.shape()));
    }
    for (float s : std_dev) {
        if (s == 0.0f) throw ValueError("normalize: zero std component");
    }
    Tensor out = Tensor::zeros(image.shape());
    const std::int64_t plane = image.dim(1) * image.dim(2);
    const float* in = image.data().data();
    float* o = out.data().data();
    for (int c = 0; c < 3; ++c) {
        const float m = mean[static_cast<std::size_t>(c)];
        const float inv = 1.0f / std_dev[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < plane; ++i) {
            o[c * plane + i] = (in[c * plane + i] / 255.0f - m) * inv;
        }
    }
    return out;
}

Tensor denormalize(const Tensor& image, const std::array<float, 3>& mean,
                   const std::array<float, 3>& std_dev) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw ShapeError("denormalize: expected [3,H,W], got " + shape_str(image.shape()));
    }
    Tensor out = Tensor::zeros(image.shape());
    const std::int64_t plane = image.dim(1) * image.dim(2);
    const float* in = image.data().data();
    float* o = out.data().data();
    for (int c = 0; c < 3; ++c) {
        const float m = mean[static_cast<std::size_t>(c)];
        const float s = std_dev[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < plane; ++i) {
            o[c * plane + i] = (in[c * plane + i] * s + m) * 255.0f;
        }
    }
    return out;
}

Tensor patch_to_tensor(const ImageRecord& patch) {
    patch.validate();
    Tensor out = Tensor::zeros({3, patch.height, patch.width});
    float* o = out.data().data();
    const std::int64_t plane = static_cast<std::int64_t>(patch.width) * patch.height;
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const int src_c = patch.channels == 3 ? c : 0;
            o[c * plane + i] =
                static_cast<float>(patch.pixels[static_cast<std::size_t>(i * patch.channels + src_c)]);
        }
    }
    return out;
}

namespace {

struct FloatImage {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // [3, H, W] planes, 0..255 scale

    float& at(int c, int y, int x) {
        return data[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    float at(int c, int y, int x) const {
        return data[static_cast<std::size_t>((c * height + y) * width + x)];
    }
};

FloatImage to_float(const ImageRecord& patch) {
    FloatImage img;
    img.width = patch.width;
    img.height = patch.height;
    img.data.resize(static_cast<std::size_t>(3) * patch.width * patch.height);
    const std::int64_t plane = static_cast<std::int64_t>(patch.width) * patch.height;
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const int src_c = patch.channels == 3 ? c : 0;
            img.data[static_cast<std::size_t>(c * plane + i)] =
                static_cast<float>(patch.pixels[static_cast<std::size_t>(i * patch.channels + src_c)]);
        }
    }
    return img;
}

struct CropWindow {
    int x = 0, y = 0, w = 0, h = 0;
};

CropWindow draw_crop(int width, int height, const AugmentConfig& cfg, Rng& rng) {
    const double area = static_cast<double>(width) * height;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(cfg.crop_scale_range.first, cfg.crop_scale_range.second);
        const double aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0);
        const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
        const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
        if (w > 0 && h > 0 && w <= width && h <= height) {
            const int x = static_cast<int>(rng.uniform_int(width - w + 1));
            const int y = static_cast<int>(rng.uniform_int(height - h + 1));
            return {x, y, w, h};
        }
    }
    // fallback: centered window with the aspect clamped into range
    const double in_ratio = static_cast<double>(width) / height;
    int w = width, h = height;
    if (in_ratio < 3.0 / 4.0) {
        h = static_cast<int>(std::lround(width / (3.0 / 4.0)));
    } else if (in_ratio > 4.0 / 3.0) {
        w = static_cast<int>(std::lround(height * (4.0 / 3.0)));
    }
    return {(width - w) / 2, (height - h) / 2, w, h};
}

// src = (dst+0.5)*scale - 0.5 with edge clamping; exact identity at scale 1.
FloatImage resize_bilinear(const FloatImage& src, const CropWindow& win, int out_size) {
    FloatImage out;
    out.width = out_size;
    out.height = out_size;
    out.data.resize(static_cast<std::size_t>(3) * out_size * out_size);
    const double sx = static_cast<double>(win.w) / out_size;
    const double sy = static_cast<double>(win.h) / out_size;
    for (int y = 0; y < out_size; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(win.h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, win.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_size; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(win.w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, win.w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v00 = src.at(c, win.y + y0, win.x + x0);
                const double v01 = src.at(c, win.y + y0, win.x + x1);
                const double v10 = src.at(c, win.y + y1, win.x + x0);
                const double v11 = src.at(c, win.y + y1, win.x + x1);
                const double top = v00 + (v01 - v00) * wx;
                const double bot = v10 + (v11 - v10) * wx;
                out.at(c, y, x) = static_cast<float>(top + (bot - top) * wy);
            }
        }
    }
    return out;
}

void hflip(FloatImage& img) {
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width / 2; ++x) {
                std::swap(img.at(c, y, x), img.at(c, y, img.width - 1 - x));
            }
        }
    }
}

inline float luma(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

void apply_brightness(FloatImage& img, float f) {
    if (f == 1.0f) return;
    for (auto& v : img.data) v = std::clamp(v * f, 0.0f, 255.0f);
}

void apply_contrast(FloatImage& img, float f) {
    if (f == 1.0f) return;
    const std::int64_t plane = static_cast<std::int64_t>(img.width) * img.height;
    double mean = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) {
        mean += luma(img.data[static_cast<std::size_t>(i)],
                     img.data[static_cast<std::size_t>(plane + i)],
                     img.data[static_cast<std::size_t>(2 * plane + i)]);
    }
    const float m = static_cast<float>(mean / static_cast<double>(plane));
    for (auto& v : img.data) v = std::clamp(m + (v - m) * f, 0.0f, 255.0f);
}

void apply_saturation(FloatImage& img, float f) {
    if (f == 1.0f) return;
    const std::int64_t plane = static_cast<std::int64_t>(img.width) * img.height;
    for (std::int64_t i = 0; i < plane; ++i) {
        const float l = luma(img.data[static_cast<std::size_t>(i)],
                             img.data[static_cast<std::size_t>(plane + i)],
                             img.data[static_cast<std::size_t>(2 * plane + i)]);
        for (int c = 0; c < 3; ++c) {
            float& v = img.data[static_cast<std::size_t>(c * plane + i)];
            v = std::clamp(l + (v - l) * f, 0.0f, 255.0f);
        }
    }
}

void apply_grayscale(FloatImage& img) {
    const std::int64_t plane = static_cast<std::int64_t>(img.width) * img.height;
    for (std::int64_t i = 0; i < plane; ++i) {
        const float l = luma(img.data[static_cast<std::size_t>(i)],
                             img.data[static_cast<std::size_t>(plane + i)],
                             img.data[static_cast<std::size_t>(2 * plane + i)]);
        for (int c = 0; c < 3; ++c) img.data[static_cast<std::size_t>(c * plane + i)] = l;
    }
}

void apply_blur(FloatImage& img, double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    if (radius < 1) return;
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    FloatImage tmp = img;
    const auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    // horizontal pass (replicated edges), then vertical
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    acc += kernel[static_cast<std::size_t>(k + radius)] *
                           img.at(c, y, clampi(x + k, 0, img.width - 1));
                }
                tmp.at(c, y, x) = static_cast<float>(acc);
            }
        }
    }
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    acc += kernel[static_cast<std::size_t>(k + radius)] *
                           tmp.at(c, clampi(y + k, 0, img.height - 1), x);
                }
                img.at(c, y, x) = static_cast<float>(acc);
            }
        }
    }
}

Tensor to_normalized_tensor(const FloatImage& img, const AugmentConfig& cfg) {
    Tensor raw = Tensor::from({3, img.height, img.width}, img.data);
    return normalize(raw, cfg.normalize_mean, cfg.normalize_std);
}

}  // namespace

Tensor augment_view(const ImageRecord& patch, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    if (patch.width < 8 || patch.height < 8) {
        throw ValueError("augment: patch must be at least 8x8, got " + std::to_string(patch.width) +
                         "x" + std::to_string(patch.height));
    }
    const int out_size = cfg.view_size > 0 ? cfg.view_size : patch.width;

    FloatImage img = to_float(patch);
    const CropWindow win = draw_crop(img.width, img.height, cfg, rng);
    img = resize_bilinear(img, win, out_size);

    if (rng.bernoulli(cfg.flip_prob)) hflip(img);

    int order[3] = {0, 1, 2};  // brightness, contrast, saturation
    for (int i = 2; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
    for (int idx : order) {
        const float f = static_cast<float>(rng.uniform(1.0 - cfg.jitter_delta, 1.0 + cfg.jitter_delta));
        if (idx == 0) {
            apply_brightness(img, f);
        } else if (idx == 1) {
            apply_contrast(img, f);
        } else {
            apply_saturation(img, f);
        }
    }

    if (rng.bernoulli(cfg.grayscale_prob)) apply_grayscale(img);

    const bool do_blur = rng.bernoulli(cfg.blur_prob);
    const double sigma = rng.uniform(cfg.blur_sigma_range.first, cfg.blur_sigma_range.second);
    if (do_blur) apply_blur(img, sigma);

    return to_normalized_tensor(img, cfg);
}

ViewPair make_view_pair(const ImageRecord& patch, const AugmentConfig& cfg, Rng& rng) {
    ViewPair pair;
    pair.view_a = augment_view(patch, cfg, rng);
    pair.view_b = augment_view(patch, cfg, rng);
    pair.source_id = patch.id;
    return pair;
}

LabeledSample finetune_augment(const ImageRecord& patch, const AugmentConfig& cfg, Rng& rng,
                               bool apply_flips) {
    if (!patch.has_mask()) throw ValueError("finetune_augment: patch '" + patch.id + "' has no mask");
    if (patch.mask.size() != static_cast<std::size_t>(patch.width) * patch.height) {
        throw ShapeError("finetune_augment: image and mask are misaligned for '" + patch.id + "'");
    }
    FloatImage img = to_float(patch);
    std::vector<std::uint8_t> mask = patch.mask;
    const int w = patch.width, h = patch.height;

    if (apply_flips) {
        if (rng.bernoulli(0.5)) {  // horizontal: column j <-> W-1-j on both
            hflip(img);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w / 2; ++x) {
                    std::swap(mask[static_cast<std::size_t>(y * w + x)],
                              mask[static_cast<std::size_t>(y * w + (w - 1 - x))]);
                }
            }
        }
        if (rng.bernoulli(0.5)) {  // vertical
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < h / 2; ++y) {
                    for (int x = 0; x < w; ++x) {
                        std::swap(img.at(c, y, x), img.at(c, h - 1 - y, x));
                    }
                }
            }
            for (int y = 0; y < h / 2; ++y) {
                for (int x = 0; x < w; ++x) {
                    std::swap(mask[static_cast<std::size_t>(y * w + x)],
                              mask[static_cast<std::size_t>((h - 1 - y) * w + x)]);
                }
            }
        }
    }

    LabeledSample sample;
    sample.image = to_normalized_tensor(img, cfg);
    sample.mask = std::move(mask);
    sample.width = w;
    sample.height = h;
    return sample;
}

}  // namespace matssl
