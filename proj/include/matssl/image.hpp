// 8-bit images with optional class-index masks, plus binary PGM/PPM codecs.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "matssl/common.hpp"

namespace matssl {

struct ImageRecord {
    std::string id;
    int width = 0;
    int height = 0;
    int channels = 1;  // 1 (grayscale) or 3 (rgb)
    std::vector<std::uint8_t> pixels;          // row-major, interleaved channels
    std::vector<std::uint8_t> mask;            // per-pixel class index, empty if unlabeled
    std::optional<int> num_classes;

    bool has_mask() const { return !mask.empty(); }
    std::uint8_t at(int x, int y, int c = 0) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    void validate() const;
};

// Binary netpbm: "P5" grayscale / "P6" rgb, maxval 255 only. Parse failures
// throw ParseError with the byte offset where the format broke.
ImageRecord load_image(const std::string& path);
void save_image(const std::string& path, const ImageRecord& image);

// Masks travel as P5 files whose pixel value is the class index.
std::vector<std::uint8_t> load_mask(const std::string& path, int expect_width, int expect_height);
void save_mask(const std::string& path, const std::vector<std::uint8_t>& mask, int width, int height);

}  // namespace matssl
