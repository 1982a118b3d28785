// Sliding-window patch extraction, per-image split assignment, and the
// tab-separated patch manifest.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "matssl/image.hpp"

namespace matssl {

enum class Split { kTrain, kVal, kTest, kUnlabeled };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct PatchWindow {
    int x = 0;
    int y = 0;
};

struct PatchEntry {
    std::string image_id;
    int x = 0;
    int y = 0;
    int patch_size = 0;
    Split split = Split::kUnlabeled;
};

struct PatchDataset {
    std::vector<PatchEntry> entries;
    int patch_size = 0;
    double overlap = 0.0;

    std::vector<PatchEntry> with_split(Split s) const;
};

// Window origins along each axis: 0, stride, 2*stride, ... with
// stride = max(1, floor(patch_size*(1-overlap))), plus one final origin clamped
// to dim-patch_size when the lattice stops short (deduplicated). Row-major
// (y outer, x inner) ordering.
std::vector<PatchWindow> patchify(int width, int height, int patch_size, double overlap);
std::vector<PatchWindow> patchify(const ImageRecord& image, int patch_size, double overlap);

// Per-image split assignment: a pure function of (seed, sorted image ids).
// train count = round(train_ratio*n); val count = round(val_ratio*n) taken
// from the remainder. Patches inherit their source image's split, so
// overlapping windows can never straddle splits.
struct SplitAssignment {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
    Split of(const std::string& image_id) const;
};
SplitAssignment split_dataset(const std::vector<std::string>& image_ids, double train_ratio,
                              std::uint64_t seed, double val_ratio = 0.0);

// Builds the full dataset: every image patchified, entries tagged by the
// per-image assignment (or all kUnlabeled when unlabeled=true).
struct SourceImage {
    std::string id;
    int width = 0;
    int height = 0;
};
PatchDataset build_patch_dataset(const std::vector<SourceImage>& images, int patch_size,
                                 double overlap, double train_ratio, std::uint64_t seed,
                                 double val_ratio = 0.0, bool unlabeled = false);

// Manifest: one line per entry, "<image_id>\t<x>\t<y>\t<patch_size>\t<split>",
// UTF-8, LF endings.
void save_manifest(const std::string& path, const PatchDataset& dataset);
PatchDataset load_manifest(const std::string& path);

// Copies the window (with its mask slice when present) out of a source image.
ImageRecord extract_patch(const ImageRecord& image, int x, int y, int size);

}  // namespace matssl
