#include "matssl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

namespace matssl {

const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
        case Split::kUnlabeled: return "unlabeled";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::kTrain;
    if (name == "val") return Split::kVal;
    if (name == "test") return Split::kTest;
    if (name == "unlabeled") return Split::kUnlabeled;
    throw ParseError("unknown split tag '" + name + "'");
}

std::vector<PatchEntry> PatchDataset::with_split(Split s) const {
    std::vector<PatchEntry> out;
    for (const auto& e : entries) {
        if (e.split == s) out.push_back(e);
    }
    return out;
}

std::vector<PatchWindow> patchify(int width, int height, int patch_size, double overlap) {
    if (patch_size <= 0) throw ValueError("patchify: patch_size must be positive");
    if (overlap < 0.0 || overlap >= 1.0) {
        throw ValueError("patchify: overlap must lie in [0,1), got " + std::to_string(overlap));
    }
    if (patch_size > width) {
        throw ValueError("patchify: patch " + std::to_string(patch_size) + " exceeds image width " +
                         std::to_string(width));
    }
    if (patch_size > height) {
        throw ValueError("patchify: patch " + std::to_string(patch_size) + " exceeds image height " +
                         std::to_string(height));
    }
    // The 1e-9 absorbs binary round-off in (1-overlap) so that e.g.
    // patch 100, overlap 0.9 strides 10, not 9.
    const int stride =
        std::max(1, static_cast<int>(std::floor(patch_size * (1.0 - overlap) + 1e-9)));
    const auto axis_origins = [&](int dim) {
        std::vector<int> origins;
        const int last = dim - patch_size;
        for (int o = 0; o <= last; o += stride) origins.push_back(o);
        if (origins.back() != last) origins.push_back(last);  // clamped final window
        return origins;
    };
    const std::vector<int> xs = axis_origins(width);
    const std::vector<int> ys = axis_origins(height);
    std::vector<PatchWindow> windows;
    windows.reserve(xs.size() * ys.size());
    for (int y : ys) {
        for (int x : xs) windows.push_back({x, y});
    }
    return windows;
}

std::vector<PatchWindow> patchify(const ImageRecord& image, int patch_size, double overlap) {
    return patchify(image.width, image.height, patch_size, overlap);
}

Split SplitAssignment::of(const std::string& image_id) const {
    if (std::find(train.begin(), train.end(), image_id) != train.end()) return Split::kTrain;
    if (std::find(val.begin(), val.end(), image_id) != val.end()) return Split::kVal;
    if (std::find(test.begin(), test.end(), image_id) != test.end()) return Split::kTest;
    throw ValueError("image id '" + image_id + "' not covered by the split assignment");
}

SplitAssignment split_dataset(const std::vector<std::string>& image_ids, double train_ratio,
                              std::uint64_t seed, double val_ratio) {
    if (image_ids.empty()) throw ValueError("split_dataset: empty image list");
    if (train_ratio <= 0.0 || train_ratio >= 1.0) {
        throw ValueError("split_dataset: train ratio must lie in (0,1), got " +
                         std::to_string(train_ratio));
    }
    if (val_ratio < 0.0 || train_ratio + val_ratio >= 1.0) {
        throw ValueError("split_dataset: train+val ratios must leave room for test");
    }
    // Sorting first makes the assignment a pure function of the id set, not of
    // the caller's ordering.
    std::vector<std::string> ids(image_ids);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    Rng rng = Rng::stream(seed, /*stream_id=*/0x5eedc0de);
    rng.shuffle(ids);
    const auto n = static_cast<std::int64_t>(ids.size());
    const auto n_train = static_cast<std::int64_t>(std::llround(train_ratio * static_cast<double>(n)));
    const auto n_val = static_cast<std::int64_t>(std::llround(val_ratio * static_cast<double>(n)));
    SplitAssignment out;
    for (std::int64_t i = 0; i < n; ++i) {
        if (i < n_train) {
            out.train.push_back(ids[static_cast<std::size_t>(i)]);
        } else if (i < n_train + n_val) {
            out.val.push_back(ids[static_cast<std::size_t>(i)]);
        } else {
            out.test.push_back(ids[static_cast<std::size_t>(i)]);
        }
    }
    return out;
}

PatchDataset build_patch_dataset(const std::vector<SourceImage>& images, int patch_size,
                                 double overlap, double train_ratio, std::uint64_t seed,
                                 double val_ratio, bool unlabeled) {
    if (images.empty()) throw ValueError("build_patch_dataset: empty image list");
    PatchDataset ds;
    ds.patch_size = patch_size;
    ds.overlap = overlap;
    SplitAssignment assignment;
    if (!unlabeled) {
        std::vector<std::string> ids;
        ids.reserve(images.size());
        for (const auto& img : images) ids.push_back(img.id);
        assignment = split_dataset(ids, train_ratio, seed, val_ratio);
    }
    std::vector<SourceImage> ordered(images);
    std::sort(ordered.begin(), ordered.end(),
              [](const SourceImage& a, const SourceImage& b) { return a.id < b.id; });
    for (const auto& img : ordered) {
        const Split split = unlabeled ? Split::kUnlabeled : assignment.of(img.id);
        for (const auto& win : patchify(img.width, img.height, patch_size, overlap)) {
            ds.entries.push_back({img.id, win.x, win.y, patch_size, split});
        }
    }
    return ds;
}

void save_manifest(const std::string& path, const PatchDataset& dataset) {
    std::ofstream f(path, std::ios::binary);  // binary keeps LF endings everywhere
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    for (const auto& e : dataset.entries) {
        f << e.image_id << '\t' << e.x << '\t' << e.y << '\t' << e.patch_size << '\t'
          << split_name(e.split) << '\n';
    }
    if (!f) throw ParseError("write failed on '" + path + "'");
}

PatchDataset load_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    PatchDataset ds;
    std::string line;
    int lineno = 0;
    std::set<std::tuple<std::string, int, int>> seen;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        PatchEntry e;
        std::string split_tag;
        std::string xs, ys, ps;
        if (!std::getline(ss, e.image_id, '\t') || !std::getline(ss, xs, '\t') ||
            !std::getline(ss, ys, '\t') || !std::getline(ss, ps, '\t') ||
            !std::getline(ss, split_tag)) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected 5 tab-separated fields");
        }
        try {
            e.x = std::stoi(xs);
            e.y = std::stoi(ys);
            e.patch_size = std::stoi(ps);
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": non-numeric window field");
        }
        e.split = split_from_name(split_tag);
        if (!seen.insert({e.image_id, e.x, e.y}).second) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": duplicate window (" +
                             e.image_id + "," + xs + "," + ys + ")");
        }
        if (ds.patch_size == 0) ds.patch_size = e.patch_size;
        ds.entries.push_back(std::move(e));
    }
    return ds;
}

ImageRecord extract_patch(const ImageRecord& image, int x, int y, int size) {
    if (x < 0 || y < 0 || x + size > image.width || y + size > image.height) {
        throw ValueError("extract_patch: window (" + std::to_string(x) + "," + std::to_string(y) +
                         ")+" + std::to_string(size) + " leaves image '" + image.id + "' (" +
                         std::to_string(image.width) + "x" + std::to_string(image.height) + ")");
    }
    ImageRecord patch;
    patch.id = image.id + "@" + std::to_string(x) + "," + std::to_string(y);
    patch.width = size;
    patch.height = size;
    patch.channels = image.channels;
    patch.num_classes = image.num_classes;
    patch.pixels.resize(static_cast<std::size_t>(size) * size * image.channels);
    for (int row = 0; row < size; ++row) {
        const auto src = static_cast<std::size_t>(((y + row) * image.width + x) * image.channels);
        const auto dst = static_cast<std::size_t>(row * size * image.channels);
        std::copy(image.pixels.begin() + static_cast<std::ptrdiff_t>(src),
                  image.pixels.begin() + static_cast<std::ptrdiff_t>(src + static_cast<std::size_t>(size) * image.channels),
                  patch.pixels.begin() + static_cast<std::ptrdiff_t>(dst));
    }
    if (image.has_mask()) {
        patch.mask.resize(static_cast<std::size_t>(size) * size);
        for (int row = 0; row < size; ++row) {
            const auto src = static_cast<std::size_t>((y + row) * image.width + x);
            std::copy(image.mask.begin() + static_cast<std::ptrdiff_t>(src),
                      image.mask.begin() + static_cast<std::ptrdiff_t>(src + size),
                      patch.mask.begin() + static_cast<std::ptrdiff_t>(row * size));
        }
    }
    return patch;
}

}  // namespace matssl
