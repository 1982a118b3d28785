#include "matssl/image.hpp"

#include <fstream>

namespace matssl {

void ImageRecord::validate() const {
    if (width <= 0 || height <= 0) {
        throw ValueError("image '" + id + "': non-positive dimensions");
    }
    if (channels != 1 && channels != 3) {
        throw ValueError("image '" + id + "': channels must be 1 or 3, got " + std::to_string(channels));
    }
    const std::size_t expect = static_cast<std::size_t>(width) * height * channels;
    if (pixels.size() != expect) {
        throw ValueError("image '" + id + "': pixel payload " + std::to_string(pixels.size()) +
                         " != width*height*channels " + std::to_string(expect));
    }
    if (!mask.empty()) {
        if (mask.size() != static_cast<std::size_t>(width) * height) {
            throw ValueError("image '" + id + "': mask size mismatch");
        }
        if (num_classes) {
            for (auto v : mask) {
                if (v >= *num_classes) {
                    throw ValueError("image '" + id + "': mask value " + std::to_string(v) +
                                     " >= num_classes " + std::to_string(*num_classes));
                }
            }
        }
    }
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    f.seekg(0, std::ios::end);
    const auto size = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw ParseError("read failed on '" + path + "'");
    return bytes;
}

[[noreturn]] void fail(const std::string& path, std::size_t offset, const std::string& what) {
    throw ParseError(path + ": " + what + " (byte offset " + std::to_string(offset) + ")");
}

struct HeaderCursor {
    const std::vector<std::uint8_t>& bytes;
    const std::string& path;
    std::size_t pos = 0;

    bool at_end() const { return pos >= bytes.size(); }

    // Skips whitespace and '#' comments that netpbm headers allow.
    void skip_separators() {
        while (!at_end()) {
            const std::uint8_t c = bytes[pos];
            if (c == '#') {
                while (!at_end() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    int read_int(const char* what) {
        skip_separators();
        if (at_end()) fail(path, pos, std::string("missing ") + what);
        if (bytes[pos] < '0' || bytes[pos] > '9') {
            fail(path, pos, std::string("expected digit for ") + what);
        }
        long v = 0;
        while (!at_end() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1 << 24) fail(path, pos, std::string(what) + " out of range");
            ++pos;
        }
        return static_cast<int>(v);
    }
};

}  // namespace

ImageRecord load_image(const std::string& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 2) fail(path, 0, "missing magic");
    int channels = 0;
    if (bytes[0] == 'P' && bytes[1] == '5') {
        channels = 1;
    } else if (bytes[0] == 'P' && bytes[1] == '6') {
        channels = 3;
    } else {
        fail(path, 0, "unsupported magic (want P5 or P6)");
    }
    HeaderCursor cur{bytes, path, 2};
    const int width = cur.read_int("width");
    const int height = cur.read_int("height");
    const std::size_t maxval_at = cur.pos;
    const int maxval = cur.read_int("maxval");
    if (maxval != 255) fail(path, maxval_at, "unsupported maxval " + std::to_string(maxval));
    if (cur.at_end()) fail(path, cur.pos, "missing payload separator");
    const std::uint8_t sep = bytes[cur.pos];
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
        fail(path, cur.pos, "expected single whitespace before payload");
    }
    ++cur.pos;
    const std::size_t expect = static_cast<std::size_t>(width) * height * channels;
    if (bytes.size() - cur.pos < expect) {
        fail(path, bytes.size(),
             "truncated payload: header promises " + std::to_string(expect) + " bytes, file has " +
                 std::to_string(bytes.size() - cur.pos));
    }
    ImageRecord img;
    img.width = width;
    img.height = height;
    img.channels = channels;
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos + expect));
    // id = basename without extension
    std::size_t slash = path.find_last_of('/');
    std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
    std::size_t dot = base.find_last_of('.');
    img.id = dot == std::string::npos ? base : base.substr(0, dot);
    img.validate();
    return img;
}

void save_image(const std::string& path, const ImageRecord& image) {
    image.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    f << (image.channels == 1 ? "P5" : "P6") << "\n"
      << image.width << " " << image.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
    if (!f) throw ParseError("write failed on '" + path + "'");
}

std::vector<std::uint8_t> load_mask(const std::string& path, int expect_width, int expect_height) {
    ImageRecord m = load_image(path);
    if (m.channels != 1) throw ParseError(path + ": mask must be grayscale P5");
    if (m.width != expect_width || m.height != expect_height) {
        throw ParseError(path + ": mask is " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                         ", image is " + std::to_string(expect_width) + "x" + std::to_string(expect_height));
    }
    return std::move(m.pixels);
}

void save_mask(const std::string& path, const std::vector<std::uint8_t>& mask, int width, int height) {
    ImageRecord m;
    m.id = "mask";
    m.width = width;
    m.height = height;
    m.channels = 1;
    m.pixels = mask;
    save_image(path, m);
}

}  // namespace matssl
