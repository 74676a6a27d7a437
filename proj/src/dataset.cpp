#include "rtcl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

namespace rtcl {

std::vector<int> Dataset::classes() const {
    std::vector<int> out = labels;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<int> Dataset::indices_of(const std::vector<int>& class_ids) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (std::find(class_ids.begin(), class_ids.end(), labels[i]) != class_ids.end()) {
            out.push_back(static_cast<int>(i));
        }
    }
    return out;
}

namespace {

constexpr int kSide = 28;

struct Canvas {
    std::vector<real> px;
    Canvas() : px(kSide * kSide, real(0)) {}
    void set(int y, int x, real v) {
        if (y >= 0 && y < kSide && x >= 0 && x < kSide) {
            px[static_cast<std::size_t>(y) * kSide + x] = std::max(px[static_cast<std::size_t>(y) * kSide + x], v);
        }
    }
};

void fill_rect(Canvas& c, int y0, int y1, int x0, int x1, real v) {
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) c.set(y, x, v);
}

}  // namespace

// Stream classes (0-9) are patch-aligned textures and centered shapes whose
// patch-averaged statistics stay far apart; held-out classes (10-15) carry
// coarse positional layouts and serve as the pretext set.
Tensor glyph_image(int glyph_class, Rng& rng) {
    if (glyph_class < 0 || glyph_class >= kGlyphClassCount) {
        throw ConfigError("glyph class " + std::to_string(glyph_class) + " outside [0, " +
                          std::to_string(kGlyphClassCount) + ")");
    }
    const real ink = real(0.75) + real(0.25) * static_cast<real>(rng.uniform());
    const int jy = rng.uniform_int(3) - 1;
    const int jx = rng.uniform_int(3) - 1;
    const int th = 3 + rng.uniform_int(2);  // stripe thickness within a 7-pixel period

    Canvas c;
    const int mid = kSide / 2;
    switch (glyph_class) {
        case 0:  // horizontal stripes, patch-period
            for (int y = 0; y < kSide; ++y)
                if (y % 7 < th)
                    for (int x = 0; x < kSide; ++x) c.set(y, x, ink);
            break;
        case 1:  // vertical stripes
            for (int x = 0; x < kSide; ++x)
                if (x % 7 < th)
                    for (int y = 0; y < kSide; ++y) c.set(y, x, ink);
            break;
        case 2:  // diagonal stripes
            for (int y = 0; y < kSide; ++y)
                for (int x = 0; x < kSide; ++x)
                    if ((y + x) % 7 < th) c.set(y, x, ink);
            break;
        case 3:  // anti-diagonal stripes
            for (int y = 0; y < kSide; ++y)
                for (int x = 0; x < kSide; ++x)
                    if ((y - x + 4 * kSide) % 7 < th) c.set(y, x, ink);
            break;
        case 4: {  // fine checkerboard
            const int phase = rng.uniform_int(2);
            for (int y = 0; y < kSide; ++y)
                for (int x = 0; x < kSide; ++x)
                    if (((y / 3) + (x / 3)) % 2 == phase) c.set(y, x, ink);
            break;
        }
        case 5: {  // dot grid at patch centers
            const int r = 1 + rng.uniform_int(2);
            for (int y = 0; y < kSide; ++y)
                for (int x = 0; x < kSide; ++x)
                    if (std::abs(y % 7 - 3) <= r && std::abs(x % 7 - 3) <= r) c.set(y, x, ink);
            break;
        }
        case 6:  // cross-hatch grid lines on patch boundaries
            for (int y = 0; y < kSide; ++y)
                for (int x = 0; x < kSide; ++x)
                    if (y % 7 < 2 || x % 7 < 2) c.set(y, x, ink);
            break;
        case 7:  // horizontal stripes, offset phase
            for (int y = 0; y < kSide; ++y)
                if (y % 7 >= 4)
                    for (int x = 0; x < kSide; ++x) c.set(y, x, ink);
            break;
        case 8:  // vertical stripes, offset phase
            for (int x = 0; x < kSide; ++x)
                if (x % 7 >= 4)
                    for (int y = 0; y < kSide; ++y) c.set(y, x, ink);
            break;
        case 9:  // dim solid field
            fill_rect(c, 0, kSide, 0, kSide, real(0.2) * ink + real(0.1));
            break;
        case 10:  // top half
            fill_rect(c, 0, mid + jy, 0, kSide, ink);
            break;
        case 11:  // bottom half
            fill_rect(c, mid + jy, kSide, 0, kSide, ink);
            break;
        case 12:  // left half
            fill_rect(c, 0, kSide, 0, mid + jx, ink);
            break;
        case 13:  // right half
            fill_rect(c, 0, kSide, mid + jx, kSide, ink);
            break;
        case 14: {  // frame
            const int b = 3 + rng.uniform_int(2);
            fill_rect(c, 1, kSide - 1, 1, kSide - 1, ink);
            for (int y = 1 + b; y < kSide - 1 - b; ++y)
                for (int x = 1 + b; x < kSide - 1 - b; ++x)
                    c.px[static_cast<std::size_t>(y) * kSide + x] = real(0);
            break;
        }
        default:  // 15: corner blobs
            for (const auto& [cy, cx] : {std::pair{6, 6}, {6, kSide - 7}, {kSide - 7, 6},
                                        {kSide - 7, kSide - 7}}) {
                fill_rect(c, cy + jy - 4, cy + jy + 4, cx + jx - 4, cx + jx + 4, ink);
            }
            break;
    }

    Tensor img = Tensor::zeros({kSide, kSide, 1});
    for (std::size_t i = 0; i < c.px.size(); ++i) {
        real v = c.px[i] + real(0.03) * static_cast<real>(rng.normal());
        img.data()[i] = snap32(std::clamp(v, real(0), real(1)));
    }
    return img;
}

Dataset make_glyphs(const std::vector<int>& class_ids, int per_class, Rng& rng) {
    Dataset ds;
    for (int cls : class_ids) {
        for (int i = 0; i < per_class; ++i) {
            ds.images.push_back(glyph_image(cls, rng));
            ds.labels.push_back(cls);
        }
    }
    return ds;
}

namespace {

uint32_t read_be32(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    if (!f.read(reinterpret_cast<char*>(b), 4)) {
        throw ConfigError("unexpected end of IDX file " + path);
    }
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgf(images_path, std::ios::binary);
    if (!imgf) throw ConfigError("cannot open IDX image file " + images_path);
    std::ifstream labf(labels_path, std::ios::binary);
    if (!labf) throw ConfigError("cannot open IDX label file " + labels_path);

    if (read_be32(imgf, images_path) != 2051u) throw ConfigError("bad IDX image magic in " + images_path);
    const uint32_t n_images = read_be32(imgf, images_path);
    const uint32_t rows = read_be32(imgf, images_path);
    const uint32_t cols = read_be32(imgf, images_path);

    if (read_be32(labf, labels_path) != 2049u) throw ConfigError("bad IDX label magic in " + labels_path);
    const uint32_t n_labels = read_be32(labf, labels_path);
    if (n_images != n_labels) {
        throw ConfigError("IDX image/label counts differ: " + std::to_string(n_images) + " vs " +
                          std::to_string(n_labels));
    }

    Dataset ds;
    ds.h = static_cast<int>(rows);
    ds.w = static_cast<int>(cols);
    ds.c = 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (uint32_t i = 0; i < n_images; ++i) {
        if (!imgf.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
            throw ConfigError("truncated IDX image file " + images_path);
        }
        Tensor img = Tensor::zeros({ds.h, ds.w, 1});
        for (std::size_t k = 0; k < buf.size(); ++k) {
            img.data()[k] = snap32(static_cast<real>(buf[k]) / real(255));
        }
        char lb = 0;
        if (!labf.read(&lb, 1)) throw ConfigError("truncated IDX label file " + labels_path);
        ds.images.push_back(std::move(img));
        ds.labels.push_back(static_cast<int>(static_cast<unsigned char>(lb)));
    }
    return ds;
}

Dataset load_idx_dir(const std::string& dir, bool train) {
    const std::string img = dir + (train ? "/train-images-idx3-ubyte" : "/t10k-images-idx3-ubyte");
    const std::string lab = dir + (train ? "/train-labels-idx1-ubyte" : "/t10k-labels-idx1-ubyte");
    return load_idx(img, lab);
}

Tensor apply_permutation(const Tensor& image, const std::vector<int>& perm) {
    if (perm.empty()) return image;
    if (static_cast<std::int64_t>(perm.size()) != image.size()) {
        throw ShapeError("permutation covers " + std::to_string(perm.size()) + " pixels, image has " +
                         std::to_string(image.size()));
    }
    Tensor out = Tensor::zeros(image.shape());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.data()[i] = image.data()[static_cast<std::size_t>(perm[i])];
    }
    return out;
}

}  // namespace rtcl
