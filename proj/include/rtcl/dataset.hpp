#pragma once

#include <string>
#include <vector>

#include "rtcl/rng.hpp"
#include "rtcl/tensor.hpp"

namespace rtcl {

// Raw labeled images with values in [0,1], snapped to float32.
struct Dataset {
    int h = 28;
    int w = 28;
    int c = 1;
    std::vector<Tensor> images;  // [h x w x c] each
    std::vector<int> labels;     // global class ids

    std::size_t size() const { return images.size(); }
    std::vector<int> classes() const;                         // sorted unique labels
    std::vector<int> indices_of(const std::vector<int>& class_ids) const;
};

// Procedural 28x28 grayscale glyphs: 16 classes with distinct ink layouts,
// jittered in position, thickness, intensity, and pixel noise. Classes 0-9
// serve the continual stream; the rest are held out for pretext training.
inline constexpr int kGlyphClassCount = 16;

Tensor glyph_image(int glyph_class, Rng& rng);
Dataset make_glyphs(const std::vector<int>& class_ids, int per_class, Rng& rng);

// IDX-format reader (images paired with labels). Throws ConfigError when the
// files are missing or malformed.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Standard file names under a data directory.
Dataset load_idx_dir(const std::string& dir, bool train);

// permuted[i] = image[perm[i]], elementwise over the flattened pixels.
Tensor apply_permutation(const Tensor& image, const std::vector<int>& perm);

}  // namespace rtcl
