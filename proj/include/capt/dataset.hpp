#pragma once

#include <optional>
#include <string>
#include <vector>

#include "capt/backbone.hpp"
#include "capt/mat.hpp"

namespace capt {

struct ImageRecord {
    std::string path;
    std::string class_name;
    std::string id;                // defaults to path
    std::string role = "train";    // train | test
};

struct DatasetManifest {
    std::string name;
    std::vector<std::string> class_names;        // declaration order defines class indices
    std::vector<bool> is_base;                   // aligned with class_names
    std::vector<ImageRecord> images;

    static DatasetManifest load(const std::string& path);
    void save(const std::string& path) const;
    void validate() const;

    int class_index(const std::string& name) const;
    std::vector<std::string> base_classes() const;
    std::vector<std::string> novel_classes() const;
    std::vector<const ImageRecord*> records(const std::string& role) const;
};

// Loads pixels for a manifest record, resized to `size` x `size`.
// Supported paths: "synthetic:<seed>" (procedural, deterministic) and
// *.imgbin files ("CIMG", u32 height/width/channels, float32 data).
ImageInput load_image(const std::string& path, int size);

void save_imgbin(const std::string& path, const ImageInput& img);

// Deterministic noise image used by the synthetic: scheme.
ImageInput synthetic_image(uint64_t seed, int size);

// Random-resized-crop plus horizontal flip. Draws come from `rng`, so a
// fixed seed reproduces the exact augmentation stream.
ImageInput augment_image(const ImageInput& img, Rng& rng);

}  // namespace capt
