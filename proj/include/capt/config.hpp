#pragma once

#include <string>
#include <vector>

#include "capt/annotation.hpp"
#include "capt/backbone.hpp"
#include "capt/pipeline.hpp"

namespace capt {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 4;
    double lr = 0.0025;
    double momentum = 0.9;
    int shots = 16;
    bool augment = true;
    int checkpoint_interval = 0;  // epochs; 0 writes only the final checkpoint

    void validate() const;
};

// Ablation grid axes; empty axes keep the base value.
struct GridSpec {
    std::vector<int> f;
    std::vector<int> g;
    std::vector<double> lambda1;
    std::vector<double> lambda2;
    std::vector<std::string> conditioning;
    std::vector<int> visual_depth;

    bool empty() const {
        return f.empty() && g.empty() && lambda1.empty() && lambda2.empty() && conditioning.empty() &&
               visual_depth.empty();
    }
};

// Fully resolved experiment configuration. Loading applies defaults and
// validates strictly: unknown keys and malformed values are fatal, and
// every referenced path must resolve.
struct ExperimentConfig {
    std::string backbone = "synthetic";  // synthetic | pretrained-vitb16
    std::string weights_path;            // pretrained weights
    std::string dataset;                 // manifest path
    std::string annotations;             // JSONL path
    std::string template_pool;           // template pool path
    std::string output_dir = "out";
    std::vector<uint64_t> seeds = {0};

    ModelConfig model;       // context length, conditioning, visual prompts
    TrainConfig train;
    VqaClientConfig vqa;
    BackboneArch synthetic;  // synthetic backbone shape
    uint64_t synthetic_seed = 7;
    GridSpec grid;

    static ExperimentConfig load(const std::string& path);
    static ExperimentConfig from_yaml(const std::string& text);

    // Canonical serialization (sorted keys, resolved defaults); the hash
    // is invariant to key order and formatting of the source file.
    std::string canonical() const;
    uint64_t hash() const;

    Backbone make_backbone() const;
    void validate_paths() const;
};

}  // namespace capt
