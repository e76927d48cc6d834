#pragma once

#include <string>
#include <vector>

#include "capt/mat.hpp"
#include "capt/tape.hpp"

namespace capt {

struct ImageInput {
    std::string id;
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // H x W x 3, row-major, channels innermost

    void validate() const;
};

// Per-layer learnable visual tokens appended to the vision encoder input.
// layers.size() is the injection depth K; each grid is n x D_v.
struct VisualPromptParams {
    std::vector<Mat> layers;

    int depth() const { return static_cast<int>(layers.size()); }
    int count_per_layer() const { return layers.empty() ? 0 : layers[0].rows; }
};

// Raw token-embedding rows fed to the text encoder (pre-transformer).
struct TokenSequence {
    Mat rows;           // T x D_t
    int eos_index = 0;  // pooled position; the final row by convention
};

struct BlockWeights {
    Mat ln1_g, ln1_b;
    Mat wq, bq, wk, bk, wv, bv, wo, bo;
    Mat ln2_g, ln2_b;
    Mat w1, b1, w2, b2;
};

struct EncoderWeights {
    std::vector<BlockWeights> blocks;
    Mat pos;  // max positions x D
    Mat ln_final_g, ln_final_b;
};

struct BackboneArch {
    int image_size = 8;
    int patch_size = 4;
    int d_v = 8;
    int heads_v = 2;
    int layers_v = 2;
    int mlp_v = 16;
    int d_t = 8;
    int heads_t = 2;
    int layers_t = 2;
    int mlp_t = 16;
    int vocab_size = 32;
    int max_seq = 64;
    int d_vl = 8;
    double logit_scale = 1.0;  // similarity logits are cos * logit_scale
    bool causal_text = false;

    int patches() const {
        const int g = image_size / patch_size;
        return g * g;
    }
    void validate() const;
};

// A frozen contrastive encoder pair. Weights never change after
// construction; gradients flow through the encoders to their inputs
// (prompt rows, visual tokens) only.
class Backbone {
  public:
    // Tiny seeded backbone for desk-scale verification.
    static Backbone make_synthetic(const BackboneArch& arch, uint64_t seed);
    // Adapter over pretrained weights stored in the checkpoint format
    // described in the README (written by save_weights / a converter).
    static Backbone load_weights(const std::string& path);
    void save_weights(const std::string& path) const;

    const BackboneArch& arch() const { return arch_; }
    double tau() const { return 1.0 / arch_.logit_scale; }
    uint64_t fingerprint() const;

    // Projected class-token embedding (1 x D_vl). `visual_prompts` holds
    // one n x D_v grid per injected layer; empty means the plain encoder.
    Val encode_image(Tape& t, const ImageInput& img, const std::vector<Val>& visual_prompts) const;
    // Pooled, projected text embedding (1 x D_vl) from raw token rows.
    Val encode_text(Tape& t, Val rows, int eos_index) const;

    Mat image_embedding(const ImageInput& img) const;
    Mat image_embedding(const ImageInput& img, const VisualPromptParams& vp) const;
    Mat text_embedding(const TokenSequence& seq) const;

    TokenSequence embed_tokens(const std::string& text) const;
    std::vector<int> tokenize(const std::string& text) const;

    // Read-only weight access (fingerprinting, persistence, test oracles).
    const EncoderWeights& vision_weights() const { return vision_; }
    const EncoderWeights& text_weights() const { return text_; }
    const Mat& patch_proj() const { return patch_proj_; }
    const Mat& patch_bias() const { return patch_bias_; }
    const Mat& class_token() const { return class_token_; }
    const Mat& vision_proj() const { return vision_proj_; }
    const Mat& text_proj() const { return text_proj_; }
    const Mat& token_table() const { return token_table_; }
    const std::vector<std::string>& vocab() const { return vocab_; }

    // Test-harness hook: deliberately perturbs one frozen weight so the
    // fingerprint sensitivity contract can be exercised.
    void corrupt_weight_for_test() { vision_proj_.data[0] += 1.0; }

  private:
    Backbone() = default;

    Val run_blocks(Tape& t, const EncoderWeights& enc, Val x, int heads, bool causal) const;
    Val attention(Tape& t, const BlockWeights& b, Val x, int heads, bool causal) const;

    BackboneArch arch_;
    EncoderWeights vision_;
    EncoderWeights text_;
    Mat patch_proj_;   // (patch*patch*3) x D_v
    Mat patch_bias_;   // 1 x D_v
    Mat class_token_;  // 1 x D_v
    Mat vision_proj_;  // D_v x D_vl
    Mat token_table_;  // vocab x D_t
    Mat text_proj_;    // D_t x D_vl
    std::vector<std::string> vocab_;
};

}  // namespace capt
