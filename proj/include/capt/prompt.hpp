#pragma once

#include <string>
#include <vector>

#include "capt/backbone.hpp"
#include "capt/mat.hpp"
#include "capt/tape.hpp"

namespace capt {

// The M shared learnable prompt tokens.
struct ContextVector {
    Mat tokens;  // M x D_t

    static ContextVector init(int context_length, int d_t, Rng& rng);
};

enum class Conditioning { kMultihead, kAdditive };

Conditioning conditioning_from_string(const std::string& s);
std::string to_string(Conditioning c);

// Instance-conditioning weights. Multihead mode attends from the context
// tokens to the (projected) image embedding; additive mode adds the
// projected embedding to every context token. The output projection /
// additive projection start at zero, so training starts from the plain
// shared-context behaviour; `residual` keeps that warm start while
// letting the literal non-residual form be selected in config.
struct ConditioningParams {
    Conditioning mode = Conditioning::kMultihead;
    int heads = 4;
    bool residual = true;
    Mat proj;            // D_vl x D_t; empty when widths match in multihead mode
    Mat wq, wk, wv, wo;  // D_t x D_t; empty in additive mode

    static ConditioningParams init(Conditioning mode, int heads, bool residual, int d_vl, int d_t,
                                   Rng& rng);
};

struct BoundConditioning {
    const ConditioningParams* params = nullptr;
    Val proj, wq, wk, wv, wo;
};

BoundConditioning bind(Tape& t, const ConditioningParams& p);

// Class names plus their frozen token-embedding segments.
struct ClassVocabulary {
    std::vector<std::string> names;
    std::vector<TokenSequence> segments;

    static ClassVocabulary build(const Backbone& backbone, const std::vector<std::string>& names);
    int size() const { return static_cast<int>(names.size()); }
};

// Conditioned context h; same shape as ctx (M x D_t).
Val condition(Tape& t, const BoundConditioning& c, Val ctx, Val image_embedding);

// One assembled per-class prompt: rows [h_1..h_M, attribute, class tokens].
struct PromptVal {
    Val rows;
    int eos_index = 0;
    int class_index = 0;
};

std::vector<PromptVal> assemble(Tape& t, const Backbone& backbone, Val conditioned_ctx,
                                Val attribute_row, const ClassVocabulary& vocab);

// Additive-conditioning counterpart kept for the conditioning ablation:
// h_i = u_i + project(emb), then the same assembly.
std::vector<PromptVal> assemble_additive_ablation(Tape& t, const Backbone& backbone,
                                                  const BoundConditioning& c, Val ctx,
                                                  Val image_embedding, Val attribute_row,
                                                  const ClassVocabulary& vocab);

}  // namespace capt
