#include "capt/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace capt {

ContextVector ContextVector::init(int context_length, int d_t, Rng& rng) {
    if (context_length < 1) throw ConfigError("context_length must be at least 1");
    ContextVector ctx;
    ctx.tokens = rng.normal_mat(context_length, d_t, 0.02);
    return ctx;
}

Conditioning conditioning_from_string(const std::string& s) {
    if (s == "multihead") return Conditioning::kMultihead;
    if (s == "additive") return Conditioning::kAdditive;
    throw ConfigError("conditioning must be 'multihead' or 'additive', got '" + s + "'");
}

std::string to_string(Conditioning c) {
    return c == Conditioning::kMultihead ? "multihead" : "additive";
}

ConditioningParams ConditioningParams::init(Conditioning mode, int heads, bool residual, int d_vl,
                                            int d_t, Rng& rng) {
    ConditioningParams p;
    p.mode = mode;
    p.heads = heads;
    p.residual = residual;
    if (mode == Conditioning::kMultihead) {
        if (heads < 1 || d_t % heads != 0)
            throw ConfigError("conditioning heads (" + std::to_string(heads) +
                              ") must divide the attention width (" + std::to_string(d_t) + ")");
        if (d_vl != d_t) p.proj = rng.normal_mat(d_vl, d_t, 1.0 / std::sqrt(static_cast<double>(d_vl)));
        const double s = 1.0 / std::sqrt(static_cast<double>(d_t));
        p.wq = rng.normal_mat(d_t, d_t, s);
        p.wk = rng.normal_mat(d_t, d_t, s);
        p.wv = rng.normal_mat(d_t, d_t, s);
        p.wo = Mat(d_t, d_t);  // zero output projection: starts at the unconditioned context
    } else {
        p.proj = Mat(d_vl, d_t);  // zero: additive conditioning also starts neutral
    }
    return p;
}

BoundConditioning bind(Tape& t, const ConditioningParams& p) {
    BoundConditioning b;
    b.params = &p;
    if (!p.proj.empty()) b.proj = t.leaf(p.proj);
    if (p.mode == Conditioning::kMultihead) {
        b.wq = t.leaf(p.wq);
        b.wk = t.leaf(p.wk);
        b.wv = t.leaf(p.wv);
        b.wo = t.leaf(p.wo);
    }
    return b;
}

ClassVocabulary ClassVocabulary::build(const Backbone& backbone, const std::vector<std::string>& names) {
    if (names.size() < 2) throw InputError("class vocabulary needs at least 2 classes");
    std::set<std::string> seen;
    ClassVocabulary vocab;
    for (const std::string& raw : names) {
        if (!seen.insert(raw).second) throw InputError("duplicate class name '" + raw + "'");
        std::string readable = raw;
        std::replace(readable.begin(), readable.end(), '_', ' ');
        vocab.names.push_back(raw);
        vocab.segments.push_back(backbone.embed_tokens(readable));
    }
    return vocab;
}

Val condition(Tape& t, const BoundConditioning& c, Val ctx, Val image_embedding) {
    const ConditioningParams& p = *c.params;
    const Mat& u = t.value(ctx);
    const int d_t = u.cols;

    Val emb = image_embedding;
    if (c.proj.valid()) emb = t.matmul(emb, c.proj);
    if (t.value(emb).cols != d_t)
        throw ConfigError("conditioning: image embedding width " +
                          std::to_string(t.value(emb).cols) + " does not match context width " +
                          std::to_string(d_t) + " (projection required)");

    if (p.mode == Conditioning::kAdditive)
        return t.add(ctx, t.broadcast_row(emb, u.rows));

    // Multi-head attention: Query = context tokens, Key = Value = the
    // image embedding as a length-1 sequence.
    const int dh = d_t / p.heads;
    Val q = t.matmul(ctx, c.wq);
    Val k = t.matmul(emb, c.wk);
    Val v = t.matmul(emb, c.wv);
    std::vector<Val> head_outs;
    for (int h = 0; h < p.heads; ++h) {
        Val qh = t.slice_cols(q, h * dh, dh);
        Val kh = t.slice_cols(k, h * dh, dh);
        Val vh = t.slice_cols(v, h * dh, dh);
        Val scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        Val probs = t.softmax_rows(scores);
        head_outs.push_back(t.matmul(probs, vh));
    }
    Val merged = p.heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
    Val attended = t.matmul(merged, c.wo);
    return p.residual ? t.add(ctx, attended) : attended;
}

std::vector<PromptVal> assemble(Tape& t, const Backbone& backbone, Val conditioned_ctx,
                                Val attribute_row, const ClassVocabulary& vocab) {
    const Mat& h = t.value(conditioned_ctx);
    const Mat& attr = t.value(attribute_row);
    if (attr.rows != 1 || attr.cols != h.cols)
        throw ConfigError("assemble: attribute row must be 1 x " + std::to_string(h.cols));

    std::vector<PromptVal> prompts;
    for (int c = 0; c < vocab.size(); ++c) {
        const TokenSequence& seg = vocab.segments[c];
        if (seg.rows.cols != h.cols) throw ConfigError("assemble: class token width mismatch");
        const int total = h.rows + 1 + seg.rows.rows;
        if (total > backbone.arch().max_seq)
            throw InputError("assemble: prompt for class '" + vocab.names[c] + "' is " +
                             std::to_string(total) + " tokens, over the limit of " +
                             std::to_string(backbone.arch().max_seq));
        Val rows = t.concat_rows({conditioned_ctx, attribute_row, t.leaf(seg.rows)});
        prompts.push_back(PromptVal{rows, total - 1, c});
    }
    return prompts;
}

std::vector<PromptVal> assemble_additive_ablation(Tape& t, const Backbone& backbone,
                                                  const BoundConditioning& c, Val ctx,
                                                  Val image_embedding, Val attribute_row,
                                                  const ClassVocabulary& vocab) {
    if (c.params->mode != Conditioning::kAdditive)
        throw ConfigError("assemble_additive_ablation requires additive conditioning params");
    Val h = condition(t, c, ctx, image_embedding);
    return assemble(t, backbone, h, attribute_row, vocab);
}

}  // namespace capt
