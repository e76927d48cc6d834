#include "capt/pipeline.hpp"

#include <algorithm>

namespace capt {

void ModelConfig::validate(const BackboneArch& arch) const {
    if (context_length < 1) throw ConfigError("context_length must be at least 1");
    if (visual_tokens < 0) throw ConfigError("visual_tokens must be non-negative");
    if (visual_depth < 0) throw ConfigError("visual_depth must be non-negative");
    if (visual_tokens > 0 && (visual_depth < 1 || visual_depth > arch.layers_v))
        throw ConfigError("visual_depth must be in [1, " + std::to_string(arch.layers_v) +
                          "], got " + std::to_string(visual_depth));
    if (conditioning == Conditioning::kMultihead && (heads < 1 || arch.d_t % heads != 0))
        throw ConfigError("heads must divide the text embedding width " + std::to_string(arch.d_t));
    weights.validate();
}

ModelParams ModelParams::init(const ModelConfig& cfg, const Backbone& backbone) {
    cfg.validate(backbone.arch());
    const BackboneArch& arch = backbone.arch();
    Rng rng(cfg.seed);
    ModelParams p;
    p.ctx = ContextVector::init(cfg.context_length, arch.d_t, rng);
    if (cfg.visual_tokens > 0)
        for (int i = 0; i < cfg.visual_depth; ++i)
            p.visual.layers.push_back(rng.normal_mat(cfg.visual_tokens, arch.d_v, 0.02));
    const int hidden = cfg.extractor_hidden > 0 ? cfg.extractor_hidden : arch.d_vl;
    p.extractor = ExtractorParams::init(arch.d_vl, hidden, arch.d_t, rng);
    p.conditioning =
        ConditioningParams::init(cfg.conditioning, cfg.heads, cfg.residual, arch.d_vl, arch.d_t, rng);
    return p;
}

std::vector<ParamGroup> param_groups(ModelParams& p) {
    std::vector<ParamGroup> groups;
    groups.push_back({"context", {&p.ctx.tokens}});
    ParamGroup vp{"visual_prompts", {}};
    for (Mat& m : p.visual.layers) vp.mats.push_back(&m);
    groups.push_back(std::move(vp));
    groups.push_back({"extractor", {&p.extractor.w1, &p.extractor.b1, &p.extractor.w2, &p.extractor.b2}});
    ParamGroup cond{"conditioning", {}};
    if (!p.conditioning.proj.empty()) cond.mats.push_back(&p.conditioning.proj);
    if (p.conditioning.mode == Conditioning::kMultihead) {
        cond.mats.push_back(&p.conditioning.wq);
        cond.mats.push_back(&p.conditioning.wk);
        cond.mats.push_back(&p.conditioning.wv);
        cond.mats.push_back(&p.conditioning.wo);
    }
    groups.push_back(std::move(cond));
    return groups;
}

std::vector<Mat*> flat_params(ModelParams& p) {
    std::vector<Mat*> flat;
    for (ParamGroup& g : param_groups(p))
        for (Mat* m : g.mats) flat.push_back(m);
    return flat;
}

BoundModel bind_model(Tape& t, const ModelParams& p) {
    BoundModel b;
    b.ctx = t.leaf(p.ctx.tokens);
    for (const Mat& m : p.visual.layers) b.visual.push_back(t.leaf(m));
    b.extractor = bind(t, p.extractor);
    b.conditioning = bind(t, p.conditioning);

    b.flat.push_back(b.ctx);
    for (Val v : b.visual) b.flat.push_back(v);
    for (Val v : {b.extractor.w1, b.extractor.b1, b.extractor.w2, b.extractor.b2}) b.flat.push_back(v);
    if (b.conditioning.proj.valid()) b.flat.push_back(b.conditioning.proj);
    if (p.conditioning.mode == Conditioning::kMultihead)
        for (Val v : {b.conditioning.wq, b.conditioning.wk, b.conditioning.wv, b.conditioning.wo})
            b.flat.push_back(v);
    return b;
}

Pipeline::Pipeline(const Backbone& backbone, ModelConfig cfg, ClassVocabulary vocab, TemplatePool pool)
    : backbone_(&backbone), cfg_(std::move(cfg)), vocab_(std::move(vocab)), pool_(std::move(pool)) {
    cfg_.validate(backbone.arch());
}

Mat Pipeline::template_embedding(int index, const std::string& attribute,
                                 const std::string& class_name) const {
    std::string readable = class_name;
    std::replace(readable.begin(), readable.end(), '_', ' ');
    const TokenSequence seq = backbone_->embed_tokens(pool_.instantiate(index, attribute, readable));
    return backbone_->text_embedding(seq);
}

SampleLossVals Pipeline::sample_loss(Tape& t, const BoundModel& bound, const TrainSample& sample) const {
    if (sample.label < 0 || sample.label >= vocab_.size())
        throw InputError("sample label " + std::to_string(sample.label) + " out of range");
    if (sample.attribute.empty())
        throw InputError("sample " + sample.image.id + " has no attribute annotation");

    Val img_emb = backbone_->encode_image(t, sample.image, bound.visual);
    Val h = condition(t, bound.conditioning, bound.ctx, img_emb);
    Val attr_pred = extract(t, bound.extractor, img_emb);
    std::vector<PromptVal> prompts = assemble(t, *backbone_, h, attr_pred, vocab_);

    std::vector<Val> prompt_embs;
    prompt_embs.reserve(prompts.size());
    for (const PromptVal& p : prompts) prompt_embs.push_back(backbone_->encode_text(t, p.rows, p.eos_index));

    SampleLossVals out;
    out.probs = class_probabilities(t, img_emb, prompt_embs, tau());
    out.ce = ce_loss(t, out.probs, sample.label);

    Val target = t.leaf(attribute_target(*backbone_, sample.attribute));
    out.attr = attr_loss(t, attr_pred, target, cfg_.weights.f);

    std::vector<Mat> tmpl_embs;
    tmpl_embs.reserve(pool_.size());
    for (int i = 0; i < pool_.size(); ++i)
        tmpl_embs.push_back(template_embedding(i, sample.attribute, vocab_.names[sample.label]));
    out.reg = reg_loss(t, prompt_embs[sample.label], tmpl_embs, cfg_.weights.g);

    out.total = t.add(out.ce, t.add(t.scale(out.attr, cfg_.weights.lambda1),
                                    t.scale(out.reg, cfg_.weights.lambda2)));
    return out;
}

Val Pipeline::batch_loss(Tape& t, const BoundModel& bound, const std::vector<TrainSample>& batch,
                         LossTerms* terms) const {
    if (batch.empty()) throw InputError("batch_loss: empty batch");
    Val total, ce, attr, reg;
    for (const TrainSample& s : batch) {
        SampleLossVals v = sample_loss(t, bound, s);
        total = total.valid() ? t.add(total, v.total) : v.total;
        ce = ce.valid() ? t.add(ce, v.ce) : v.ce;
        attr = attr.valid() ? t.add(attr, v.attr) : v.attr;
        reg = reg.valid() ? t.add(reg, v.reg) : v.reg;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    total = t.scale(total, inv);
    if (terms) {
        terms->total = t.value(total).at(0, 0);
        terms->ce = t.value(ce).at(0, 0) * inv;
        terms->attr = t.value(attr).at(0, 0) * inv;
        terms->reg = t.value(reg).at(0, 0) * inv;
    }
    return total;
}

Prediction Pipeline::classify(const ModelParams& params, const ImageInput& img,
                              const ClassVocabulary& vocab) const {
    Tape t;
    BoundModel bound = bind_model(t, params);
    Val img_emb = backbone_->encode_image(t, img, bound.visual);
    Val h = condition(t, bound.conditioning, bound.ctx, img_emb);
    Val attr_pred = extract(t, bound.extractor, img_emb);
    std::vector<PromptVal> prompts = assemble(t, *backbone_, h, attr_pred, vocab);
    std::vector<Val> prompt_embs;
    for (const PromptVal& p : prompts) prompt_embs.push_back(backbone_->encode_text(t, p.rows, p.eos_index));
    Val probs = class_probabilities(t, img_emb, prompt_embs, tau());

    Prediction pred;
    pred.probs = t.value(probs);
    pred.predicted = 0;
    for (int c = 1; c < pred.probs.cols; ++c)
        if (pred.probs.at(0, c) > pred.probs.at(0, pred.predicted)) pred.predicted = c;
    return pred;
}

Prediction Pipeline::classify(const ModelParams& params, const ImageInput& img) const {
    return classify(params, img, vocab_);
}

}  // namespace capt
