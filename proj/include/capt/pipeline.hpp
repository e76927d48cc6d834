#pragma once

#include <string>
#include <vector>

#include "capt/backbone.hpp"
#include "capt/extractor.hpp"
#include "capt/objective.hpp"
#include "capt/prompt.hpp"

namespace capt {

struct ModelConfig {
    int context_length = 4;  // M
    int heads = 4;
    Conditioning conditioning = Conditioning::kMultihead;
    bool residual = true;
    int visual_tokens = 4;    // n per injected layer
    int visual_depth = 9;     // K
    int extractor_hidden = 0; // 0 picks the embedding width
    LossWeights weights;
    uint64_t seed = 0;

    void validate(const BackboneArch& arch) const;
};

// All trainable parameter groups; the backbone stays frozen underneath.
struct ModelParams {
    ContextVector ctx;
    VisualPromptParams visual;
    ExtractorParams extractor;
    ConditioningParams conditioning;

    static ModelParams init(const ModelConfig& cfg, const Backbone& backbone);
};

struct ParamGroup {
    std::string name;
    std::vector<Mat*> mats;
};

// Named trainable groups, in a fixed order shared with BoundModel::flat.
std::vector<ParamGroup> param_groups(ModelParams& p);
std::vector<Mat*> flat_params(ModelParams& p);

struct BoundModel {
    Val ctx;
    std::vector<Val> visual;
    BoundExtractor extractor;
    BoundConditioning conditioning;
    std::vector<Val> flat;  // aligned with flat_params()
};

BoundModel bind_model(Tape& t, const ModelParams& p);

struct TrainSample {
    ImageInput image;
    int label = 0;
    std::string attribute;  // annotation label; training only
};

struct SampleLossVals {
    Val total, ce, attr, reg;
    Val probs;
};

struct LossTerms {
    double total = 0, ce = 0, attr = 0, reg = 0;
};

struct Prediction {
    int predicted = 0;
    Mat probs;
};

// Full forward path: deep-prompted image encoding, instance conditioning,
// attribute prediction, per-class prompt assembly, and the three-term
// objective. Owns copies of the vocabulary and template pool.
class Pipeline {
  public:
    Pipeline(const Backbone& backbone, ModelConfig cfg, ClassVocabulary vocab, TemplatePool pool);

    const Backbone& backbone() const { return *backbone_; }
    const ModelConfig& config() const { return cfg_; }
    const ClassVocabulary& vocab() const { return vocab_; }
    const TemplatePool& pool() const { return pool_; }
    double tau() const { return cfg_.weights.resolved_tau(*backbone_); }

    SampleLossVals sample_loss(Tape& t, const BoundModel& bound, const TrainSample& sample) const;
    // Batch-averaged objective; `terms` receives the per-term values.
    Val batch_loss(Tape& t, const BoundModel& bound, const std::vector<TrainSample>& batch,
                   LossTerms* terms) const;

    // Inference: prompts are built from the trained extractor's predicted
    // attribute row; annotations are never consulted. `vocab` may contain
    // class names unseen during training.
    Prediction classify(const ModelParams& params, const ImageInput& img,
                        const ClassVocabulary& vocab) const;
    Prediction classify(const ModelParams& params, const ImageInput& img) const;

    // Frozen (gradient-detached) embedding of one instantiated template.
    Mat template_embedding(int index, const std::string& attribute,
                           const std::string& class_name) const;

  private:
    const Backbone* backbone_;
    ModelConfig cfg_;
    ClassVocabulary vocab_;
    TemplatePool pool_;
};

}  // namespace capt
