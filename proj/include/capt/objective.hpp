#pragma once

#include <string>
#include <vector>

#include "capt/backbone.hpp"
#include "capt/mat.hpp"
#include "capt/tape.hpp"

namespace capt {

// Pool of prompt templates carrying `[a]` and `[cls]` placeholders, used
// as frozen targets by the regularization loss.
class TemplatePool {
  public:
    static TemplatePool load(const std::string& path);
    static TemplatePool from_lines(const std::vector<std::string>& lines);

    int size() const { return static_cast<int>(templates_.size()); }
    const std::string& line(int i) const { return templates_[i]; }
    std::string instantiate(int i, const std::string& attribute, const std::string& class_name) const;

  private:
    std::vector<std::string> templates_;
};

// Fills `[a]` / `[cls]` placeholders in a single template string.
std::string fill_placeholders(const std::string& tmpl, const std::string& attribute,
                              const std::string& class_name);

struct LossWeights {
    double lambda1 = 4.0;
    double lambda2 = 4.0;
    int f = 2;
    int g = 1;
    double tau = 0.0;  // 0 means "use the backbone's temperature"

    void validate() const;
    double resolved_tau(const Backbone& b) const { return tau > 0.0 ? tau : b.tau(); }
};

// softmax over cos(img, prompt_c) / tau; 1 x C, entries in (0,1).
Val class_probabilities(Tape& t, Val image_embedding, const std::vector<Val>& prompt_embeddings,
                        double tau);
Mat class_probabilities(const Mat& image_embedding, const std::vector<Mat>& prompt_embeddings,
                        double tau);

// -log(probs[y]).
Val ce_loss(Tape& t, Val probs, int true_class);
double ce_loss(const Mat& probs, int true_class);

// Mean over frozen template embeddings of sum |learned - template|^g.
// The template branch carries no gradient by construction: callers pass
// plain matrices computed outside the tape.
Val reg_loss(Tape& t, Val learned_prompt_embedding, const std::vector<Mat>& template_embeddings,
             int g);
double reg_loss(const Mat& learned, const std::vector<Mat>& template_embeddings, int g);

}  // namespace capt
