#include "capt/objective.hpp"

#include <fstream>

namespace capt {

namespace {

size_t count_occurrences(const std::string& s, const std::string& needle) {
    size_t count = 0, pos = 0;
    while ((pos = s.find(needle, pos)) != std::string::npos) {
        ++count;
        pos += needle.size();
    }
    return count;
}

std::string replace_once(std::string s, const std::string& needle, const std::string& value) {
    const size_t pos = s.find(needle);
    if (pos != std::string::npos) s.replace(pos, needle.size(), value);
    return s;
}

}  // namespace

std::string fill_placeholders(const std::string& tmpl, const std::string& attribute,
                              const std::string& class_name) {
    std::string filled = replace_once(replace_once(tmpl, "[a]", attribute), "[cls]", class_name);
    // Collapse whitespace runs so an empty attribute leaves no seam.
    std::string out;
    bool in_space = false;
    for (char c : filled) {
        if (c == ' ' || c == '\t') {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        out.push_back(c);
    }
    return out;
}

TemplatePool TemplatePool::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open template pool at " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return from_lines(lines);
}

TemplatePool TemplatePool::from_lines(const std::vector<std::string>& lines) {
    if (lines.empty()) throw ConfigError("template pool is empty");
    TemplatePool pool;
    for (const std::string& l : lines) {
        if (count_occurrences(l, "[a]") != 1 || count_occurrences(l, "[cls]") != 1)
            throw ConfigError("template must contain [a] and [cls] exactly once: '" + l + "'");
        pool.templates_.push_back(l);
    }
    return pool;
}

std::string TemplatePool::instantiate(int i, const std::string& attribute,
                                      const std::string& class_name) const {
    if (i < 0 || i >= size()) throw InputError("template index out of range");
    return fill_placeholders(templates_[i], attribute, class_name);
}

void LossWeights::validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
    if (f != 1 && f != 2) throw ConfigError("loss.f must be 1 or 2");
    if (g != 1 && g != 2) throw ConfigError("loss.g must be 1 or 2");
    if (tau < 0.0) throw ConfigError("loss.tau must be positive (or 0 for the backbone default)");
}

Val class_probabilities(Tape& t, Val image_embedding, const std::vector<Val>& prompt_embeddings,
                        double tau) {
    if (prompt_embeddings.empty()) throw InputError("class_probabilities: no prompt embeddings");
    if (tau <= 0.0) throw ConfigError("class_probabilities: tau must be positive");
    std::vector<Val> sims;
    sims.reserve(prompt_embeddings.size());
    for (Val p : prompt_embeddings) sims.push_back(t.cosine(image_embedding, p));
    Val logits = t.scale(t.stack_scalars(sims), 1.0 / tau);
    return t.softmax_rows(logits);
}

Mat class_probabilities(const Mat& image_embedding, const std::vector<Mat>& prompt_embeddings,
                        double tau) {
    Tape t;
    std::vector<Val> ps;
    for (const Mat& m : prompt_embeddings) ps.push_back(t.leaf(m));
    return t.value(class_probabilities(t, t.leaf(image_embedding), ps, tau));
}

Val ce_loss(Tape& t, Val probs, int true_class) {
    const Mat& p = t.value(probs);
    if (p.rows != 1) throw InputError("ce_loss: expects a 1 x C probability row");
    if (true_class < 0 || true_class >= p.cols)
        throw InputError("ce_loss: class " + std::to_string(true_class) + " out of range [0, " +
                         std::to_string(p.cols) + ")");
    return t.neg(t.log(t.pick(probs, 0, true_class)));
}

double ce_loss(const Mat& probs, int true_class) {
    Tape t;
    return t.value(ce_loss(t, t.leaf(probs), true_class)).at(0, 0);
}

Val reg_loss(Tape& t, Val learned_prompt_embedding, const std::vector<Mat>& template_embeddings,
             int g) {
    if (g != 1 && g != 2) throw ConfigError("reg_loss: g must be 1 or 2");
    if (template_embeddings.empty()) throw InputError("reg_loss: empty template embedding list");
    Val acc;
    for (const Mat& tmpl : template_embeddings) {
        Val term = t.sum_abs_pow(t.sub(learned_prompt_embedding, t.leaf(tmpl)), g);
        acc = acc.valid() ? t.add(acc, term) : term;
    }
    return t.scale(acc, 1.0 / static_cast<double>(template_embeddings.size()));
}

double reg_loss(const Mat& learned, const std::vector<Mat>& template_embeddings, int g) {
    Tape t;
    return t.value(reg_loss(t, t.leaf(learned), template_embeddings, g)).at(0, 0);
}

}  // namespace capt
