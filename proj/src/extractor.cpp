#include "capt/extractor.hpp"

#include <cmath>

namespace capt {

ExtractorParams ExtractorParams::init(int d_vl, int hidden, int d_t, Rng& rng) {
    if (d_vl <= 0 || hidden <= 0 || d_t <= 0) throw ConfigError("extractor: non-positive width");
    ExtractorParams p;
    p.w1 = rng.normal_mat(d_vl, hidden, 1.0 / std::sqrt(static_cast<double>(d_vl)));
    p.b1 = Mat(1, hidden);
    p.w2 = rng.normal_mat(hidden, d_t, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b2 = Mat(1, d_t);
    return p;
}

BoundExtractor bind(Tape& t, const ExtractorParams& p) {
    return BoundExtractor{t.leaf(p.w1), t.leaf(p.b1), t.leaf(p.w2), t.leaf(p.b2)};
}

Val extract(Tape& t, const BoundExtractor& p, Val image_embedding) {
    const Mat& emb = t.value(image_embedding);
    const Mat& w1 = t.value(p.w1);
    if (emb.cols != w1.rows)
        throw ConfigError("extract: embedding width " + std::to_string(emb.cols) +
                          " does not match extractor input width " + std::to_string(w1.rows));
    Val hidden = t.relu(t.add_rowvec(t.matmul(image_embedding, p.w1), p.b1));
    return t.add_rowvec(t.matmul(hidden, p.w2), p.b2);
}

Mat extract(const ExtractorParams& p, const Mat& image_embedding) {
    Tape t;
    BoundExtractor b = bind(t, p);
    return t.value(extract(t, b, t.leaf(image_embedding)));
}

Mat attribute_target(const Backbone& backbone, const std::string& attribute) {
    if (attribute.empty()) throw InputError("attribute_target: empty attribute");
    const TokenSequence seq = backbone.embed_tokens(attribute);
    if (seq.rows.rows == 1) return seq.rows;
    Mat mean(1, seq.rows.cols);
    for (int i = 0; i < seq.rows.rows; ++i)
        for (int j = 0; j < seq.rows.cols; ++j) mean.at(0, j) += seq.rows.at(i, j);
    for (double& v : mean.data) v /= seq.rows.rows;
    return mean;
}

Val attr_loss(Tape& t, Val pred, Val target, int f) {
    if (f != 1 && f != 2) throw ConfigError("attr_loss: f must be 1 or 2");
    if (!t.value(pred).same_shape(t.value(target))) throw ConfigError("attr_loss: width mismatch");
    return t.sum_abs_pow(t.sub(pred, target), f);
}

double attr_loss(const Mat& pred, const Mat& target, int f) {
    Tape t;
    return t.value(attr_loss(t, t.leaf(pred), t.leaf(target), f)).at(0, 0);
}

}  // namespace capt
