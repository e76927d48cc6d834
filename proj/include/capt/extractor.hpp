#pragma once

#include "capt/backbone.hpp"
#include "capt/mat.hpp"
#include "capt/tape.hpp"

namespace capt {

// Two-layer ReLU net predicting an attribute token embedding from an
// image embedding, so inference needs no captioning client.
struct ExtractorParams {
    Mat w1;  // D_vl x H
    Mat b1;  // 1 x H
    Mat w2;  // H x D_t
    Mat b2;  // 1 x D_t

    static ExtractorParams init(int d_vl, int hidden, int d_t, Rng& rng);
};

struct BoundExtractor {
    Val w1, b1, w2, b2;
};

BoundExtractor bind(Tape& t, const ExtractorParams& p);

// layer2(relu(layer1(emb))); 1 x D_t.
Val extract(Tape& t, const BoundExtractor& p, Val image_embedding);
Mat extract(const ExtractorParams& p, const Mat& image_embedding);

// Token embedding of an attribute string, reduced to one row: the row
// itself for single-token attributes, the mean of the rows otherwise.
Mat attribute_target(const Backbone& backbone, const std::string& attribute);

// Sum over coordinates of |pred - target|^f, f in {1, 2}.
Val attr_loss(Tape& t, Val pred, Val target, int f);
double attr_loss(const Mat& pred, const Mat& target, int f);

}  // namespace capt
