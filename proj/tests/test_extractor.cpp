#include <cmath>

#include "capt/extractor.hpp"
#include "doctest.h"
#include "testing_support.hpp"

using namespace capt;
using namespace capt::testing;

TEST_CASE("extract: zero parameters give the zero vector") {
    ExtractorParams p;
    p.w1 = Mat(3, 4);
    p.b1 = Mat(1, 4);
    p.w2 = Mat(4, 2);
    p.b2 = Mat(1, 2);
    const Mat out = extract(p, random_mat(1, 3, 1));
    for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("extract: hand-computed two-by-two forward") {
    // emb = (2, 1); emb W1 + b1 = (2+3+0.5, 4+4-0.5) = (5.5, 7.5), relu keeps
    // both; then (5.5, 7.5) W2 + b2 = (5.5+15+0.25, -5.5+3.75-0.25) = (20.75, -2).
    ExtractorParams p;
    p.w1 = Mat(2, 2, {1, 2, 3, 4});
    p.b1 = Mat(1, 2, {0.5, -0.5});
    p.w2 = Mat(2, 2, {1, -1, 2, 0.5});
    p.b2 = Mat(1, 2, {0.25, -0.25});
    const Mat out = extract(p, Mat(1, 2, {2, 1}));
    CHECK(out.at(0, 0) == doctest::Approx(20.75).epsilon(1e-12));
    CHECK(out.at(0, 1) == doctest::Approx(-2.0).epsilon(1e-12));

    // A negative pre-activation is clipped by the ReLU.
    const Mat clipped = extract(p, Mat(1, 2, {-1, 0}));
    // layer1: (-1+0.5, -2-0.5) = (-0.5, -2.5) -> relu (0,0) -> biases only
    CHECK(clipped.at(0, 0) == doctest::Approx(0.25));
    CHECK(clipped.at(0, 1) == doctest::Approx(-0.25));
}

TEST_CASE("extract: width contracts") {
    Rng rng(5);
    ExtractorParams p = ExtractorParams::init(512, 512, 512, rng);
    const Mat out = extract(p, random_mat(1, 512, 2, 0.1));
    CHECK(out.rows == 1);
    CHECK(out.cols == 512);

    Tape t;
    BoundExtractor b = bind(t, p);
    CHECK_THROWS_AS(extract(t, b, t.leaf(random_mat(1, 8, 3))), ConfigError);
}

TEST_CASE("attribute_target: single token, multi-token mean, determinism") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);

    const Mat single = attribute_target(b, "g");
    for (int j = 0; j < b.arch().d_t; ++j)
        CHECK(single.at(0, j) == b.token_table().at(6, j));  // row for 'g'

    // Two-token attribute: mean of the two table rows, computed by hand.
    const Mat two = attribute_target(b, "ab");
    for (int j = 0; j < b.arch().d_t; ++j) {
        const double want = 0.5 * (b.token_table().at(0, j) + b.token_table().at(1, j));
        CHECK(two.at(0, j) == doctest::Approx(want).epsilon(1e-12));
    }

    const Mat again = attribute_target(b, "ab");
    for (size_t i = 0; i < two.data.size(); ++i) CHECK(two.data[i] == again.data[i]);

    CHECK_THROWS_AS(attribute_target(b, ""), InputError);
}

TEST_CASE("attr_loss: hand values and domain checks") {
    const Mat pred(1, 2, {3, 4});
    const Mat target(1, 2, {0, 0});
    CHECK(attr_loss(pred, target, 2) == doctest::Approx(25.0).epsilon(1e-12));
    CHECK(attr_loss(pred, target, 1) == doctest::Approx(7.0).epsilon(1e-12));
    CHECK(attr_loss(pred, pred, 2) == 0.0);
    CHECK(attr_loss(pred, pred, 1) == 0.0);

    Tape t;
    CHECK_THROWS_AS(attr_loss(t, t.leaf(pred), t.leaf(target), 3), ConfigError);
    CHECK_THROWS_AS(attr_loss(t, t.leaf(pred), t.leaf(Mat(1, 3)), 2), ConfigError);
}

TEST_CASE("attr_loss: non-negative, zero iff equal") {
    Rng rng(11);
    for (int i = 0; i < 50; ++i) {
        const Mat a = rng.normal_mat(1, 6, 1.0);
        Mat b = rng.normal_mat(1, 6, 1.0);
        for (int f : {1, 2}) {
            const double l = attr_loss(a, b, f);
            CHECK(l >= 0.0);
            if (l == 0.0)
                for (size_t k = 0; k < a.data.size(); ++k) CHECK(a.data[k] == b.data[k]);
        }
        CHECK(attr_loss(a, a, 1) == 0.0);
        CHECK(attr_loss(a, a, 2) == 0.0);
    }
}

TEST_CASE("extractor gradients match finite differences") {
    Rng rng(21);
    ExtractorParams p = ExtractorParams::init(4, 5, 3, rng);
    const Mat emb = random_mat(1, 4, 31, 1.0);
    const Mat target = random_mat(1, 3, 32, 1.0);

    for (int f : {1, 2}) {
        auto eval = [&]() {
            Tape t;
            BoundExtractor bx = bind(t, p);
            return t.value(attr_loss(t, extract(t, bx, t.leaf(emb)), t.leaf(target), f)).at(0, 0);
        };
        Tape t;
        BoundExtractor bx = bind(t, p);
        Val loss = attr_loss(t, extract(t, bx, t.leaf(emb)), t.leaf(target), f);
        t.backward(loss);

        Mat* mats[] = {&p.w1, &p.b1, &p.w2, &p.b2};
        Val vals[] = {bx.w1, bx.b1, bx.w2, bx.b2};
        for (int m = 0; m < 4; ++m)
            for (int r = 0; r < mats[m]->rows; ++r)
                for (int c = 0; c < mats[m]->cols; ++c) {
                    const double numeric = fd_derivative(eval, *mats[m], r, c, 1e-4);
                    CHECK(rel_diff(t.grad(vals[m]).at(r, c), numeric, 1e-6) < 1e-4);
                }
    }
}

TEST_CASE("extract is Lipschitz in its input for fixed parameters") {
    Rng rng(41);
    ExtractorParams p = ExtractorParams::init(6, 8, 5, rng);
    // Operator-norm bound via Frobenius norms: |f(x)-f(y)| <= |W1| |W2| |x-y|.
    const double bound = l2_norm(p.w1) * l2_norm(p.w2);
    for (int i = 0; i < 200; ++i) {
        const Mat x = rng.normal_mat(1, 6, 1.0);
        Mat y = x;
        for (double& v : y.data) v += rng.normal() * 0.1;
        const double num = l2_norm(sub(extract(p, x), extract(p, y)));
        const double den = l2_norm(sub(x, y));
        if (den > 0) CHECK(num / den <= bound + 1e-9);
    }
}
