#include <cmath>

#include "capt/pipeline.hpp"
#include "doctest.h"
#include "testing_support.hpp"

using namespace capt;
using namespace capt::testing;

namespace {

std::vector<std::string> test_pool_lines() {
    return {"a photo of a [a] [cls].", "a picture of a [a] [cls]."};
}

Pipeline make_pipeline(const Backbone& b, ModelConfig cfg, const std::vector<std::string>& classes) {
    return Pipeline(b, std::move(cfg), ClassVocabulary::build(b, classes),
                    TemplatePool::from_lines(test_pool_lines()));
}

ModelConfig tiny_model_config(uint64_t seed = 5) {
    ModelConfig cfg;
    cfg.context_length = 3;
    cfg.heads = 2;
    cfg.visual_tokens = 1;
    cfg.visual_depth = 2;
    cfg.seed = seed;
    return cfg;
}

// Independent CoOp-style objective: assembles [u, extra rows, class
// tokens] itself and computes softmax cross-entropy over cosine
// similarities with its own arithmetic. Shares only the frozen encoder
// entry points with the implementation under test.
double coop_reference_loss(const Backbone& b, const Mat& ctx, const Mat& extra_row,
                           const std::vector<std::string>& class_names, const ImageInput& img, int y,
                           double tau) {
    const Mat img_emb = b.image_embedding(img);

    std::vector<double> cosines;
    for (const std::string& cls : class_names) {
        const TokenSequence seg = b.embed_tokens(cls);
        Mat rows(ctx.rows + 1 + seg.rows.rows, ctx.cols);
        for (int i = 0; i < ctx.rows; ++i)
            for (int j = 0; j < ctx.cols; ++j) rows.at(i, j) = ctx.at(i, j);
        for (int j = 0; j < ctx.cols; ++j) rows.at(ctx.rows, j) = extra_row.at(0, j);
        for (int i = 0; i < seg.rows.rows; ++i)
            for (int j = 0; j < ctx.cols; ++j) rows.at(ctx.rows + 1 + i, j) = seg.rows.at(i, j);

        TokenSequence seq;
        seq.rows = rows;
        seq.eos_index = rows.rows - 1;
        const Mat txt = b.text_embedding(seq);

        double d = 0, ni = 0, nt = 0;
        for (int j = 0; j < txt.cols; ++j) {
            d += img_emb.at(0, j) * txt.at(0, j);
            ni += img_emb.at(0, j) * img_emb.at(0, j);
            nt += txt.at(0, j) * txt.at(0, j);
        }
        cosines.push_back(d / (std::sqrt(ni) * std::sqrt(nt)));
    }

    double mx = cosines[0] / tau;
    for (double c : cosines) mx = std::max(mx, c / tau);
    double z = 0;
    for (double c : cosines) z += std::exp(c / tau - mx);
    return -(cosines[y] / tau - mx - std::log(z));
}

}  // namespace

TEST_CASE("template pool: placeholders, instantiation, file loading") {
    CHECK_THROWS_AS(TemplatePool::from_lines({"no placeholders here"}), ConfigError);
    CHECK_THROWS_AS(TemplatePool::from_lines({"[a] [a] [cls]"}), ConfigError);
    CHECK_THROWS_AS(TemplatePool::from_lines({}), ConfigError);

    const TemplatePool pool = TemplatePool::from_lines(test_pool_lines());
    CHECK(pool.size() == 2);
    CHECK(pool.instantiate(0, "green", "tree frog") == "a photo of a green tree frog.");

    const TemplatePool shipped = TemplatePool::load(std::string(CAPT_SOURCE_DIR) + "/data/templates_attr80.txt");
    CHECK(shipped.size() == 80);

    CHECK(fill_placeholders("x [a] [cls].", "", "dog") == "x dog.");
}

TEST_CASE("class_probabilities: uniform, closed form, normalization") {
    // All prompt embeddings identical -> exactly uniform.
    const Mat img(1, 3, {0.2, -0.4, 1.0});
    const Mat p(1, 3, {1.0, 0.5, -0.2});
    const Mat u = class_probabilities(img, {p, p, p, p}, 1.0);
    for (int c = 0; c < 4; ++c) CHECK(u.at(0, c) == doctest::Approx(0.25).epsilon(1e-12));

    // cosines (1, 0) at tau=1 -> (e/(e+1), 1/(e+1)).
    const Mat img2(1, 2, {1, 0});
    const Mat probs = class_probabilities(img2, {Mat(1, 2, {2, 0}), Mat(1, 2, {0, 3})}, 1.0);
    const double e = std::exp(1.0);
    CHECK(probs.at(0, 0) == doctest::Approx(e / (e + 1)).epsilon(1e-9));
    CHECK(probs.at(0, 1) == doctest::Approx(1 / (e + 1)).epsilon(1e-9));
    CHECK(probs.at(0, 0) == doctest::Approx(0.731058).epsilon(1e-5));

    // Normalization property over random draws.
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) {
        const int C = 2 + static_cast<int>(rng.below(5));
        std::vector<Mat> prompts;
        for (int c = 0; c < C; ++c) prompts.push_back(rng.normal_mat(1, 6, 1.0));
        const Mat pr = class_probabilities(rng.normal_mat(1, 6, 1.0), prompts, 0.7);
        double sum = 0;
        for (int c = 0; c < C; ++c) {
            CHECK(pr.at(0, c) > 0.0);
            CHECK(pr.at(0, c) < 1.0);
            sum += pr.at(0, c);
        }
        CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("class_probabilities: cosine scale invariance") {
    Rng rng(78);
    const Mat img = rng.normal_mat(1, 5, 1.0);
    std::vector<Mat> prompts;
    for (int c = 0; c < 3; ++c) prompts.push_back(rng.normal_mat(1, 5, 1.0));
    const Mat base = class_probabilities(img, prompts, 0.5);

    Mat img_scaled = scale(img, 3.7);
    std::vector<Mat> prompts_scaled = prompts;
    prompts_scaled[1] = scale(prompts_scaled[1], 0.2);
    const Mat scaled = class_probabilities(img_scaled, prompts_scaled, 0.5);
    for (int c = 0; c < 3; ++c)
        CHECK(std::fabs(base.at(0, c) - scaled.at(0, c)) < 1e-6);

    CHECK_THROWS_AS(class_probabilities(Mat(1, 5), prompts, 0.5), InputError);  // zero-norm image
    CHECK_THROWS_AS(class_probabilities(img, prompts, 0.0), ConfigError);
    CHECK_THROWS_AS(class_probabilities(img, {}, 0.5), InputError);
}

TEST_CASE("ce_loss: hand values, range checks, monotonicity") {
    CHECK(ce_loss(Mat(1, 3, {0.0, 1.0, 0.0}), 1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ce_loss(Mat(1, 4, {0.25, 0.25, 0.25, 0.25}), 2) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(ce_loss(Mat(1, 2, {0.5, 0.5}), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(ce_loss(Mat(1, 2, {0.5, 0.5}), 2), InputError);
    CHECK_THROWS_AS(ce_loss(Mat(1, 2, {0.5, 0.5}), -1), InputError);

    // Strictly decreasing in probs[y].
    double prev = 1e9;
    for (double py : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        const double l = ce_loss(Mat(1, 2, {py, 1 - py}), 0);
        CHECK(l < prev);
        CHECK(l >= 0.0);
        prev = l;
    }
}

TEST_CASE("reg_loss: identity, hand value, averaging") {
    const Mat learned(1, 2, {0.3, -0.7});
    CHECK(reg_loss(learned, {learned, learned, learned}, 1) == 0.0);
    CHECK(reg_loss(learned, {learned}, 2) == 0.0);

    // N=1, g=1, difference (0.5, -0.5) -> 1.0
    const Mat tmpl(1, 2, {-0.2, -0.2});
    CHECK(reg_loss(learned, {tmpl}, 1) == doctest::Approx(1.0).epsilon(1e-12));

    // N=2 averages the per-template sums.
    const Mat t2(1, 2, {0.3, -0.7});
    CHECK(reg_loss(learned, {tmpl, t2}, 1) == doctest::Approx(0.5).epsilon(1e-12));

    Tape t;
    CHECK_THROWS_AS(reg_loss(t, t.leaf(learned), {tmpl}, 3), ConfigError);
    CHECK_THROWS_AS(reg_loss(t, t.leaf(learned), {}, 1), InputError);
}

TEST_CASE("loss weights: paper defaults and validation") {
    const LossWeights w;
    CHECK(w.lambda1 == 4.0);
    CHECK(w.lambda2 == 4.0);
    CHECK(w.f == 2);
    CHECK(w.g == 1);

    LossWeights bad;
    bad.f = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = LossWeights{};
    bad.lambda1 = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    CHECK(LossWeights{}.resolved_tau(b) == 1.0);  // synthetic backbone default
    LossWeights tw;
    tw.tau = 0.05;
    CHECK(tw.resolved_tau(b) == 0.05);
}

TEST_CASE("total loss: weighted combination and weight zeroing") {
    // Combination arithmetic with the hand-derived per-term values.
    Tape t;
    Val ce = t.leaf(Mat(1, 1, std::log(2.0)));
    Val attr = t.leaf(Mat(1, 1, 25.0));
    Val reg = t.leaf(Mat(1, 1, 1.0));
    Val total = t.add(ce, t.add(t.scale(attr, 4.0), t.scale(reg, 4.0)));
    CHECK(t.value(total).at(0, 0) == doctest::Approx(104.6931).epsilon(1e-4));

    // End-to-end: terms recombine exactly, and zero weights reduce to CE.
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    ModelConfig cfg = tiny_model_config();
    Pipeline pipeline = make_pipeline(b, cfg, {"ab", "cd"});

    TrainSample sample;
    sample.image = random_image(1);
    sample.label = 0;
    sample.attribute = "red";

    Tape t2;
    ModelParams params = ModelParams::init(cfg, b);
    BoundModel bound = bind_model(t2, params);
    const SampleLossVals v = pipeline.sample_loss(t2, bound, sample);
    const double got_total = t2.value(v.total).at(0, 0);
    const double want = t2.value(v.ce).at(0, 0) + 4.0 * t2.value(v.attr).at(0, 0) +
                        4.0 * t2.value(v.reg).at(0, 0);
    CHECK(got_total == doctest::Approx(want).epsilon(1e-12));

    ModelConfig zero_cfg = cfg;
    zero_cfg.weights.lambda1 = 0.0;
    zero_cfg.weights.lambda2 = 0.0;
    Pipeline zero_pipeline = make_pipeline(b, zero_cfg, {"ab", "cd"});
    Tape t3;
    BoundModel bound3 = bind_model(t3, params);
    const SampleLossVals vz = zero_pipeline.sample_loss(t3, bound3, sample);
    CHECK(t3.value(vz.total).at(0, 0) == doctest::Approx(t3.value(vz.ce).at(0, 0)).epsilon(1e-12));
}

TEST_CASE("structural reduction to the independent CoOp objective") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);

    ModelConfig cfg;
    cfg.context_length = 3;
    cfg.conditioning = Conditioning::kAdditive;  // zero-initialized projection
    cfg.visual_tokens = 0;                       // plain image encoder
    cfg.weights.lambda1 = 0.0;
    cfg.weights.lambda2 = 0.0;
    cfg.seed = 3;
    Pipeline pipeline = make_pipeline(b, cfg, {"ab", "cd"});

    ModelParams params = ModelParams::init(cfg, b);
    TrainSample sample;
    sample.image = random_image(2);
    sample.label = 1;
    sample.attribute = "blue";

    Tape t;
    BoundModel bound = bind_model(t, params);
    const SampleLossVals v = pipeline.sample_loss(t, bound, sample);

    // The reference consumes the same context and the same (constant)
    // attribute row but assembles and scores everything itself.
    const Mat img_emb = b.image_embedding(sample.image);
    const Mat attr_row = extract(params.extractor, img_emb);
    const double reference =
        coop_reference_loss(b, params.ctx.tokens, attr_row, {"ab", "cd"}, sample.image, 1, 1.0);
    CHECK(std::fabs(t.value(v.total).at(0, 0) - reference) < 1e-6);
}

TEST_CASE("batch loss averages terms over the batch") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    ModelConfig cfg = tiny_model_config();
    Pipeline pipeline = make_pipeline(b, cfg, {"ab", "cd"});
    ModelParams params = ModelParams::init(cfg, b);

    std::vector<TrainSample> batch;
    for (int i = 0; i < 3; ++i) {
        TrainSample s;
        s.image = random_image(10 + i);
        s.label = i % 2;
        s.attribute = i % 2 ? "red" : "blue";
        batch.push_back(std::move(s));
    }

    Tape t;
    BoundModel bound = bind_model(t, params);
    LossTerms terms;
    Val total = pipeline.batch_loss(t, bound, batch, &terms);

    double want = 0;
    for (const TrainSample& s : batch) {
        Tape ts;
        BoundModel bs = bind_model(ts, params);
        want += ts.value(pipeline.sample_loss(ts, bs, s).total).at(0, 0);
    }
    want /= 3.0;
    CHECK(t.value(total).at(0, 0) == doctest::Approx(want).epsilon(1e-10));
    CHECK(terms.total == doctest::Approx(terms.ce + 4 * terms.attr + 4 * terms.reg).epsilon(1e-9));

    CHECK_THROWS_AS(pipeline.batch_loss(t, bound, {}, nullptr), InputError);
}

TEST_CASE("total-loss gradients match finite differences for every group") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    ModelConfig cfg = tiny_model_config(11);
    Pipeline pipeline = make_pipeline(b, cfg, {"ab", "cd"});
    ModelParams params = ModelParams::init(cfg, b);
    // Non-degenerate attention output path.
    Rng wo_rng(55);
    params.conditioning.wo = wo_rng.normal_mat(8, 8, 0.3);

    TrainSample sample;
    sample.image = random_image(3);
    sample.label = 0;
    sample.attribute = "red";

    auto eval = [&]() {
        Tape t;
        BoundModel bound = bind_model(t, params);
        return t.value(pipeline.sample_loss(t, bound, sample).total).at(0, 0);
    };

    Tape t;
    BoundModel bound = bind_model(t, params);
    Val total = pipeline.sample_loss(t, bound, sample).total;
    t.backward(total);

    std::vector<Mat*> flat = flat_params(params);
    Rng pick(99);
    int checked = 0;
    for (size_t i = 0; i < flat.size(); ++i) {
        for (int rep = 0; rep < 3; ++rep) {
            const int r = static_cast<int>(pick.below(flat[i]->rows));
            const int c = static_cast<int>(pick.below(flat[i]->cols));
            const double numeric = fd_derivative(eval, *flat[i], r, c, 1e-4);
            const double analytic = t.grad(bound.flat[i]).at(r, c);
            INFO("param ", i, " (", r, ",", c, "): analytic ", analytic, " numeric ", numeric);
            CHECK(rel_diff(analytic, numeric, 1e-6) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked >= 3 * static_cast<int>(flat.size()));
}
