#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "capt/annotation.hpp"
#include "doctest.h"
#include "testing_support.hpp"

using namespace capt;
using namespace capt::testing;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

DatasetManifest stub_manifest(int per_class, const std::string& name = "synthpets") {
    DatasetManifest m;
    m.name = name;
    m.class_names = {"dotted_cat", "striped_dog"};
    m.is_base = {true, true};
    int counter = 0;
    for (const std::string& cls : m.class_names)
        for (int i = 0; i < per_class; ++i) {
            ImageRecord rec;
            rec.path = "synthetic:" + std::to_string(counter);
            rec.id = "img" + std::to_string(counter);
            rec.class_name = cls;
            m.images.push_back(rec);
            ++counter;
        }
    return m;
}

TemplateTable stub_templates(const std::string& dataset = "synthpets") {
    return TemplateTable::from_entries(
        {{dataset, "Describe a one-word adjective such as color for the [cls] image."}});
}

// Client that fails with a transport error the first `fail_count` calls
// for a chosen image id.
class FlakyClient : public VqaClient {
  public:
    FlakyClient(std::string bad_id, int fail_count) : bad_id_(std::move(bad_id)), fails_left_(fail_count) {}

    std::string generate(const ImageInput& img, const std::string& class_name,
                         const std::string& prompt, uint64_t seed, double rp) override {
        if (img.id == bad_id_ && fails_left_ > 0) {
            --fails_left_;
            throw TransportError("synthetic outage");
        }
        return stub_.generate(img, class_name, prompt, seed, rp);
    }
    bool healthy() override { return true; }

  private:
    std::string bad_id_;
    int fails_left_;
    StubVqaClient stub_;
};

}  // namespace

TEST_CASE("annotation template validation and filling") {
    AnnotationTemplate ok{"flowers102", "Describe the color of the [cls] flower in one word."};
    ok.validate();
    CHECK(ok.fill("rose") == "Describe the color of the rose flower in one word.");
    CHECK(ok.fill("water_lily") == "Describe the color of the water lily flower in one word.");

    CHECK_THROWS_AS((AnnotationTemplate{"x", "no placeholder"}.validate()), ConfigError);
    CHECK_THROWS_AS((AnnotationTemplate{"x", "[cls] and [cls]"}.validate()), ConfigError);
}

TEST_CASE("shipped template table covers the standard datasets") {
    const TemplateTable table = TemplateTable::load(std::string(CAPT_SOURCE_DIR) + "/data/vqa_templates.json");
    CHECK(table.size() == 10);
    CHECK(table.for_dataset("flowers102").text ==
          "Describe the color of the [cls] flower in one word.");
    CHECK(table.for_dataset("eurosat").text ==
          "Describe a one-word adjective that best describes the natural surroundings in this "
          "satellite image of [cls].");
    for (const char* ds : {"imagenet", "caltech101", "oxford_pets", "flowers102", "fgvc_aircraft",
                           "stanford_cars", "food101", "sun397", "eurosat", "ucf101"})
        CHECK_NOTHROW(table.for_dataset(ds));
    CHECK_THROWS_AS(table.for_dataset("unknown_dataset"), InputError);
}

TEST_CASE("stub client is a pure function of (image id, class, seed)") {
    StubVqaClient c1, c2;
    const ImageInput img = random_image(1);
    const std::string a = c1.generate(img, "cat", "prompt A", 3, 100.0);
    CHECK(a == c2.generate(img, "cat", "prompt B", 3, 50.0));  // prompt/penalty ignored
    CHECK(a == c1.generate(img, "cat", "prompt A", 3, 100.0));
    CHECK(c1.generate(img, "cat", "p", 4, 100.0) != a);  // different seed usually differs
    CHECK_FALSE(c1.generate(img, "dog", "p", 3, 100.0).empty());
}

TEST_CASE("clean_candidate normalizes generations") {
    CHECK(clean_candidate("Green!") == "green");
    CHECK(clean_candidate("bright red") == "bright");
    CHECK(clean_candidate("  RED, shiny ") == "red");
    CHECK(clean_candidate("one-word") == "one-word");
    CHECK(clean_candidate("   ") == "");
    CHECK(clean_candidate("!!!") == "");
}

TEST_CASE("generate_candidates: cardinality and error paths") {
    const AnnotationTemplate tmpl{"synthpets", "Describe the [cls]."};
    StubVqaClient client;
    VqaClientConfig cfg;
    const ImageInput img = random_image(2);

    cfg.seeds = {0, 1, 2};
    CHECK(generate_candidates(img, "cat", tmpl, cfg, client).size() == 3);
    cfg.seeds = {5};
    CHECK(generate_candidates(img, "cat", tmpl, cfg, client).size() == 1);

    // Repeated runs are identical.
    cfg.seeds = {0, 1, 2};
    CHECK(generate_candidates(img, "cat", tmpl, cfg, client) ==
          generate_candidates(img, "cat", tmpl, cfg, client));

    CHECK_THROWS_AS(generate_candidates(img, "", tmpl, cfg, client), InputError);
    cfg.seeds = {};
    CHECK_THROWS_AS(generate_candidates(img, "cat", tmpl, cfg, client), ConfigError);
    cfg = VqaClientConfig{};
    cfg.repetition_penalty = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("score_candidate matches the plain-encoder cosine") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    const ImageInput img = random_image(3);
    const double score = score_candidate(b, img, "red", "dotted_cat");
    CHECK(score >= -1.0);
    CHECK(score <= 1.0);

    const Mat ie = b.image_embedding(img);  // no visual prompts
    const Mat te = b.text_embedding(b.embed_tokens("A photo of a red dotted cat"));
    const double want = dot(ie, te) / (l2_norm(ie) * l2_norm(te));
    CHECK(score == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("select_attribute: argmax with documented tie-break") {
    CHECK(select_attribute({"a", "b", "c"}, {0.2, 0.5, 0.3}) == "b");
    CHECK(select_attribute({"a", "b"}, {0.4, 0.4}) == "a");
    CHECK(select_attribute({"only"}, {0.1}) == "only");
    CHECK_THROWS_AS(select_attribute({}, {}), InputError);
    CHECK_THROWS_AS(select_attribute({"a"}, {0.1, 0.2}), InputError);
}

TEST_CASE("annotation JSONL round-trip is lossless") {
    Rng rng(31);
    for (int i = 0; i < 50; ++i) {
        AttributeAnnotation a;
        a.image_id = "img" + std::to_string(i);
        a.class_name = "class_" + std::to_string(rng.below(5));
        const int n = 1 + static_cast<int>(rng.below(4));
        double best = -2;
        for (int c = 0; c < n; ++c) {
            a.candidates.push_back({"attr" + std::to_string(c), rng.normal()});
            best = std::max(best, a.candidates.back().score);
        }
        for (const auto& cand : a.candidates)
            if (cand.score == best) {
                a.selected = cand.attr;
                break;
            }
        a.swapped = rng.below(2) == 0;

        const AttributeAnnotation back = from_jsonl(to_jsonl(a));
        CHECK(back.image_id == a.image_id);
        CHECK(back.class_name == a.class_name);
        CHECK(back.selected == a.selected);
        CHECK(back.swapped == a.swapped);
        REQUIRE(back.candidates.size() == a.candidates.size());
        for (size_t c = 0; c < a.candidates.size(); ++c) {
            CHECK(back.candidates[c].attr == a.candidates[c].attr);
            CHECK(back.candidates[c].score == a.candidates[c].score);  // exact
        }
    }
    CHECK_THROWS_AS(from_jsonl("not json"), InputError);
}

TEST_CASE("annotate_dataset: end-to-end stub run, idempotence, force") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    const DatasetManifest manifest = stub_manifest(5);  // 10 images
    const TemplateTable templates = stub_templates();
    VqaClientConfig cfg;  // stub client
    const std::string out = temp_path("capt_ann_test.jsonl");
    std::filesystem::remove(out);

    AnnotateOptions options;
    const AnnotateResult r1 = annotate_dataset(manifest, templates, cfg, b, out, options);
    CHECK(r1.written == 10);
    CHECK(r1.skipped == 0);
    CHECK(r1.ok());

    // One JSONL line per image; parsed records validate and match memory.
    std::ifstream is(out);
    int lines = 0;
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 10);

    const auto loaded = load_annotations(out);
    CHECK(loaded.size() == 10);
    for (const auto& [id, a] : loaded) {
        a.validate();
        CHECK(a.candidates.size() == 3);
        CHECK_FALSE(a.swapped);
        // Selected attains the maximum stored score.
        double best = -2;
        for (const auto& c : a.candidates) best = std::max(best, c.score);
        for (const auto& c : a.candidates)
            if (c.attr == a.selected) CHECK(c.score == best);
    }

    // Idempotent re-run.
    const AnnotateResult r2 = annotate_dataset(manifest, templates, cfg, b, out, options);
    CHECK(r2.written == 0);
    CHECK(r2.skipped == 10);
    CHECK(load_annotations(out).size() == 10);

    // Forced re-run rewrites in place.
    options.force = true;
    const AnnotateResult r3 = annotate_dataset(manifest, templates, cfg, b, out, options);
    CHECK(r3.written == 10);
    CHECK(load_annotations(out).size() == 10);
    std::filesystem::remove(out);
}

TEST_CASE("annotate_dataset: swap mode exchanges attributes across classes") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    const DatasetManifest manifest = stub_manifest(4);
    const TemplateTable templates = stub_templates();
    VqaClientConfig cfg;
    const std::string plain_out = temp_path("capt_ann_plain.jsonl");
    const std::string swap_out = temp_path("capt_ann_swap.jsonl");
    std::filesystem::remove(plain_out);
    std::filesystem::remove(swap_out);

    AnnotateOptions options;
    annotate_dataset(manifest, templates, cfg, b, plain_out, options);
    options.swap_attributes = true;
    annotate_dataset(manifest, templates, cfg, b, swap_out, options);

    const auto plain = load_annotations(plain_out);
    const auto swapped = load_annotations(swap_out);
    REQUIRE(plain.size() == swapped.size());

    // Every record flagged; per-record invariants still hold; and each
    // image now carries a tuple computed for the other class.
    std::set<std::string> cat_selected_plain, dog_selected_plain, cat_selected_swapped;
    for (const auto& [id, a] : swapped) {
        CHECK(a.swapped);
        a.validate();
    }
    for (const auto& [id, a] : plain) {
        if (a.class_name == "dotted_cat") cat_selected_plain.insert(a.selected);
        else dog_selected_plain.insert(a.selected);
    }
    for (const auto& [id, a] : swapped)
        if (a.class_name == "dotted_cat") cat_selected_swapped.insert(a.selected);
    // The swapped cat attributes come from the dog pool.
    for (const std::string& s : cat_selected_swapped) CHECK(dog_selected_plain.count(s) == 1);

    std::filesystem::remove(plain_out);
    std::filesystem::remove(swap_out);
}

TEST_CASE("annotate_dataset: transport retries and the failure manifest") {
    const Backbone b = Backbone::make_synthetic(tiny_arch(), 7);
    const DatasetManifest manifest = stub_manifest(3);  // ids img0..img5
    const TemplateTable templates = stub_templates();
    VqaClientConfig cfg;
    const std::string out = temp_path("capt_ann_fail.jsonl");
    std::filesystem::remove(out);
    std::filesystem::remove(out + ".failures.json");

    AnnotateOptions options;
    options.retries = 2;

    SUBCASE("a transient failure is retried and succeeds") {
        FlakyClient client("img2", 1);
        const AnnotateResult r = annotate_dataset(manifest, templates, cfg, client, b, out, options);
        CHECK(r.written == 6);
        CHECK(r.ok());
        CHECK_FALSE(std::filesystem::exists(out + ".failures.json"));
    }

    SUBCASE("a persistent failure lands in the failure manifest") {
        FlakyClient client("img2", 1000);
        const AnnotateResult r = annotate_dataset(manifest, templates, cfg, client, b, out, options);
        CHECK(r.written == 5);
        REQUIRE(r.failures.size() == 1);
        CHECK(r.failures[0].image_id == "img2");
        CHECK_FALSE(r.ok());
        CHECK(std::filesystem::exists(out + ".failures.json"));
        // Completed records are in place.
        CHECK(load_annotations(out).size() == 5);
    }

    std::filesystem::remove(out);
    std::filesystem::remove(out + ".failures.json");
}
