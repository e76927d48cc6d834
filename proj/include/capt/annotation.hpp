#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "capt/backbone.hpp"
#include "capt/dataset.hpp"

namespace capt {

// Prompt template used to query the captioning client for one dataset.
struct AnnotationTemplate {
    std::string dataset;
    std::string text;  // contains [cls] exactly once

    void validate() const;
    std::string fill(const std::string& class_name) const;
};

// dataset name -> template, loaded from a JSON object file.
class TemplateTable {
  public:
    static TemplateTable load(const std::string& path);
    static TemplateTable from_entries(const std::vector<AnnotationTemplate>& entries);

    const AnnotationTemplate& for_dataset(const std::string& dataset) const;
    size_t size() const { return templates_.size(); }

  private:
    std::map<std::string, AnnotationTemplate> templates_;
};

struct ScoredCandidate {
    std::string attr;
    double score = 0.0;
};

struct AttributeAnnotation {
    std::string image_id;
    std::string class_name;
    std::vector<ScoredCandidate> candidates;
    std::string selected;
    bool swapped = false;

    void validate() const;
};

// Captioning client boundary. Exactly two methods; the stub keeps the
// whole pipeline runnable offline.
class VqaClient {
  public:
    virtual ~VqaClient() = default;
    virtual std::string generate(const ImageInput& img, const std::string& class_name,
                                 const std::string& prompt, uint64_t seed,
                                 double repetition_penalty) = 0;
    virtual bool healthy() = 0;
};

// Pure function of (image id, class name, seed); pixels are ignored.
class StubVqaClient : public VqaClient {
  public:
    std::string generate(const ImageInput& img, const std::string& class_name,
                         const std::string& prompt, uint64_t seed, double repetition_penalty) override;
    bool healthy() override { return true; }
};

// Posts generation requests to an external VQA service. Never used by
// tests; construction takes the endpoint base URL (http://host:port).
class HttpVqaClient : public VqaClient {
  public:
    explicit HttpVqaClient(std::string base_url) : base_url_(std::move(base_url)) {}
    std::string generate(const ImageInput& img, const std::string& class_name,
                         const std::string& prompt, uint64_t seed, double repetition_penalty) override;
    bool healthy() override;

  private:
    std::string base_url_;
};

enum class VqaClientKind { kExternalVqa, kDeterministicStub };

struct VqaClientConfig {
    VqaClientKind kind = VqaClientKind::kDeterministicStub;
    std::string endpoint;  // external client only
    std::vector<uint64_t> seeds = {0, 1, 2};
    double repetition_penalty = 100.0;

    void validate() const;
    std::unique_ptr<VqaClient> make_client() const;
};

// Lowercase, strip punctuation, keep the first word. Empty result means
// the generation is unusable.
std::string clean_candidate(const std::string& raw);

std::vector<std::string> generate_candidates(const ImageInput& img, const std::string& class_name,
                                             const AnnotationTemplate& tmpl, const VqaClientConfig& cfg,
                                             VqaClient& client);

// cos(plain image embedding, text embedding of "A photo of a <attr> <cls>").
double score_candidate(const Backbone& backbone, const ImageInput& img, const std::string& attribute,
                       const std::string& class_name);

// Argmax by score; ties break to the lowest index.
std::string select_attribute(const std::vector<std::string>& candidates,
                             const std::vector<double>& scores);

// JSONL persistence. One record per line, schema:
// {"image_id", "class_name", "candidates": [{"attr", "score"}], "selected", "swapped"}
std::string to_jsonl(const AttributeAnnotation& a);
AttributeAnnotation from_jsonl(const std::string& line);
std::map<std::string, AttributeAnnotation> load_annotations(const std::string& path);

struct AnnotateOptions {
    bool force = false;
    bool swap_attributes = false;
    int retries = 2;
};

struct AnnotateFailure {
    std::string image_id;
    std::string error;
};

struct AnnotateResult {
    int written = 0;
    int skipped = 0;
    std::vector<AnnotateFailure> failures;

    bool ok() const { return failures.empty(); }
};

// Annotates every image in the manifest, appending one JSONL record per
// image. Re-runs skip ids already present unless forced. On partial
// failure the completed records stay in place and a failure manifest is
// written next to the output (<out>.failures.json).
AnnotateResult annotate_dataset(const DatasetManifest& manifest, const TemplateTable& templates,
                                const VqaClientConfig& cfg, const Backbone& backbone,
                                const std::string& out_path, const AnnotateOptions& options);

// Variant with an injected client (test doubles, shared connections).
AnnotateResult annotate_dataset(const DatasetManifest& manifest, const TemplateTable& templates,
                                const VqaClientConfig& cfg, VqaClient& client, const Backbone& backbone,
                                const std::string& out_path, const AnnotateOptions& options);

}  // namespace capt
