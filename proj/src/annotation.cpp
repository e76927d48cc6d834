#include "capt/annotation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "httplib.h"
#include "json.hpp"

namespace capt {

using nlohmann::json;

namespace {

size_t count_occurrences(const std::string& s, const std::string& needle) {
    size_t count = 0, pos = 0;
    while ((pos = s.find(needle, pos)) != std::string::npos) {
        ++count;
        pos += needle.size();
    }
    return count;
}

std::string readable_class(const std::string& name) {
    std::string out = name;
    std::replace(out.begin(), out.end(), '_', ' ');
    return out;
}

// Short adjectives the stub draws from; enough spread that distinct
// seeds usually produce distinct candidates.
const char* kStubWords[] = {
    "red",    "green",  "blue",   "yellow", "orange", "purple", "white",  "black",
    "small",  "large",  "round",  "square", "striped", "spotted", "fluffy", "smooth",
    "shiny",  "dull",   "bright", "dark",   "tall",   "short",  "wide",   "narrow",
    "soft",   "hard",   "old",    "young",  "wild",   "calm",   "fast",   "slow"};

}  // namespace

void AnnotationTemplate::validate() const {
    if (count_occurrences(text, "[cls]") != 1)
        throw ConfigError("annotation template for '" + dataset + "' must contain [cls] exactly once: '" +
                          text + "'");
}

std::string AnnotationTemplate::fill(const std::string& class_name) const {
    validate();
    std::string out = text;
    const size_t pos = out.find("[cls]");
    out.replace(pos, 5, readable_class(class_name));
    return out;
}

TemplateTable TemplateTable::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open template table at " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid template table JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": template table must be a JSON object");
    std::vector<AnnotationTemplate> entries;
    for (auto it = j.begin(); it != j.end(); ++it)
        entries.push_back(AnnotationTemplate{it.key(), it.value().get<std::string>()});
    return from_entries(entries);
}

TemplateTable TemplateTable::from_entries(const std::vector<AnnotationTemplate>& entries) {
    TemplateTable table;
    for (const AnnotationTemplate& e : entries) {
        e.validate();
        table.templates_[e.dataset] = e;
    }
    return table;
}

const AnnotationTemplate& TemplateTable::for_dataset(const std::string& dataset) const {
    auto it = templates_.find(dataset);
    if (it == templates_.end())
        throw InputError("no annotation template for dataset '" + dataset + "'");
    return it->second;
}

void AttributeAnnotation::validate() const {
    if (candidates.empty()) throw InputError("annotation " + image_id + ": no candidates");
    double best = -1e300;
    bool found = false;
    for (const ScoredCandidate& c : candidates) {
        if (!std::isfinite(c.score)) throw InputError("annotation " + image_id + ": non-finite score");
        best = std::max(best, c.score);
        if (c.attr == selected) found = true;
    }
    if (!found) throw InputError("annotation " + image_id + ": selected not among candidates");
    for (const ScoredCandidate& c : candidates)
        if (c.attr == selected && c.score == best) return;
    throw InputError("annotation " + image_id + ": selected does not attain the maximum score");
}

std::string StubVqaClient::generate(const ImageInput& img, const std::string& class_name,
                                    const std::string& prompt, uint64_t seed,
                                    double repetition_penalty) {
    (void)prompt;
    (void)repetition_penalty;
    Digest d;
    d.update(img.id);
    d.update("\x1f");
    d.update(class_name);
    d.update_u64(seed);
    return kStubWords[d.value() % (sizeof(kStubWords) / sizeof(kStubWords[0]))];
}

std::string HttpVqaClient::generate(const ImageInput& img, const std::string& class_name,
                                    const std::string& prompt, uint64_t seed,
                                    double repetition_penalty) {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(120);
    json body = {{"image_id", img.id},
                 {"class_name", class_name},
                 {"prompt", prompt},
                 {"seed", seed},
                 {"repetition_penalty", repetition_penalty}};
    auto res = cli.Post("/generate", body.dump(), "application/json");
    if (!res) throw TransportError("VQA client: no response from " + base_url_);
    if (res->status != 200)
        throw TransportError("VQA client: HTTP " + std::to_string(res->status) + " from " + base_url_);
    try {
        return json::parse(res->body).at("text").get<std::string>();
    } catch (const json::exception& e) {
        throw TransportError(std::string("VQA client: bad response payload: ") + e.what());
    }
}

bool HttpVqaClient::healthy() {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(5);
    auto res = cli.Get("/health");
    return res && res->status == 200;
}

void VqaClientConfig::validate() const {
    if (seeds.empty()) throw ConfigError("vqa client: need at least one generation seed");
    if (repetition_penalty <= 0.0) throw ConfigError("vqa client: repetition_penalty must be positive");
    if (kind == VqaClientKind::kExternalVqa && endpoint.empty())
        throw ConfigError("vqa client: external client needs an endpoint");
}

std::unique_ptr<VqaClient> VqaClientConfig::make_client() const {
    validate();
    if (kind == VqaClientKind::kDeterministicStub) return std::make_unique<StubVqaClient>();
    return std::make_unique<HttpVqaClient>(endpoint);
}

std::string clean_candidate(const std::string& raw) {
    std::string lowered;
    for (char c : raw) {
        const unsigned char u = static_cast<unsigned char>(c);
        if (std::isalnum(u) || c == '-' || c == ' ' || c == '\t' || c == '\n')
            lowered.push_back(static_cast<char>(std::tolower(u)));
        else
            lowered.push_back(' ');
    }
    size_t begin = lowered.find_first_not_of(" \t\n");
    if (begin == std::string::npos) return "";
    size_t end = lowered.find_first_of(" \t\n", begin);
    if (end == std::string::npos) end = lowered.size();
    return lowered.substr(begin, end - begin);
}

std::vector<std::string> generate_candidates(const ImageInput& img, const std::string& class_name,
                                             const AnnotationTemplate& tmpl, const VqaClientConfig& cfg,
                                             VqaClient& client) {
    if (class_name.empty()) throw InputError("generate_candidates: empty class name");
    cfg.validate();
    const std::string prompt = tmpl.fill(class_name);
    std::vector<std::string> out;
    for (uint64_t seed : cfg.seeds) {
        const std::string raw = client.generate(img, class_name, prompt, seed, cfg.repetition_penalty);
        const std::string cleaned = clean_candidate(raw);
        if (cleaned.empty()) {
            std::fprintf(stderr, "warning: dropped empty generation for %s (seed %llu)\n", img.id.c_str(),
                         static_cast<unsigned long long>(seed));
            continue;
        }
        out.push_back(cleaned);
    }
    if (out.empty()) throw InputError("generate_candidates: no usable candidate for " + img.id);
    return out;
}

double score_candidate(const Backbone& backbone, const ImageInput& img, const std::string& attribute,
                       const std::string& class_name) {
    const Mat img_emb = backbone.image_embedding(img);
    const std::string text = "A photo of a " + attribute + " " + readable_class(class_name);
    const Mat txt_emb = backbone.text_embedding(backbone.embed_tokens(text));
    const double na = l2_norm(img_emb), nb = l2_norm(txt_emb);
    if (na == 0.0 || nb == 0.0) throw InputError("score_candidate: zero-norm embedding");
    return dot(img_emb, txt_emb) / (na * nb);
}

std::string select_attribute(const std::vector<std::string>& candidates,
                             const std::vector<double>& scores) {
    if (candidates.empty()) throw InputError("select_attribute: empty candidate list");
    if (candidates.size() != scores.size()) throw InputError("select_attribute: length mismatch");
    size_t best = 0;
    for (size_t i = 1; i < candidates.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return candidates[best];
}

std::string to_jsonl(const AttributeAnnotation& a) {
    json cands = json::array();
    for (const ScoredCandidate& c : a.candidates) cands.push_back({{"attr", c.attr}, {"score", c.score}});
    const json j = {{"image_id", a.image_id},
                    {"class_name", a.class_name},
                    {"candidates", cands},
                    {"selected", a.selected},
                    {"swapped", a.swapped}};
    return j.dump();
}

AttributeAnnotation from_jsonl(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw InputError(std::string("invalid annotation record: ") + e.what());
    }
    AttributeAnnotation a;
    a.image_id = j.at("image_id").get<std::string>();
    a.class_name = j.at("class_name").get<std::string>();
    for (const json& c : j.at("candidates"))
        a.candidates.push_back({c.at("attr").get<std::string>(), c.at("score").get<double>()});
    a.selected = j.at("selected").get<std::string>();
    a.swapped = j.at("swapped").get<bool>();
    return a;
}

std::map<std::string, AttributeAnnotation> load_annotations(const std::string& path) {
    std::map<std::string, AttributeAnnotation> out;
    std::ifstream is(path);
    if (!is) return out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        AttributeAnnotation a = from_jsonl(line);
        out[a.image_id] = std::move(a);
    }
    return out;
}

namespace {

AnnotateResult annotate_with_client(const DatasetManifest& manifest, const TemplateTable& templates,
                                    const VqaClientConfig& cfg, VqaClient& client,
                                    const Backbone& backbone, const std::string& out_path,
                                    const AnnotateOptions& options) {
    const AnnotationTemplate& tmpl = templates.for_dataset(manifest.name);
    std::map<std::string, AttributeAnnotation> existing;
    if (!options.force) existing = load_annotations(out_path);

    AnnotateResult result;
    std::vector<AttributeAnnotation> fresh;
    for (const ImageRecord& rec : manifest.images) {
        if (existing.count(rec.id)) {
            ++result.skipped;
            continue;
        }
        int attempts_left = 1 + std::max(0, options.retries);
        while (true) {
            try {
                ImageInput img = load_image(rec.path, backbone.arch().image_size);
                img.id = rec.id;
                const std::vector<std::string> cands =
                    generate_candidates(img, rec.class_name, tmpl, cfg, client);
                std::vector<double> scores;
                scores.reserve(cands.size());
                for (const std::string& c : cands)
                    scores.push_back(score_candidate(backbone, img, c, rec.class_name));
                AttributeAnnotation a;
                a.image_id = rec.id;
                a.class_name = rec.class_name;
                for (size_t i = 0; i < cands.size(); ++i) a.candidates.push_back({cands[i], scores[i]});
                a.selected = select_attribute(cands, scores);
                a.validate();
                fresh.push_back(std::move(a));
                break;
            } catch (const TransportError& e) {
                if (--attempts_left > 0) continue;
                result.failures.push_back({rec.id, e.what()});
                break;
            } catch (const std::exception& e) {
                result.failures.push_back({rec.id, e.what()});
                break;
            }
        }
    }

    if (options.swap_attributes && !fresh.empty()) {
        // Exchange whole candidate tuples between classes (cyclic shift in
        // manifest class order), so each image carries an unrelated class's
        // attribute while per-record invariants still hold.
        std::vector<std::vector<size_t>> by_class(manifest.class_names.size());
        for (size_t i = 0; i < fresh.size(); ++i)
            by_class[manifest.class_index(fresh[i].class_name)].push_back(i);
        std::vector<int> populated;
        for (size_t c = 0; c < by_class.size(); ++c)
            if (!by_class[c].empty()) populated.push_back(static_cast<int>(c));
        std::vector<AttributeAnnotation> originals = fresh;
        if (populated.size() >= 2) {
            for (size_t pi = 0; pi < populated.size(); ++pi) {
                const int dst = populated[pi];
                const int src = populated[(pi + 1) % populated.size()];
                const auto& dst_ids = by_class[dst];
                const auto& src_ids = by_class[src];
                for (size_t k = 0; k < dst_ids.size(); ++k) {
                    const AttributeAnnotation& donor = originals[src_ids[k % src_ids.size()]];
                    fresh[dst_ids[k]].candidates = donor.candidates;
                    fresh[dst_ids[k]].selected = donor.selected;
                }
            }
        }
        for (AttributeAnnotation& a : fresh) a.swapped = true;
    }

    {
        // Forced runs rewrite the file; incremental runs append.
        std::ofstream os(out_path, options.force ? std::ios::trunc : std::ios::app);
        if (!os) throw InputError("cannot open annotation output " + out_path);
        for (const AttributeAnnotation& a : fresh) {
            os << to_jsonl(a) << "\n";
            ++result.written;
        }
    }

    const std::string failure_path = out_path + ".failures.json";
    if (!result.failures.empty()) {
        json j = json::array();
        for (const AnnotateFailure& f : result.failures)
            j.push_back({{"image_id", f.image_id}, {"error", f.error}});
        std::ofstream os(failure_path);
        os << j.dump(2) << "\n";
    } else {
        std::error_code ec;
        std::filesystem::remove(failure_path, ec);
    }
    return result;
}

}  // namespace

AnnotateResult annotate_dataset(const DatasetManifest& manifest, const TemplateTable& templates,
                                const VqaClientConfig& cfg, const Backbone& backbone,
                                const std::string& out_path, const AnnotateOptions& options) {
    std::unique_ptr<VqaClient> client = cfg.make_client();
    return annotate_with_client(manifest, templates, cfg, *client, backbone, out_path, options);
}

AnnotateResult annotate_dataset(const DatasetManifest& manifest, const TemplateTable& templates,
                                const VqaClientConfig& cfg, VqaClient& client, const Backbone& backbone,
                                const std::string& out_path, const AnnotateOptions& options) {
    return annotate_with_client(manifest, templates, cfg, client, backbone, out_path, options);
}

}  // namespace capt
