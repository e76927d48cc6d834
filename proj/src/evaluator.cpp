#include "capt/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "capt/extractor.hpp"
#include "capt/objective.hpp"
#include "json.hpp"

namespace capt {

using nlohmann::json;

double harmonic_mean(double base, double novel) {
    if (base < 0.0 || novel < 0.0) throw InputError("harmonic_mean: accuracies must be non-negative");
    if (base == 0.0 || novel == 0.0) return 0.0;
    return 2.0 * base * novel / (base + novel);
}

namespace {

struct SplitAccuracy {
    int correct = 0;
    int total = 0;
    std::map<std::string, std::pair<int, int>> per_class;  // correct, total

    double percent() const { return total == 0 ? 0.0 : 100.0 * correct / total; }
};

SplitAccuracy score_split(const Pipeline& pipeline, const ModelParams& params,
                          const DatasetManifest& manifest, const std::vector<std::string>& classes) {
    const ClassVocabulary vocab = ClassVocabulary::build(pipeline.backbone(), classes);
    std::map<std::string, int> index;
    for (size_t i = 0; i < classes.size(); ++i) index[classes[i]] = static_cast<int>(i);

    SplitAccuracy acc;
    for (const ImageRecord* rec : manifest.records("test")) {
        auto it = index.find(rec->class_name);
        if (it == index.end()) continue;
        ImageInput img = load_image(rec->path, pipeline.backbone().arch().image_size);
        img.id = rec->id;
        const Prediction pred = pipeline.classify(params, img, vocab);
        auto& pc = acc.per_class[rec->class_name];
        ++pc.second;
        ++acc.total;
        if (pred.predicted == it->second) {
            ++pc.first;
            ++acc.correct;
        }
    }
    return acc;
}

}  // namespace

EvalReport eval_base_to_novel(const Pipeline& pipeline, const ModelParams& params,
                              const DatasetManifest& manifest) {
    const std::vector<std::string> base = manifest.base_classes();
    const std::vector<std::string> novel = manifest.novel_classes();
    if (base.empty() || novel.empty())
        throw InputError("eval_base_to_novel: manifest must declare both base and novel classes");

    const SplitAccuracy base_acc = score_split(pipeline, params, manifest, base);
    const SplitAccuracy novel_acc = score_split(pipeline, params, manifest, novel);
    if (base_acc.total == 0 || novel_acc.total == 0)
        throw InputError("eval_base_to_novel: empty test split");

    EvalReport report;
    report.dataset = manifest.name;
    report.base_acc = base_acc.percent();
    report.novel_acc = novel_acc.percent();
    report.hm = harmonic_mean(report.base_acc, report.novel_acc);
    for (const auto& [cls, counts] : base_acc.per_class)
        report.per_class[cls] = 100.0 * counts.first / counts.second;
    for (const auto& [cls, counts] : novel_acc.per_class)
        report.per_class[cls] = 100.0 * counts.first / counts.second;
    return report;
}

DomainShiftReport eval_domain_shift(const Pipeline& pipeline, const ModelParams& params,
                                    const DatasetManifest& source,
                                    const std::vector<DatasetManifest>& targets) {
    DomainShiftReport report;
    if (targets.empty()) return report;

    const std::vector<std::string>& classes = source.class_names;
    const ClassVocabulary vocab = ClassVocabulary::build(pipeline.backbone(), classes);
    std::map<std::string, int> index;
    for (size_t i = 0; i < classes.size(); ++i) index[classes[i]] = static_cast<int>(i);

    double sum = 0.0;
    for (const DatasetManifest& target : targets) {
        int correct = 0, total = 0;
        for (const ImageRecord* rec : target.records("test")) {
            auto it = index.find(rec->class_name);
            if (it == index.end())
                throw InputError("domain shift target '" + target.name + "' uses class '" +
                                 rec->class_name + "' absent from the source vocabulary");
            ImageInput img = load_image(rec->path, pipeline.backbone().arch().image_size);
            img.id = rec->id;
            const Prediction pred = pipeline.classify(params, img, vocab);
            ++total;
            if (pred.predicted == it->second) ++correct;
        }
        const double acc = total == 0 ? 0.0 : 100.0 * correct / total;
        report.per_target.push_back({target.name, acc});
        sum += acc;
    }
    report.average = sum / static_cast<double>(targets.size());
    return report;
}

double analyze_attribute_fidelity(const Pipeline& pipeline, const ModelParams& params,
                                  const DatasetManifest& manifest,
                                  const std::map<std::string, AttributeAnnotation>& annotations) {
    const Backbone& backbone = pipeline.backbone();
    double sum = 0.0;
    int count = 0;
    for (const ImageRecord* rec : manifest.records("test")) {
        auto it = annotations.find(rec->id);
        if (it == annotations.end()) continue;
        ImageInput img = load_image(rec->path, backbone.arch().image_size);
        img.id = rec->id;
        const Mat emb = backbone.image_embedding(img, params.visual);
        const Mat predicted = extract(params.extractor, emb);
        const Mat target = attribute_target(backbone, it->second.selected);
        const double np = l2_norm(predicted), nt = l2_norm(target);
        if (np == 0.0 || nt == 0.0) throw InputError("fidelity: zero-norm embedding for " + rec->id);
        sum += dot(predicted, target) / (np * nt);
        ++count;
    }
    if (count == 0) throw InputError("analyze_attribute_fidelity: no annotated test images");
    return sum / count;
}

ConfidenceSummary analyze_confidence(const Backbone& backbone, const DatasetManifest& manifest,
                                     const std::map<std::string, AttributeAnnotation>& annotations,
                                     const std::string& template_plain,
                                     const std::string& template_attr, int per_class, uint64_t seed) {
    if (per_class < 1) throw InputError("analyze_confidence: per_class must be at least 1");

    std::map<std::string, std::vector<const ImageRecord*>> by_class;
    for (const ImageRecord* rec : manifest.records("test"))
        if (annotations.count(rec->id)) by_class[rec->class_name].push_back(rec);
    if (by_class.empty()) throw InputError("analyze_confidence: no annotated test images");

    ConfidenceSummary summary;
    size_t class_idx = 0;
    for (auto& [cls, records] : by_class) {
        std::sort(records.begin(), records.end(),
                  [](const ImageRecord* a, const ImageRecord* b) { return a->id < b->id; });
        Rng rng(seed * 0x9e3779b97f4a7c15ull + class_idx++ + 101);
        for (size_t i = records.size() - 1; i > 0; --i)
            std::swap(records[i], records[rng.below(i + 1)]);
        const size_t take = std::min<size_t>(per_class, records.size());

        std::string readable = cls;
        std::replace(readable.begin(), readable.end(), '_', ' ');
        for (size_t i = 0; i < take; ++i) {
            const ImageRecord* rec = records[i];
            const std::string attr = annotations.at(rec->id).selected;
            ImageInput img = load_image(rec->path, backbone.arch().image_size);
            img.id = rec->id;
            const Mat img_emb = backbone.image_embedding(img);

            auto score = [&](const std::string& text) {
                const Mat t = backbone.text_embedding(backbone.embed_tokens(text));
                const double ni = l2_norm(img_emb), nt = l2_norm(t);
                if (ni == 0.0 || nt == 0.0) throw InputError("confidence: zero-norm embedding");
                return dot(img_emb, t) / (ni * nt);
            };
            ConfidenceRecord r;
            r.image_id = rec->id;
            r.score_plain = score(fill_placeholders(template_plain, attr, readable));
            r.score_attr = score(fill_placeholders(template_attr, attr, readable));
            summary.records.push_back(std::move(r));
        }
    }

    const size_t n = summary.records.size();
    double sp = 0, sa = 0;
    int improved = 0;
    for (const ConfidenceRecord& r : summary.records) {
        sp += r.score_plain;
        sa += r.score_attr;
        if (r.score_attr > r.score_plain) ++improved;
    }
    summary.mean_plain = sp / n;
    summary.mean_attr = sa / n;
    double vp = 0, va = 0;
    for (const ConfidenceRecord& r : summary.records) {
        vp += (r.score_plain - summary.mean_plain) * (r.score_plain - summary.mean_plain);
        va += (r.score_attr - summary.mean_attr) * (r.score_attr - summary.mean_attr);
    }
    summary.std_plain = std::sqrt(vp / n);
    summary.std_attr = std::sqrt(va / n);
    summary.fraction_improved = static_cast<double>(improved) / n;
    return summary;
}

std::string confidence_csv(const ConfidenceSummary& summary) {
    std::ostringstream os;
    os << "image_id,score_plain,score_attr\n";
    for (const ConfidenceRecord& r : summary.records) {
        char line[160];
        std::snprintf(line, sizeof(line), "%s,%.10f,%.10f\n", r.image_id.c_str(), r.score_plain,
                      r.score_attr);
        os << line;
    }
    return os.str();
}

std::string eval_report_json(const EvalReport& report) {
    json per_class = json::object();
    for (const auto& [cls, acc] : report.per_class) per_class[cls] = acc;
    const json j = {{"dataset", report.dataset},   {"config_hash", hex64(report.config_hash)},
                    {"base_acc", report.base_acc}, {"novel_acc", report.novel_acc},
                    {"hm", report.hm},             {"per_class", per_class}};
    return j.dump(2);
}

EvalReport eval_report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("invalid eval report: ") + e.what());
    }
    EvalReport r;
    r.dataset = j.at("dataset").get<std::string>();
    r.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    r.base_acc = j.at("base_acc").get<double>();
    r.novel_acc = j.at("novel_acc").get<double>();
    r.hm = j.at("hm").get<double>();
    for (auto it = j.at("per_class").begin(); it != j.at("per_class").end(); ++it)
        r.per_class[it.key()] = it.value().get<double>();
    return r;
}

std::string results_table_text(const std::vector<EvalReport>& reports) {
    std::ostringstream os;
    os << "dataset              base     novel    hm\n";
    double sum_base = 0, sum_novel = 0, sum_hm = 0;
    for (const EvalReport& r : reports) {
        char line[128];
        std::snprintf(line, sizeof(line), "%-20s %-8.2f %-8.2f %-8.2f\n", r.dataset.c_str(), r.base_acc,
                      r.novel_acc, r.hm);
        os << line;
        sum_base += r.base_acc;
        sum_novel += r.novel_acc;
        sum_hm += r.hm;
    }
    if (!reports.empty()) {
        const double n = static_cast<double>(reports.size());
        char line[128];
        std::snprintf(line, sizeof(line), "%-20s %-8.2f %-8.2f %-8.2f (mean of per-dataset HMs)\n",
                      "average", sum_base / n, sum_novel / n, sum_hm / n);
        os << line;
        std::snprintf(line, sizeof(line), "%-20s %-8s %-8s %-8.2f (HM of mean accuracies)\n",
                      "average-alt", "", "", harmonic_mean(sum_base / n, sum_novel / n));
        os << line;
    }
    return os.str();
}

std::string results_table_json(const std::vector<EvalReport>& reports) {
    json rows = json::array();
    double sum_base = 0, sum_novel = 0, sum_hm = 0;
    for (const EvalReport& r : reports) {
        rows.push_back(json::parse(eval_report_json(r)));
        sum_base += r.base_acc;
        sum_novel += r.novel_acc;
        sum_hm += r.hm;
    }
    json j = {{"rows", rows}};
    if (!reports.empty()) {
        const double n = static_cast<double>(reports.size());
        j["mean_of_hms"] = sum_hm / n;
        j["hm_of_means"] = harmonic_mean(sum_base / n, sum_novel / n);
    }
    return j.dump(2);
}

}  // namespace capt
