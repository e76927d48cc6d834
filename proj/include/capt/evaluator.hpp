#pragma once

#include <map>
#include <string>
#include <vector>

#include "capt/annotation.hpp"
#include "capt/dataset.hpp"
#include "capt/pipeline.hpp"

namespace capt {

struct EvalReport {
    std::string dataset;
    uint64_t config_hash = 0;
    double base_acc = 0.0;   // percent
    double novel_acc = 0.0;  // percent
    double hm = 0.0;         // percent
    std::map<std::string, double> per_class;  // percent per class name
};

// 2ab/(a+b), in percent; 0 when either accuracy is 0.
double harmonic_mean(double base, double novel);

// Base and novel test accuracy under the standard protocol: base images
// are classified against the base vocabulary, novel images against the
// novel vocabulary.
EvalReport eval_base_to_novel(const Pipeline& pipeline, const ModelParams& params,
                              const DatasetManifest& manifest);

struct DomainShiftReport {
    std::vector<std::pair<std::string, double>> per_target;  // dataset -> percent
    double average = 0.0;
};

// Top-1 accuracy on each target's test split using the source class
// vocabulary; targets must only use classes declared by the source.
DomainShiftReport eval_domain_shift(const Pipeline& pipeline, const ModelParams& params,
                                    const DatasetManifest& source,
                                    const std::vector<DatasetManifest>& targets);

// Mean cosine between the extractor's predicted attribute embedding and
// the annotated attribute's token embedding over annotated test images.
double analyze_attribute_fidelity(const Pipeline& pipeline, const ModelParams& params,
                                  const DatasetManifest& manifest,
                                  const std::map<std::string, AttributeAnnotation>& annotations);

struct ConfidenceRecord {
    std::string image_id;
    double score_plain = 0.0;
    double score_attr = 0.0;
};

struct ConfidenceSummary {
    std::vector<ConfidenceRecord> records;
    double fraction_improved = 0.0;
    double mean_plain = 0.0, std_plain = 0.0;
    double mean_attr = 0.0, std_attr = 0.0;
};

// Plain-encoder alignment scores with and without the annotated
// attribute substituted into the prompt, over up to `per_class` sampled
// test images per class.
ConfidenceSummary analyze_confidence(const Backbone& backbone, const DatasetManifest& manifest,
                                     const std::map<std::string, AttributeAnnotation>& annotations,
                                     const std::string& template_plain,
                                     const std::string& template_attr, int per_class, uint64_t seed);

std::string confidence_csv(const ConfidenceSummary& summary);

std::string eval_report_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& text);

// Aligned text table (rows per dataset, columns Base/Novel/HM) plus both
// aggregate conventions: the mean of per-dataset HMs and the HM of mean
// accuracies, labelled.
std::string results_table_text(const std::vector<EvalReport>& reports);
std::string results_table_json(const std::vector<EvalReport>& reports);

}  // namespace capt
