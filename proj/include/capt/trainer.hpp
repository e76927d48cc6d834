#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capt/annotation.hpp"
#include "capt/config.hpp"
#include "capt/dataset.hpp"
#include "capt/pipeline.hpp"

namespace capt {

struct FewShotRecord {
    const ImageRecord* image = nullptr;
    int label = 0;  // index into base class list
};

struct FewShotDataset {
    std::vector<std::string> base_classes;
    std::vector<std::string> novel_classes;
    std::vector<FewShotRecord> records;  // exactly `shots` per base class
};

// Deterministic k-shot sample over the manifest's base-class training
// records. Fails naming the first class with fewer than `shots` images.
FewShotDataset sample_few_shot(const DatasetManifest& manifest, int shots, uint64_t seed);

// All trainable state plus bookkeeping. The frozen-backbone fingerprint
// is captured at init and re-verified every epoch.
struct TrainState {
    ModelParams params;
    std::vector<Mat> velocity;  // SGD momentum buffers, aligned with flat_params
    int epoch = 0;
    int step = 0;
    uint64_t backbone_fingerprint = 0;
    uint64_t config_hash = 0;
};

TrainState init_train_state(const ExperimentConfig& cfg, const Backbone& backbone, uint64_t seed);

// Checkpoint bundle; loading refuses a mismatched backbone.
void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path, const Backbone& backbone);

struct StepLog {
    int step = 0;
    int epoch = 0;
    LossTerms terms;
};

struct TrainResult {
    TrainState state;
    std::vector<StepLog> log;
    LossTerms first_step;
    LossTerms last_step;
};

// Few-shot training loop: SGD over batches of the sampled records,
// constant learning rate. Metrics stream one JSON line per step when
// `metrics` is given. Aborts on non-finite loss terms (naming the term
// and step) and on any frozen-weight drift.
TrainResult train(const ExperimentConfig& cfg, const Backbone& backbone,
                  const DatasetManifest& manifest,
                  const std::map<std::string, AttributeAnnotation>& annotations, uint64_t seed,
                  std::ostream* metrics, const std::string& checkpoint_path = "");

// Single optimizer step over one prepared batch; exposed for tests.
LossTerms train_step(Pipeline& pipeline, TrainState& state, const std::vector<TrainSample>& batch,
                     const TrainConfig& tc);

struct AblationRow {
    std::string cell;  // "f=1 g=2 ..." summary
    uint64_t config_hash = 0;
    int f = 0, g = 0;
    double lambda1 = 0, lambda2 = 0;
    std::string conditioning;
    int visual_depth = 0;
    bool ok = false;
    std::string error;
    double base_acc = 0, novel_acc = 0, hm = 0;
};

struct AblationTable {
    std::vector<AblationRow> rows;
};

// Cartesian product of the grid axes; one train+eval run per cell. A
// failing cell is recorded and the sweep continues.
AblationTable run_ablation_grid(const ExperimentConfig& base, const Backbone& backbone,
                                const DatasetManifest& manifest,
                                const std::map<std::string, AttributeAnnotation>& annotations);

std::string ablation_table_json(const AblationTable& table);
std::string ablation_table_text(const AblationTable& table);

}  // namespace capt
