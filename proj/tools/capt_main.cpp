// capt: attribute-conditioned prompt tuning over frozen vision-language
// backbones. Subcommands: annotate, train, eval, analyze, ablate, manifest.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "capt/annotation.hpp"
#include "capt/config.hpp"
#include "capt/evaluator.hpp"
#include "capt/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace capt;

namespace {

std::string data_dir() {
    const char* env = std::getenv("CAPT_DATA_DIR");
    return env ? env : "data";
}

std::string resolve_manifest(const std::string& arg) {
    if (fs::exists(arg)) return arg;
    const std::string guess = data_dir() + "/" + arg + "/manifest.json";
    if (fs::exists(guess)) return guess;
    throw InputError("cannot resolve dataset '" + arg + "' (not a file, and no " + guess + ")");
}

ExperimentConfig load_config_opt(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    return ExperimentConfig::load(path);
}

std::string template_pool_path(const ExperimentConfig& cfg) {
    return cfg.template_pool.empty() ? data_dir() + "/templates_attr80.txt" : cfg.template_pool;
}

// Reconstructs the model shape recorded in a checkpoint so evaluation
// does not depend on the training-side config file.
ModelConfig model_config_from_state(const TrainState& state, const ExperimentConfig& cfg) {
    ModelConfig mc = cfg.model;
    mc.context_length = state.params.ctx.tokens.rows;
    mc.conditioning = state.params.conditioning.mode;
    mc.heads = state.params.conditioning.heads;
    mc.residual = state.params.conditioning.residual;
    mc.visual_tokens = state.params.visual.count_per_layer();
    mc.visual_depth = state.params.visual.depth();
    mc.extractor_hidden = state.params.extractor.w1.cols;
    return mc;
}

int cmd_annotate(const std::string& dataset, const std::string& out, const std::string& config_path,
                 const std::string& templates_path, bool stub, bool swap, bool force) {
    ExperimentConfig cfg = load_config_opt(config_path);
    if (stub) cfg.vqa.kind = VqaClientKind::kDeterministicStub;
    const DatasetManifest manifest = DatasetManifest::load(resolve_manifest(dataset));
    const std::string tpath =
        templates_path.empty() ? data_dir() + "/vqa_templates.json" : templates_path;
    const TemplateTable templates = TemplateTable::load(tpath);
    const Backbone backbone = cfg.make_backbone();

    AnnotateOptions options;
    options.force = force;
    options.swap_attributes = swap;
    const AnnotateResult result =
        annotate_dataset(manifest, templates, cfg.vqa, backbone, out, options);
    std::printf("annotated %d image(s), skipped %d, %zu failure(s)\n", result.written, result.skipped,
                result.failures.size());
    if (!result.ok()) {
        std::fprintf(stderr, "failure manifest: %s.failures.json\n", out.c_str());
        return 1;
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& annotations_path,
              const std::string& out) {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (!annotations_path.empty()) cfg.annotations = annotations_path;
    if (cfg.dataset.empty()) throw ConfigError("train: config must set a dataset manifest");
    if (cfg.annotations.empty()) throw ConfigError("train: no annotations file given");

    const Backbone backbone = cfg.make_backbone();
    const DatasetManifest manifest = DatasetManifest::load(cfg.dataset);
    const auto annotations = load_annotations(cfg.annotations);
    if (annotations.empty()) throw InputError("no annotation records in " + cfg.annotations);

    fs::create_directories(cfg.output_dir);
    const std::string ckpt_base = out.empty() ? cfg.output_dir + "/model.ckpt" : out;

    for (uint64_t seed : cfg.seeds) {
        const std::string suffix = cfg.seeds.size() > 1 ? ".s" + std::to_string(seed) : "";
        const std::string ckpt = ckpt_base + suffix;
        std::ofstream metrics(ckpt + ".metrics.jsonl");
        const TrainResult result = train(cfg, backbone, manifest, annotations, seed, &metrics, ckpt);
        std::printf("seed %llu: %d steps, final total %.6f (CE %.6f, attr %.6f, reg %.6f) -> %s\n",
                    static_cast<unsigned long long>(seed), result.state.step, result.last_step.total,
                    result.last_step.ce, result.last_step.attr, result.last_step.reg, ckpt.c_str());
    }
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset, const std::string& protocol,
             const std::string& config_path, const std::vector<std::string>& targets,
             const std::string& out) {
    ExperimentConfig cfg = load_config_opt(config_path);
    const Backbone backbone = cfg.make_backbone();
    const TrainState state = load_checkpoint(ckpt, backbone);
    const DatasetManifest manifest = DatasetManifest::load(resolve_manifest(dataset));

    ModelConfig mc = model_config_from_state(state, cfg);
    Pipeline pipeline(backbone, mc, ClassVocabulary::build(backbone, manifest.base_classes()),
                      TemplatePool::load(template_pool_path(cfg)));

    if (protocol == "base-novel" || protocol == "few-shot") {
        EvalReport report = eval_base_to_novel(pipeline, state.params, manifest);
        report.config_hash = state.config_hash;
        const std::string text = eval_report_json(report);
        if (!out.empty()) {
            std::ofstream os(out);
            os << text << "\n";
        }
        std::printf("%s\n", results_table_text({report}).c_str());
        return 0;
    }
    if (protocol == "domain-shift") {
        std::vector<DatasetManifest> target_manifests;
        for (const std::string& t : targets) target_manifests.push_back(DatasetManifest::load(resolve_manifest(t)));
        const DomainShiftReport report = eval_domain_shift(pipeline, state.params, manifest, target_manifests);
        nlohmann::json j;
        j["targets"] = nlohmann::json::array();
        for (const auto& [name, acc] : report.per_target) {
            j["targets"].push_back({{"dataset", name}, {"accuracy", acc}});
            std::printf("%-20s %.2f\n", name.c_str(), acc);
        }
        j["average"] = report.average;
        std::printf("%-20s %.2f\n", "average", report.average);
        if (!out.empty()) {
            std::ofstream os(out);
            os << j.dump(2) << "\n";
        }
        return 0;
    }
    throw InputError("unknown protocol '" + protocol + "' (base-novel | domain-shift | few-shot)");
}

int cmd_analyze(const std::string& mode, const std::string& ckpt, const std::string& dataset,
                const std::string& annotations_path, const std::string& config_path,
                const std::string& out, int per_class, uint64_t seed) {
    ExperimentConfig cfg = load_config_opt(config_path);
    const Backbone backbone = cfg.make_backbone();
    const DatasetManifest manifest = DatasetManifest::load(resolve_manifest(dataset));
    const auto annotations = load_annotations(annotations_path);
    if (annotations.empty()) throw InputError("no annotation records in " + annotations_path);

    if (mode == "confidence") {
        const ConfidenceSummary summary =
            analyze_confidence(backbone, manifest, annotations, "A photo of a [cls].",
                               "A photo of a [a] [cls].", per_class, seed);
        if (!out.empty()) {
            std::ofstream os(out);
            os << confidence_csv(summary);
        }
        std::printf("images: %zu  fraction with improved score: %.4f\n", summary.records.size(),
                    summary.fraction_improved);
        std::printf("plain: mean %.6f std %.6f\n", summary.mean_plain, summary.std_plain);
        std::printf("attr:  mean %.6f std %.6f\n", summary.mean_attr, summary.std_attr);
        return 0;
    }
    if (mode == "fidelity") {
        if (ckpt.empty()) throw InputError("analyze --mode fidelity needs --ckpt");
        const TrainState state = load_checkpoint(ckpt, backbone);
        ModelConfig mc = model_config_from_state(state, cfg);
        Pipeline pipeline(backbone, mc, ClassVocabulary::build(backbone, manifest.base_classes()),
                          TemplatePool::load(template_pool_path(cfg)));
        const double fidelity = analyze_attribute_fidelity(pipeline, state.params, manifest, annotations);
        std::printf("mean attribute fidelity (cosine): %.6f\n", fidelity);
        if (!out.empty()) {
            std::ofstream os(out);
            os << nlohmann::json{{"dataset", manifest.name}, {"mean_cosine", fidelity}}.dump(2) << "\n";
        }
        return 0;
    }
    throw InputError("unknown analyze mode '" + mode + "' (confidence | fidelity)");
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (cfg.dataset.empty()) throw ConfigError("ablate: config must set a dataset manifest");
    if (cfg.annotations.empty()) throw ConfigError("ablate: config must set an annotations file");
    const Backbone backbone = cfg.make_backbone();
    const DatasetManifest manifest = DatasetManifest::load(cfg.dataset);
    const auto annotations = load_annotations(cfg.annotations);

    const AblationTable table = run_ablation_grid(cfg, backbone, manifest, annotations);
    const std::string dir = out_dir.empty() ? cfg.output_dir : out_dir;
    fs::create_directories(dir);
    {
        std::ofstream os(dir + "/ablation.json");
        os << ablation_table_json(table) << "\n";
    }
    {
        std::ofstream os(dir + "/ablation.txt");
        os << ablation_table_text(table);
    }
    std::printf("%s", ablation_table_text(table).c_str());
    std::printf("%zu cell(s) -> %s/ablation.json\n", table.rows.size(), dir.c_str());
    return 0;
}

// Builds a manifest from a class-per-subdirectory image layout.
int cmd_manifest(const std::string& root, const std::string& name, const std::string& out,
                 double novel_fraction, double test_fraction, uint64_t seed) {
    DatasetManifest manifest;
    manifest.name = name;
    std::vector<std::string> classes;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) classes.push_back(entry.path().filename().string());
    std::sort(classes.begin(), classes.end());
    if (classes.size() < 2) throw InputError("manifest: need at least 2 class subdirectories in " + root);

    const size_t novel_count = static_cast<size_t>(classes.size() * novel_fraction);
    for (size_t i = 0; i < classes.size(); ++i) {
        manifest.class_names.push_back(classes[i]);
        manifest.is_base.push_back(i < classes.size() - novel_count);
    }
    Rng rng(seed);
    for (const std::string& cls : classes) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / cls))
            if (entry.is_regular_file()) files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        for (const std::string& f : files) {
            ImageRecord rec;
            rec.path = f;
            rec.class_name = cls;
            rec.id = f;
            rec.role = rng.uniform() < test_fraction ? "test" : "train";
            manifest.images.push_back(std::move(rec));
        }
    }
    manifest.save(out);
    std::printf("wrote %s (%zu classes, %zu images)\n", out.c_str(), manifest.class_names.size(),
                manifest.images.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attribute-conditioned prompt tuning for frozen vision-language backbones"};
    app.require_subcommand(1);

    std::string dataset, out, config_path, templates_path, annotations_path, ckpt, protocol = "base-novel";
    std::string mode, root, name;
    std::vector<std::string> targets;
    bool stub = false, swap = false, force = false;
    int per_class = 50;
    uint64_t seed = 0;
    double novel_fraction = 0.5, test_fraction = 0.3;

    CLI::App* annotate = app.add_subcommand("annotate", "generate attribute annotations for a dataset");
    annotate->add_option("--dataset", dataset, "manifest path or dataset name")->required();
    annotate->add_option("--out", out, "output JSONL path")->required();
    annotate->add_option("--config", config_path, "experiment config");
    annotate->add_option("--templates", templates_path, "VQA template table (JSON)");
    annotate->add_flag("--stub", stub, "use the deterministic stub client");
    annotate->add_flag("--swap-attributes", swap, "exchange attributes across classes");
    annotate->add_flag("--force", force, "re-annotate ids already present");

    CLI::App* train_cmd = app.add_subcommand("train", "few-shot training over a frozen backbone");
    train_cmd->add_option("--config", config_path, "experiment config")->required();
    train_cmd->add_option("--annotations", annotations_path, "annotation JSONL (overrides config)");
    train_cmd->add_option("--out", out, "checkpoint path");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a trained checkpoint");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--dataset", dataset, "manifest path or dataset name")->required();
    eval_cmd->add_option("--protocol", protocol, "base-novel | domain-shift | few-shot");
    eval_cmd->add_option("--config", config_path, "experiment config");
    eval_cmd->add_option("--targets", targets, "domain-shift target manifests");
    eval_cmd->add_option("--out", out, "report output path");

    CLI::App* analyze = app.add_subcommand("analyze", "interpretability analyses");
    analyze->add_option("--mode", mode, "confidence | fidelity")->required();
    analyze->add_option("--ckpt", ckpt, "checkpoint path (fidelity)");
    analyze->add_option("--dataset", dataset, "manifest path or dataset name")->required();
    analyze->add_option("--annotations", annotations_path, "annotation JSONL")->required();
    analyze->add_option("--config", config_path, "experiment config");
    analyze->add_option("--out", out, "output path (CSV or JSON)");
    analyze->add_option("--per-class", per_class, "confidence sample size per class");
    analyze->add_option("--seed", seed, "sampling seed");

    CLI::App* ablate = app.add_subcommand("ablate", "run the config's ablation grid");
    ablate->add_option("--config", config_path, "experiment config")->required();
    ablate->add_option("--out", out, "output directory");

    CLI::App* manifest_cmd =
        app.add_subcommand("manifest", "build a manifest from a class-per-directory layout");
    manifest_cmd->add_option("--root", root, "dataset root directory")->required();
    manifest_cmd->add_option("--name", name, "dataset name")->required();
    manifest_cmd->add_option("--out", out, "manifest output path")->required();
    manifest_cmd->add_option("--novel-fraction", novel_fraction, "fraction of classes held out as novel");
    manifest_cmd->add_option("--test-fraction", test_fraction, "fraction of images used for testing");
    manifest_cmd->add_option("--seed", seed, "split seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(annotate))
            return cmd_annotate(dataset, out, config_path, templates_path, stub, swap, force);
        if (app.got_subcommand(train_cmd)) return cmd_train(config_path, annotations_path, out);
        if (app.got_subcommand(eval_cmd))
            return cmd_eval(ckpt, dataset, protocol, config_path, targets, out);
        if (app.got_subcommand(analyze))
            return cmd_analyze(mode, ckpt, dataset, annotations_path, config_path, out, per_class, seed);
        if (app.got_subcommand(ablate)) return cmd_ablate(config_path, out);
        if (app.got_subcommand(manifest_cmd))
            return cmd_manifest(root, name, out, novel_fraction, test_fraction, seed);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
