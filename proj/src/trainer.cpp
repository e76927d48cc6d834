#include "capt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "capt/evaluator.hpp"
#include "json.hpp"

namespace capt {

using nlohmann::json;

namespace {

constexpr char kCkptMagic[8] = {'C', 'A', 'P', 'T', 'C', 'K', '1', '\n'};

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
void write_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
int32_t read_i32(std::istream& is) {
    int32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
void write_mat(std::ostream& os, const Mat& m) {
    write_i32(os, m.rows);
    write_i32(os, m.cols);
    os.write(reinterpret_cast<const char*>(m.data.data()),
             static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}
Mat read_mat(std::istream& is) {
    const int rows = read_i32(is), cols = read_i32(is);
    Mat m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    return m;
}

std::string default_template_pool() {
    const char* env = std::getenv("CAPT_DATA_DIR");
    const std::string dir = env ? env : "data";
    return dir + "/templates_attr80.txt";
}

}  // namespace

FewShotDataset sample_few_shot(const DatasetManifest& manifest, int shots, uint64_t seed) {
    if (shots < 1) throw InputError("sample_few_shot: shots must be at least 1");
    FewShotDataset fs;
    fs.base_classes = manifest.base_classes();
    fs.novel_classes = manifest.novel_classes();
    if (fs.base_classes.empty()) throw InputError("sample_few_shot: manifest has no base classes");

    std::map<std::string, std::vector<const ImageRecord*>> by_class;
    for (const ImageRecord* rec : manifest.records("train")) by_class[rec->class_name].push_back(rec);

    for (size_t c = 0; c < fs.base_classes.size(); ++c) {
        const std::string& cls = fs.base_classes[c];
        std::vector<const ImageRecord*> pool = by_class[cls];
        if (static_cast<int>(pool.size()) < shots)
            throw InputError("class '" + cls + "' has " + std::to_string(pool.size()) +
                             " training images, need " + std::to_string(shots));
        std::sort(pool.begin(), pool.end(),
                  [](const ImageRecord* a, const ImageRecord* b) { return a->id < b->id; });
        Rng rng(seed * 0x9e3779b97f4a7c15ull + c + 1);
        for (size_t i = pool.size() - 1; i > 0; --i)
            std::swap(pool[i], pool[rng.below(i + 1)]);
        for (int i = 0; i < shots; ++i)
            fs.records.push_back(FewShotRecord{pool[i], static_cast<int>(c)});
    }
    return fs;
}

TrainState init_train_state(const ExperimentConfig& cfg, const Backbone& backbone, uint64_t seed) {
    TrainState state;
    ModelConfig mc = cfg.model;
    mc.seed = seed;
    state.params = ModelParams::init(mc, backbone);
    for (Mat* m : flat_params(state.params)) state.velocity.push_back(Mat(m->rows, m->cols));
    state.backbone_fingerprint = backbone.fingerprint();
    state.config_hash = cfg.hash();
    return state;
}

void save_checkpoint(const std::string& path, const TrainState& state) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write checkpoint to " + path);
    os.write(kCkptMagic, 8);
    write_u64(os, state.config_hash);
    write_u64(os, state.backbone_fingerprint);
    write_i32(os, state.epoch);
    write_i32(os, state.step);

    const ModelParams& p = state.params;
    write_mat(os, p.ctx.tokens);
    write_i32(os, static_cast<int32_t>(p.visual.layers.size()));
    for (const Mat& m : p.visual.layers) write_mat(os, m);
    write_mat(os, p.extractor.w1);
    write_mat(os, p.extractor.b1);
    write_mat(os, p.extractor.w2);
    write_mat(os, p.extractor.b2);
    write_i32(os, p.conditioning.mode == Conditioning::kMultihead ? 0 : 1);
    write_i32(os, p.conditioning.heads);
    write_i32(os, p.conditioning.residual ? 1 : 0);
    write_i32(os, p.conditioning.proj.empty() ? 0 : 1);
    if (!p.conditioning.proj.empty()) write_mat(os, p.conditioning.proj);
    if (p.conditioning.mode == Conditioning::kMultihead) {
        write_mat(os, p.conditioning.wq);
        write_mat(os, p.conditioning.wk);
        write_mat(os, p.conditioning.wv);
        write_mat(os, p.conditioning.wo);
    }
    write_i32(os, static_cast<int32_t>(state.velocity.size()));
    for (const Mat& m : state.velocity) write_mat(os, m);
    if (!os) throw InputError("short write to checkpoint " + path);
}

TrainState load_checkpoint(const std::string& path, const Backbone& backbone) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw InputError(path + ": not a checkpoint file");

    TrainState state;
    state.config_hash = read_u64(is);
    state.backbone_fingerprint = read_u64(is);
    if (state.backbone_fingerprint != backbone.fingerprint())
        throw ConfigError(path + ": checkpoint was written against a different backbone (fingerprint " +
                          hex64(state.backbone_fingerprint) + " vs " + hex64(backbone.fingerprint()) + ")");
    state.epoch = read_i32(is);
    state.step = read_i32(is);

    ModelParams& p = state.params;
    p.ctx.tokens = read_mat(is);
    const int nvis = read_i32(is);
    for (int i = 0; i < nvis; ++i) p.visual.layers.push_back(read_mat(is));
    p.extractor.w1 = read_mat(is);
    p.extractor.b1 = read_mat(is);
    p.extractor.w2 = read_mat(is);
    p.extractor.b2 = read_mat(is);
    p.conditioning.mode = read_i32(is) == 0 ? Conditioning::kMultihead : Conditioning::kAdditive;
    p.conditioning.heads = read_i32(is);
    p.conditioning.residual = read_i32(is) != 0;
    const bool has_proj = read_i32(is) != 0;
    if (has_proj) p.conditioning.proj = read_mat(is);
    if (p.conditioning.mode == Conditioning::kMultihead) {
        p.conditioning.wq = read_mat(is);
        p.conditioning.wk = read_mat(is);
        p.conditioning.wv = read_mat(is);
        p.conditioning.wo = read_mat(is);
    }
    const int nvel = read_i32(is);
    for (int i = 0; i < nvel; ++i) state.velocity.push_back(read_mat(is));
    if (!is) throw InputError(path + ": truncated checkpoint");
    return state;
}

LossTerms train_step(Pipeline& pipeline, TrainState& state, const std::vector<TrainSample>& batch,
                     const TrainConfig& tc) {
    Tape t;
    BoundModel bound = bind_model(t, state.params);
    LossTerms terms;
    Val total = pipeline.batch_loss(t, bound, batch, &terms);

    const std::pair<const char*, double> named[] = {
        {"L_CE", terms.ce}, {"L_attr", terms.attr}, {"L_reg", terms.reg}, {"total", terms.total}};
    for (const auto& [name, v] : named)
        if (!std::isfinite(v))
            throw std::runtime_error("training aborted: non-finite " + std::string(name) + " at step " +
                                     std::to_string(state.step));

    t.backward(total);
    std::vector<Mat*> flat = flat_params(state.params);
    for (size_t i = 0; i < flat.size(); ++i) {
        const Mat& g = t.grad(bound.flat[i]);
        Mat& v = state.velocity[i];
        for (size_t k = 0; k < v.data.size(); ++k) {
            v.data[k] = tc.momentum * v.data[k] + g.data[k];
            flat[i]->data[k] -= tc.lr * v.data[k];
        }
        if (!all_finite(*flat[i]))
            throw std::runtime_error("training aborted: non-finite parameter update at step " +
                                     std::to_string(state.step));
    }
    ++state.step;
    return terms;
}

TrainResult train(const ExperimentConfig& cfg, const Backbone& backbone,
                  const DatasetManifest& manifest,
                  const std::map<std::string, AttributeAnnotation>& annotations, uint64_t seed,
                  std::ostream* metrics, const std::string& checkpoint_path) {
    const FewShotDataset fs = sample_few_shot(manifest, cfg.train.shots, seed);
    for (const FewShotRecord& r : fs.records)
        if (!annotations.count(r.image->id))
            throw InputError("no annotation for training image " + r.image->id);

    ClassVocabulary vocab = ClassVocabulary::build(backbone, fs.base_classes);
    const std::string pool_path = cfg.template_pool.empty() ? default_template_pool() : cfg.template_pool;
    TemplatePool pool = TemplatePool::load(pool_path);
    ModelConfig mc = cfg.model;
    mc.seed = seed;
    Pipeline pipeline(backbone, mc, std::move(vocab), std::move(pool));

    TrainResult result;
    result.state = init_train_state(cfg, backbone, seed);
    TrainState& state = result.state;

    Rng order_rng(seed * 0x2545f4914f6cdd1dull + 17);
    const int size = backbone.arch().image_size;
    bool first = true;

    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        std::vector<size_t> idx(fs.records.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[order_rng.below(i + 1)]);

        for (size_t begin = 0; begin < idx.size(); begin += cfg.train.batch_size) {
            const size_t end = std::min(idx.size(), begin + cfg.train.batch_size);
            std::vector<TrainSample> batch;
            for (size_t k = begin; k < end; ++k) {
                const FewShotRecord& rec = fs.records[idx[k]];
                TrainSample s;
                s.image = load_image(rec.image->path, size);
                s.image.id = rec.image->id;
                if (cfg.train.augment) s.image = augment_image(s.image, order_rng);
                s.label = rec.label;
                s.attribute = annotations.at(rec.image->id).selected;
                batch.push_back(std::move(s));
            }
            const LossTerms terms = train_step(pipeline, state, batch, cfg.train);
            result.log.push_back(StepLog{state.step, epoch, terms});
            if (first) {
                result.first_step = terms;
                first = false;
            }
            result.last_step = terms;
            if (metrics) {
                const json line = {{"step", state.step},   {"epoch", epoch},
                                   {"L_CE", terms.ce},     {"L_attr", terms.attr},
                                   {"L_reg", terms.reg},   {"total", terms.total}};
                (*metrics) << line.dump() << "\n";
            }
        }

        state.epoch = epoch + 1;
        if (backbone.fingerprint() != state.backbone_fingerprint)
            throw std::runtime_error("training aborted: frozen-weight fingerprint drift at epoch " +
                                     std::to_string(epoch));
        if (!checkpoint_path.empty() && cfg.train.checkpoint_interval > 0 &&
            state.epoch % cfg.train.checkpoint_interval == 0 && epoch + 1 < cfg.train.epochs)
            save_checkpoint(checkpoint_path + ".epoch" + std::to_string(state.epoch), state);
    }

    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, state);
    return result;
}

AblationTable run_ablation_grid(const ExperimentConfig& base, const Backbone& backbone,
                                const DatasetManifest& manifest,
                                const std::map<std::string, AttributeAnnotation>& annotations) {
    AblationTable table;
    const GridSpec& grid = base.grid;
    if (grid.empty()) return table;

    const std::vector<int> fs = grid.f.empty() ? std::vector<int>{base.model.weights.f} : grid.f;
    const std::vector<int> gs = grid.g.empty() ? std::vector<int>{base.model.weights.g} : grid.g;
    const std::vector<double> l1s =
        grid.lambda1.empty() ? std::vector<double>{base.model.weights.lambda1} : grid.lambda1;
    const std::vector<double> l2s =
        grid.lambda2.empty() ? std::vector<double>{base.model.weights.lambda2} : grid.lambda2;
    const std::vector<std::string> conds = grid.conditioning.empty()
                                               ? std::vector<std::string>{to_string(base.model.conditioning)}
                                               : grid.conditioning;
    const std::vector<int> depths =
        grid.visual_depth.empty() ? std::vector<int>{base.model.visual_depth} : grid.visual_depth;

    for (int f : fs)
        for (int g : gs)
            for (double l1 : l1s)
                for (double l2 : l2s)
                    for (const std::string& cond : conds)
                        for (int depth : depths) {
                            ExperimentConfig cfg = base;
                            cfg.grid = GridSpec{};
                            cfg.model.weights.f = f;
                            cfg.model.weights.g = g;
                            cfg.model.weights.lambda1 = l1;
                            cfg.model.weights.lambda2 = l2;
                            cfg.model.conditioning = conditioning_from_string(cond);
                            cfg.model.visual_depth = depth;

                            AblationRow row;
                            row.f = f;
                            row.g = g;
                            row.lambda1 = l1;
                            row.lambda2 = l2;
                            row.conditioning = cond;
                            row.visual_depth = depth;
                            row.config_hash = cfg.hash();
                            std::ostringstream cell;
                            cell << "f=" << f << " g=" << g << " l1=" << l1 << " l2=" << l2
                                 << " cond=" << cond << " K=" << depth;
                            row.cell = cell.str();
                            try {
                                TrainResult tr =
                                    train(cfg, backbone, manifest, annotations, cfg.seeds[0], nullptr);
                                const std::string pool_path = cfg.template_pool.empty()
                                                                  ? default_template_pool()
                                                                  : cfg.template_pool;
                                ModelConfig mc = cfg.model;
                                mc.seed = cfg.seeds[0];
                                Pipeline pipeline(backbone, mc,
                                                  ClassVocabulary::build(backbone, manifest.base_classes()),
                                                  TemplatePool::load(pool_path));
                                EvalReport report =
                                    eval_base_to_novel(pipeline, tr.state.params, manifest);
                                row.base_acc = report.base_acc;
                                row.novel_acc = report.novel_acc;
                                row.hm = report.hm;
                                row.ok = true;
                            } catch (const std::exception& e) {
                                row.ok = false;
                                row.error = e.what();
                            }
                            table.rows.push_back(std::move(row));
                        }
    return table;
}

std::string ablation_table_json(const AblationTable& table) {
    json rows = json::array();
    for (const AblationRow& r : table.rows) {
        json j = {{"cell", r.cell},
                  {"config_hash", hex64(r.config_hash)},
                  {"f", r.f},
                  {"g", r.g},
                  {"lambda1", r.lambda1},
                  {"lambda2", r.lambda2},
                  {"conditioning", r.conditioning},
                  {"visual_depth", r.visual_depth},
                  {"ok", r.ok}};
        if (r.ok) {
            j["base"] = r.base_acc;
            j["novel"] = r.novel_acc;
            j["hm"] = r.hm;
        } else {
            j["error"] = r.error;
        }
        rows.push_back(std::move(j));
    }
    return json{{"rows", rows}}.dump(2);
}

std::string ablation_table_text(const AblationTable& table) {
    std::ostringstream os;
    os << "cell                                         base    novel   hm      status\n";
    for (const AblationRow& r : table.rows) {
        char line[256];
        if (r.ok)
            std::snprintf(line, sizeof(line), "%-44s %-7.2f %-7.2f %-7.2f ok\n", r.cell.c_str(),
                          r.base_acc, r.novel_acc, r.hm);
        else
            std::snprintf(line, sizeof(line), "%-44s %-7s %-7s %-7s error: %s\n", r.cell.c_str(), "-",
                          "-", "-", r.error.c_str());
        os << line;
    }
    return os.str();
}

}  // namespace capt
