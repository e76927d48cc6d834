#include "capt/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace capt {

namespace {

// Strict reader over a YAML map: every access is recorded and leftover
// keys are reported as errors, so ablation grids cannot silently carry
// typos.
class StrictMap {
  public:
    StrictMap(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
        if (node_ && !node_.IsMap() && !node_.IsNull())
            throw ConfigError(path_ + ": expected a mapping");
    }

    YAML::Node get(const std::string& key) {
        seen_.insert(key);
        if (!node_ || node_.IsNull()) return YAML::Node(YAML::NodeType::Undefined);
        return node_[key];
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        YAML::Node n = get(key);
        if (!n || n.IsNull()) return;
        try {
            out = n.as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError(path_ + key + ": invalid value '" + raw(n) + "'");
        }
    }

    template <typename T>
    void read_list(const std::string& key, std::vector<T>& out) {
        YAML::Node n = get(key);
        if (!n || n.IsNull()) return;
        if (!n.IsSequence()) throw ConfigError(path_ + key + ": expected a list");
        out.clear();
        for (const YAML::Node& e : n) {
            try {
                out.push_back(e.as<T>());
            } catch (const YAML::Exception&) {
                throw ConfigError(path_ + key + ": invalid list element '" + raw(e) + "'");
            }
        }
    }

    void finish() {
        if (!node_ || node_.IsNull()) return;
        for (const auto& kv : node_) {
            const std::string key = kv.first.as<std::string>();
            if (!seen_.count(key)) throw ConfigError("unknown config key '" + path_ + key + "'");
        }
    }

  private:
    static std::string raw(const YAML::Node& n) {
        YAML::Emitter e;
        e << n;
        return e.c_str();
    }

    YAML::Node node_;
    std::string path_;
    std::set<std::string> seen_;
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (lr <= 0.0) throw ConfigError("train.lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must be in [0, 1)");
    if (shots < 1) throw ConfigError("train.shots must be at least 1");
    if (checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval must be non-negative");
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    ExperimentConfig cfg = from_yaml(buf.str());
    cfg.validate_paths();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_yaml(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }

    ExperimentConfig cfg;
    StrictMap top(root, "");
    top.read("backbone", cfg.backbone);
    top.read("weights_path", cfg.weights_path);
    top.read("dataset", cfg.dataset);
    top.read("annotations", cfg.annotations);
    top.read("template_pool", cfg.template_pool);
    top.read("output_dir", cfg.output_dir);
    top.read_list("seeds", cfg.seeds);

    {
        StrictMap m(top.get("model"), "model.");
        m.read("context_length", cfg.model.context_length);
        m.read("heads", cfg.model.heads);
        std::string cond = to_string(cfg.model.conditioning);
        m.read("conditioning", cond);
        cfg.model.conditioning = conditioning_from_string(cond);
        m.read("residual", cfg.model.residual);
        m.read("visual_tokens", cfg.model.visual_tokens);
        m.read("visual_depth", cfg.model.visual_depth);
        m.read("extractor_hidden", cfg.model.extractor_hidden);
        m.finish();
    }
    {
        StrictMap m(top.get("loss"), "loss.");
        m.read("lambda1", cfg.model.weights.lambda1);
        m.read("lambda2", cfg.model.weights.lambda2);
        m.read("f", cfg.model.weights.f);
        m.read("g", cfg.model.weights.g);
        m.read("tau", cfg.model.weights.tau);
        m.finish();
        cfg.model.weights.validate();
    }
    {
        StrictMap m(top.get("train"), "train.");
        m.read("epochs", cfg.train.epochs);
        m.read("batch_size", cfg.train.batch_size);
        m.read("lr", cfg.train.lr);
        m.read("momentum", cfg.train.momentum);
        m.read("shots", cfg.train.shots);
        m.read("augment", cfg.train.augment);
        m.read("checkpoint_interval", cfg.train.checkpoint_interval);
        m.finish();
        cfg.train.validate();
    }
    {
        StrictMap m(top.get("vqa"), "vqa.");
        std::string client = cfg.vqa.kind == VqaClientKind::kDeterministicStub ? "stub" : "external";
        m.read("client", client);
        if (client == "stub")
            cfg.vqa.kind = VqaClientKind::kDeterministicStub;
        else if (client == "external")
            cfg.vqa.kind = VqaClientKind::kExternalVqa;
        else
            throw ConfigError("vqa.client must be 'stub' or 'external', got '" + client + "'");
        m.read("endpoint", cfg.vqa.endpoint);
        m.read_list("seeds", cfg.vqa.seeds);
        m.read("repetition_penalty", cfg.vqa.repetition_penalty);
        m.finish();
        cfg.vqa.validate();
    }
    {
        StrictMap m(top.get("synthetic"), "synthetic.");
        m.read("image_size", cfg.synthetic.image_size);
        m.read("patch_size", cfg.synthetic.patch_size);
        m.read("d_v", cfg.synthetic.d_v);
        m.read("heads_v", cfg.synthetic.heads_v);
        m.read("layers_v", cfg.synthetic.layers_v);
        m.read("mlp_v", cfg.synthetic.mlp_v);
        m.read("d_t", cfg.synthetic.d_t);
        m.read("heads_t", cfg.synthetic.heads_t);
        m.read("layers_t", cfg.synthetic.layers_t);
        m.read("mlp_t", cfg.synthetic.mlp_t);
        m.read("vocab_size", cfg.synthetic.vocab_size);
        m.read("max_seq", cfg.synthetic.max_seq);
        m.read("d_vl", cfg.synthetic.d_vl);
        m.read("logit_scale", cfg.synthetic.logit_scale);
        m.read("seed", cfg.synthetic_seed);
        m.finish();
        cfg.synthetic.validate();
    }
    {
        StrictMap m(top.get("ablate"), "ablate.");
        m.read_list("f", cfg.grid.f);
        m.read_list("g", cfg.grid.g);
        m.read_list("lambda1", cfg.grid.lambda1);
        m.read_list("lambda2", cfg.grid.lambda2);
        m.read_list("conditioning", cfg.grid.conditioning);
        m.read_list("visual_depth", cfg.grid.visual_depth);
        m.finish();
    }
    top.finish();

    if (cfg.backbone != "synthetic" && cfg.backbone != "pretrained-vitb16")
        throw ConfigError("backbone must be 'synthetic' or 'pretrained-vitb16', got '" + cfg.backbone + "'");
    if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
    for (const std::string& c : cfg.grid.conditioning) conditioning_from_string(c);
    return cfg;
}

void ExperimentConfig::validate_paths() const {
    auto check = [](const std::string& what, const std::string& p) {
        if (!p.empty() && !std::filesystem::exists(p))
            throw ConfigError(what + " path does not resolve: " + p);
    };
    check("dataset", dataset);
    check("annotations", annotations);
    check("template_pool", template_pool);
    check("weights_path", weights_path);
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream os;
    os << "annotations=" << annotations << "\n";
    os << "backbone=" << backbone << "\n";
    os << "dataset=" << dataset << "\n";
    os << "loss.f=" << model.weights.f << "\n";
    os << "loss.g=" << model.weights.g << "\n";
    os << "loss.lambda1=" << fmt_double(model.weights.lambda1) << "\n";
    os << "loss.lambda2=" << fmt_double(model.weights.lambda2) << "\n";
    os << "loss.tau=" << fmt_double(model.weights.tau) << "\n";
    os << "model.conditioning=" << to_string(model.conditioning) << "\n";
    os << "model.context_length=" << model.context_length << "\n";
    os << "model.extractor_hidden=" << model.extractor_hidden << "\n";
    os << "model.heads=" << model.heads << "\n";
    os << "model.residual=" << (model.residual ? "true" : "false") << "\n";
    os << "model.visual_depth=" << model.visual_depth << "\n";
    os << "model.visual_tokens=" << model.visual_tokens << "\n";
    os << "output_dir=" << output_dir << "\n";
    os << "seeds=";
    for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
    os << "\n";
    os << "synthetic.d_t=" << synthetic.d_t << "\n";
    os << "synthetic.d_v=" << synthetic.d_v << "\n";
    os << "synthetic.d_vl=" << synthetic.d_vl << "\n";
    os << "synthetic.heads_t=" << synthetic.heads_t << "\n";
    os << "synthetic.heads_v=" << synthetic.heads_v << "\n";
    os << "synthetic.image_size=" << synthetic.image_size << "\n";
    os << "synthetic.layers_t=" << synthetic.layers_t << "\n";
    os << "synthetic.layers_v=" << synthetic.layers_v << "\n";
    os << "synthetic.logit_scale=" << fmt_double(synthetic.logit_scale) << "\n";
    os << "synthetic.max_seq=" << synthetic.max_seq << "\n";
    os << "synthetic.mlp_t=" << synthetic.mlp_t << "\n";
    os << "synthetic.mlp_v=" << synthetic.mlp_v << "\n";
    os << "synthetic.patch_size=" << synthetic.patch_size << "\n";
    os << "synthetic.seed=" << synthetic_seed << "\n";
    os << "synthetic.vocab_size=" << synthetic.vocab_size << "\n";
    os << "template_pool=" << template_pool << "\n";
    os << "train.augment=" << (train.augment ? "true" : "false") << "\n";
    os << "train.batch_size=" << train.batch_size << "\n";
    os << "train.checkpoint_interval=" << train.checkpoint_interval << "\n";
    os << "train.epochs=" << train.epochs << "\n";
    os << "train.lr=" << fmt_double(train.lr) << "\n";
    os << "train.momentum=" << fmt_double(train.momentum) << "\n";
    os << "train.shots=" << train.shots << "\n";
    os << "vqa.client=" << (vqa.kind == VqaClientKind::kDeterministicStub ? "stub" : "external") << "\n";
    os << "vqa.endpoint=" << vqa.endpoint << "\n";
    os << "vqa.repetition_penalty=" << fmt_double(vqa.repetition_penalty) << "\n";
    os << "vqa.seeds=";
    for (size_t i = 0; i < vqa.seeds.size(); ++i) os << (i ? "," : "") << vqa.seeds[i];
    os << "\n";
    os << "weights_path=" << weights_path << "\n";
    return os.str();
}

uint64_t ExperimentConfig::hash() const {
    Digest d;
    d.update(canonical());
    return d.value();
}

Backbone ExperimentConfig::make_backbone() const {
    if (backbone == "synthetic") return Backbone::make_synthetic(synthetic, synthetic_seed);
    if (weights_path.empty())
        throw ConfigError("backbone 'pretrained-vitb16' requires weights_path");
    return Backbone::load_weights(weights_path);
}

}  // namespace capt
