#include "capt/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace capt {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'T', 'B', 'B', '1', '\n'};
const char* kSyntheticAlphabet = "abcdefghijklmnopqrstuvwxyz .,-'?";

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_mat(std::ostream& os, const std::string& name, const Mat& m) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(m.rows));
    write_u32(os, static_cast<uint32_t>(m.cols));
    std::vector<float> buf(m.data.begin(), m.data.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

}  // namespace

void ImageInput::validate() const {
    if (height <= 0 || width <= 0) throw InputError("image " + id + ": non-positive dimensions");
    if (pixels.size() != static_cast<size_t>(height) * width * 3)
        throw InputError("image " + id + ": pixel buffer size mismatch");
    for (double v : pixels)
        if (!std::isfinite(v)) throw InputError("image " + id + ": non-finite pixel");
}

void BackboneArch::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw ConfigError("backbone arch: image_size must be a positive multiple of patch_size");
    if (d_v <= 0 || d_t <= 0 || d_vl <= 0) throw ConfigError("backbone arch: non-positive width");
    if (heads_v <= 0 || d_v % heads_v != 0) throw ConfigError("backbone arch: heads_v must divide d_v");
    if (heads_t <= 0 || d_t % heads_t != 0) throw ConfigError("backbone arch: heads_t must divide d_t");
    if (layers_v <= 0 || layers_t <= 0) throw ConfigError("backbone arch: need at least one layer");
    if (vocab_size <= 0) throw ConfigError("backbone arch: vocab_size must be positive");
    if (max_seq <= 1) throw ConfigError("backbone arch: max_seq too small");
    if (logit_scale <= 0.0) throw ConfigError("backbone arch: logit_scale must be positive");
}

Backbone Backbone::make_synthetic(const BackboneArch& arch, uint64_t seed) {
    arch.validate();
    if (arch.vocab_size > 32) throw ConfigError("synthetic backbone: vocab_size must be at most 32");
    Backbone b;
    b.arch_ = arch;
    Rng rng(seed);
    const double w_std = 0.2, pos_std = 0.1;

    auto make_encoder = [&](int layers, int d, int mlp, int positions) {
        EncoderWeights enc;
        for (int i = 0; i < layers; ++i) {
            BlockWeights blk;
            blk.ln1_g = Mat(1, d, 1.0);
            blk.ln1_b = Mat(1, d);
            blk.wq = rng.normal_mat(d, d, w_std);
            blk.bq = Mat(1, d);
            blk.wk = rng.normal_mat(d, d, w_std);
            blk.bk = Mat(1, d);
            blk.wv = rng.normal_mat(d, d, w_std);
            blk.bv = Mat(1, d);
            blk.wo = rng.normal_mat(d, d, w_std);
            blk.bo = Mat(1, d);
            blk.ln2_g = Mat(1, d, 1.0);
            blk.ln2_b = Mat(1, d);
            blk.w1 = rng.normal_mat(d, mlp, w_std);
            blk.b1 = Mat(1, mlp);
            blk.w2 = rng.normal_mat(mlp, d, w_std);
            blk.b2 = Mat(1, d);
            enc.blocks.push_back(std::move(blk));
        }
        enc.pos = rng.normal_mat(positions, d, pos_std);
        enc.ln_final_g = Mat(1, d, 1.0);
        enc.ln_final_b = Mat(1, d);
        return enc;
    };

    b.vision_ = make_encoder(arch.layers_v, arch.d_v, arch.mlp_v, 1 + arch.patches());
    b.text_ = make_encoder(arch.layers_t, arch.d_t, arch.mlp_t, arch.max_seq);
    b.patch_proj_ = rng.normal_mat(arch.patch_size * arch.patch_size * 3, arch.d_v, w_std);
    b.patch_bias_ = Mat(1, arch.d_v);
    b.class_token_ = rng.normal_mat(1, arch.d_v, w_std);
    b.vision_proj_ = rng.normal_mat(arch.d_v, arch.d_vl, w_std);
    b.token_table_ = rng.normal_mat(arch.vocab_size, arch.d_t, w_std);
    b.text_proj_ = rng.normal_mat(arch.d_t, arch.d_vl, w_std);
    for (int i = 0; i < arch.vocab_size; ++i) b.vocab_.push_back(std::string(1, kSyntheticAlphabet[i]));
    return b;
}

uint64_t Backbone::fingerprint() const {
    Digest d;
    d.update_u64(static_cast<uint64_t>(arch_.image_size));
    d.update_u64(static_cast<uint64_t>(arch_.patch_size));
    d.update_u64(static_cast<uint64_t>(arch_.d_v));
    d.update_u64(static_cast<uint64_t>(arch_.d_t));
    d.update_u64(static_cast<uint64_t>(arch_.d_vl));
    d.update_u64(static_cast<uint64_t>(arch_.causal_text ? 1 : 0));
    auto enc = [&](const EncoderWeights& e) {
        for (const BlockWeights& blk : e.blocks) {
            for (const Mat* m : {&blk.ln1_g, &blk.ln1_b, &blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv,
                                 &blk.bv, &blk.wo, &blk.bo, &blk.ln2_g, &blk.ln2_b, &blk.w1, &blk.b1,
                                 &blk.w2, &blk.b2})
                d.update(*m);
        }
        d.update(e.pos);
        d.update(e.ln_final_g);
        d.update(e.ln_final_b);
    };
    enc(vision_);
    enc(text_);
    for (const Mat* m : {&patch_proj_, &patch_bias_, &class_token_, &vision_proj_, &token_table_, &text_proj_})
        d.update(*m);
    for (const std::string& s : vocab_) d.update(s);
    return d.value();
}

Val Backbone::attention(Tape& t, const BlockWeights& b, Val x, int heads, bool causal) const {
    const int T = t.value(x).rows;
    const int d = t.value(x).cols;
    const int dh = d / heads;

    Val q = t.add_rowvec(t.matmul(x, t.leaf(b.wq)), t.leaf(b.bq));
    Val k = t.add_rowvec(t.matmul(x, t.leaf(b.wk)), t.leaf(b.bk));
    Val v = t.add_rowvec(t.matmul(x, t.leaf(b.wv)), t.leaf(b.bv));

    Val mask;
    if (causal) {
        Mat m(T, T);
        for (int i = 0; i < T; ++i)
            for (int j = i + 1; j < T; ++j) m.at(i, j) = -1e9;
        mask = t.leaf(std::move(m));
    }

    std::vector<Val> head_outs;
    for (int h = 0; h < heads; ++h) {
        Val qh = t.slice_cols(q, h * dh, dh);
        Val kh = t.slice_cols(k, h * dh, dh);
        Val vh = t.slice_cols(v, h * dh, dh);
        Val scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) scores = t.add(scores, mask);
        Val probs = t.softmax_rows(scores);
        head_outs.push_back(t.matmul(probs, vh));
    }
    Val merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
    return t.add_rowvec(t.matmul(merged, t.leaf(b.wo)), t.leaf(b.bo));
}

Val Backbone::run_blocks(Tape& t, const EncoderWeights& enc, Val x, int heads, bool causal) const {
    for (const BlockWeights& b : enc.blocks) {
        Val norm1 = t.layernorm_rows(x, t.leaf(b.ln1_g), t.leaf(b.ln1_b));
        x = t.add(x, attention(t, b, norm1, heads, causal));
        Val norm2 = t.layernorm_rows(x, t.leaf(b.ln2_g), t.leaf(b.ln2_b));
        Val hidden = t.gelu_quick(t.add_rowvec(t.matmul(norm2, t.leaf(b.w1)), t.leaf(b.b1)));
        x = t.add(x, t.add_rowvec(t.matmul(hidden, t.leaf(b.w2)), t.leaf(b.b2)));
    }
    return x;
}

Val Backbone::encode_image(Tape& t, const ImageInput& img, const std::vector<Val>& visual_prompts) const {
    img.validate();
    if (img.height != arch_.image_size || img.width != arch_.image_size)
        throw ConfigError("encode_image: expected " + std::to_string(arch_.image_size) + "x" +
                          std::to_string(arch_.image_size) + " input, got " + std::to_string(img.height) +
                          "x" + std::to_string(img.width));
    const int K = static_cast<int>(visual_prompts.size());
    if (K > arch_.layers_v)
        throw ConfigError("encode_image: prompt depth " + std::to_string(K) + " exceeds encoder depth " +
                          std::to_string(arch_.layers_v));
    int n = 0;
    for (const Val vp : visual_prompts) {
        const Mat& m = t.value(vp);
        if (m.cols != arch_.d_v)
            throw ConfigError("encode_image: visual token width " + std::to_string(m.cols) +
                              " does not match patch embedding width " + std::to_string(arch_.d_v));
        if (n == 0) n = m.rows;
        if (m.rows != n) throw ConfigError("encode_image: inconsistent tokens per layer");
    }

    // Patchify: grid of patch_size x patch_size x 3 blocks, row-major.
    const int P = arch_.patch_size;
    const int grid = arch_.image_size / P;
    Mat patches(grid * grid, P * P * 3);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            const int r = gy * grid + gx;
            int c = 0;
            for (int py = 0; py < P; ++py)
                for (int px = 0; px < P; ++px)
                    for (int ch = 0; ch < 3; ++ch) {
                        const int y = gy * P + py, x = gx * P + px;
                        patches.at(r, c++) = img.pixels[(static_cast<size_t>(y) * img.width + x) * 3 + ch];
                    }
        }

    Val emb = t.add_rowvec(t.matmul(t.leaf(std::move(patches)), t.leaf(patch_proj_)), t.leaf(patch_bias_));
    Val base = t.concat_rows({t.leaf(class_token_), emb});
    const int kept = 1 + arch_.patches();
    base = t.add(base, t.leaf(slice_rows(vision_.pos, 0, kept)));

    // Deep prompting: blocks below the injection depth take a fresh
    // learnable grid (their predecessor's prompt outputs are dropped);
    // past the depth the prompt slots propagate unchanged.
    Val carried;  // prompt rows flowing into the next block
    for (int b = 0; b < arch_.layers_v; ++b) {
        if (b < K) carried = visual_prompts[b];
        Val x = (n > 0 && carried.valid()) ? t.concat_rows({base, carried}) : base;
        const BlockWeights& blk = vision_.blocks[b];
        Val norm1 = t.layernorm_rows(x, t.leaf(blk.ln1_g), t.leaf(blk.ln1_b));
        x = t.add(x, attention(t, blk, norm1, arch_.heads_v, false));
        Val norm2 = t.layernorm_rows(x, t.leaf(blk.ln2_g), t.leaf(blk.ln2_b));
        Val hidden = t.gelu_quick(t.add_rowvec(t.matmul(norm2, t.leaf(blk.w1)), t.leaf(blk.b1)));
        x = t.add(x, t.add_rowvec(t.matmul(hidden, t.leaf(blk.w2)), t.leaf(blk.b2)));
        if (n > 0 && carried.valid()) {
            base = t.slice_rows(x, 0, kept);
            carried = t.slice_rows(x, kept, n);
        } else {
            base = x;
        }
    }

    Val normed = t.layernorm_rows(base, t.leaf(vision_.ln_final_g), t.leaf(vision_.ln_final_b));
    Val cls = t.slice_rows(normed, 0, 1);
    return t.matmul(cls, t.leaf(vision_proj_));
}

Val Backbone::encode_text(Tape& t, Val rows, int eos_index) const {
    const Mat& m = t.value(rows);
    if (m.rows < 1) throw InputError("encode_text: empty sequence");
    if (m.rows > arch_.max_seq)
        throw InputError("encode_text: sequence length " + std::to_string(m.rows) +
                         " exceeds the backbone limit of " + std::to_string(arch_.max_seq));
    if (m.cols != arch_.d_t) throw ConfigError("encode_text: token width mismatch");
    if (eos_index < 0 || eos_index >= m.rows) throw InputError("encode_text: eos index out of range");

    Val x = t.add(rows, t.leaf(slice_rows(text_.pos, 0, m.rows)));
    x = run_blocks(t, text_, x, arch_.heads_t, arch_.causal_text);
    Val normed = t.layernorm_rows(x, t.leaf(text_.ln_final_g), t.leaf(text_.ln_final_b));
    Val pooled = t.slice_rows(normed, eos_index, 1);
    return t.matmul(pooled, t.leaf(text_proj_));
}

Mat Backbone::image_embedding(const ImageInput& img) const {
    Tape t;
    return t.value(encode_image(t, img, {}));
}

Mat Backbone::image_embedding(const ImageInput& img, const VisualPromptParams& vp) const {
    Tape t;
    std::vector<Val> vals;
    for (const Mat& m : vp.layers) vals.push_back(t.leaf(m));
    return t.value(encode_image(t, img, vals));
}

Mat Backbone::text_embedding(const TokenSequence& seq) const {
    Tape t;
    return t.value(encode_text(t, t.leaf(seq.rows), seq.eos_index));
}

std::vector<int> Backbone::tokenize(const std::string& text) const {
    std::string lowered;
    lowered.reserve(text.size());
    for (char c : text) lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));

    // Greedy longest-prefix match against the vocabulary; unmatched
    // characters are skipped. Single-character vocabularies reduce this
    // to a plain table lookup.
    std::vector<int> ids;
    size_t pos = 0;
    size_t longest = 0;
    for (const std::string& s : vocab_) longest = std::max(longest, s.size());
    while (pos < lowered.size()) {
        int best = -1;
        size_t best_len = 0;
        const size_t limit = std::min(longest, lowered.size() - pos);
        for (size_t len = limit; len >= 1; --len) {
            const std::string cand = lowered.substr(pos, len);
            for (size_t i = 0; i < vocab_.size(); ++i) {
                if (vocab_[i] == cand) {
                    best = static_cast<int>(i);
                    best_len = len;
                    break;
                }
            }
            if (best >= 0) break;
        }
        if (best >= 0) {
            ids.push_back(best);
            pos += best_len;
        } else {
            ++pos;
        }
    }
    return ids;
}

TokenSequence Backbone::embed_tokens(const std::string& text) const {
    if (text.empty()) throw InputError("embed_tokens: empty string");
    const std::vector<int> ids = tokenize(text);
    if (ids.empty()) throw InputError("embed_tokens: no tokens produced for '" + text + "'");
    if (static_cast<int>(ids.size()) > arch_.max_seq)
        throw InputError("embed_tokens: '" + text + "' tokenizes to " + std::to_string(ids.size()) +
                         " tokens, over the limit of " + std::to_string(arch_.max_seq));
    TokenSequence seq;
    seq.rows = Mat(static_cast<int>(ids.size()), arch_.d_t);
    for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < arch_.d_t; ++j) seq.rows.at(static_cast<int>(i), j) = token_table_.at(ids[i], j);
    seq.eos_index = static_cast<int>(ids.size()) - 1;
    return seq;
}

void Backbone::save_weights(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write weights to " + path);
    os.write(kMagic, 8);
    for (int v : {arch_.image_size, arch_.patch_size, arch_.d_v, arch_.heads_v, arch_.layers_v,
                  arch_.mlp_v, arch_.d_t, arch_.heads_t, arch_.layers_t, arch_.mlp_t,
                  arch_.vocab_size, arch_.max_seq, arch_.d_vl})
        write_u32(os, static_cast<uint32_t>(v));
    write_f64(os, arch_.logit_scale);
    write_u32(os, arch_.causal_text ? 1 : 0);

    write_u32(os, static_cast<uint32_t>(vocab_.size()));
    for (const std::string& s : vocab_) {
        write_u32(os, static_cast<uint32_t>(s.size()));
        os.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    std::vector<std::pair<std::string, const Mat*>> tensors;
    auto enc = [&](const std::string& prefix, const EncoderWeights& e) {
        for (size_t i = 0; i < e.blocks.size(); ++i) {
            const BlockWeights& b = e.blocks[i];
            const std::string p = prefix + ".block" + std::to_string(i) + ".";
            tensors.insert(tensors.end(),
                           {{p + "ln1_g", &b.ln1_g}, {p + "ln1_b", &b.ln1_b}, {p + "wq", &b.wq},
                            {p + "bq", &b.bq},       {p + "wk", &b.wk},       {p + "bk", &b.bk},
                            {p + "wv", &b.wv},       {p + "bv", &b.bv},       {p + "wo", &b.wo},
                            {p + "bo", &b.bo},       {p + "ln2_g", &b.ln2_g}, {p + "ln2_b", &b.ln2_b},
                            {p + "w1", &b.w1},       {p + "b1", &b.b1},       {p + "w2", &b.w2},
                            {p + "b2", &b.b2}});
        }
        tensors.push_back({prefix + ".pos", &e.pos});
        tensors.push_back({prefix + ".ln_f_g", &e.ln_final_g});
        tensors.push_back({prefix + ".ln_f_b", &e.ln_final_b});
    };
    enc("v", vision_);
    enc("t", text_);
    tensors.insert(tensors.end(), {{"v.patch_proj", &patch_proj_},
                                   {"v.patch_bias", &patch_bias_},
                                   {"v.class_token", &class_token_},
                                   {"v.proj", &vision_proj_},
                                   {"t.token_table", &token_table_},
                                   {"t.proj", &text_proj_}});
    write_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) write_mat(os, name, *m);
    if (!os) throw InputError("short write to " + path);
}

Backbone Backbone::load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open backbone weights at " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw ConfigError(path + ": not a backbone weights file");

    Backbone b;
    BackboneArch& a = b.arch_;
    int* fields[] = {&a.image_size, &a.patch_size, &a.d_v, &a.heads_v, &a.layers_v, &a.mlp_v,
                     &a.d_t,        &a.heads_t,    &a.layers_t, &a.mlp_t, &a.vocab_size, &a.max_seq, &a.d_vl};
    for (int* f : fields) *f = static_cast<int>(read_u32(is));
    a.logit_scale = read_f64(is);
    a.causal_text = read_u32(is) != 0;

    const uint32_t nvocab = read_u32(is);
    for (uint32_t i = 0; i < nvocab; ++i) {
        const uint32_t len = read_u32(is);
        std::string s(len, '\0');
        is.read(s.data(), len);
        b.vocab_.push_back(std::move(s));
    }

    std::map<std::string, Mat> tensors;
    const uint32_t ntensors = read_u32(is);
    for (uint32_t i = 0; i < ntensors; ++i) {
        const uint32_t len = read_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        const int rows = static_cast<int>(read_u32(is));
        const int cols = static_cast<int>(read_u32(is));
        std::vector<float> buf(static_cast<size_t>(rows) * cols);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        Mat m(rows, cols);
        std::copy(buf.begin(), buf.end(), m.data.begin());
        tensors.emplace(std::move(name), std::move(m));
    }
    if (!is) throw ConfigError(path + ": truncated weights file");

    auto take = [&](const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ConfigError(path + ": missing tensor " + name);
        return std::move(it->second);
    };
    auto dec = [&](const std::string& prefix, int layers) {
        EncoderWeights e;
        for (int i = 0; i < layers; ++i) {
            const std::string p = prefix + ".block" + std::to_string(i) + ".";
            BlockWeights blk;
            blk.ln1_g = take(p + "ln1_g");
            blk.ln1_b = take(p + "ln1_b");
            blk.wq = take(p + "wq");
            blk.bq = take(p + "bq");
            blk.wk = take(p + "wk");
            blk.bk = take(p + "bk");
            blk.wv = take(p + "wv");
            blk.bv = take(p + "bv");
            blk.wo = take(p + "wo");
            blk.bo = take(p + "bo");
            blk.ln2_g = take(p + "ln2_g");
            blk.ln2_b = take(p + "ln2_b");
            blk.w1 = take(p + "w1");
            blk.b1 = take(p + "b1");
            blk.w2 = take(p + "w2");
            blk.b2 = take(p + "b2");
            e.blocks.push_back(std::move(blk));
        }
        e.pos = take(prefix + ".pos");
        e.ln_final_g = take(prefix + ".ln_f_g");
        e.ln_final_b = take(prefix + ".ln_f_b");
        return e;
    };
    b.vision_ = dec("v", a.layers_v);
    b.text_ = dec("t", a.layers_t);
    b.patch_proj_ = take("v.patch_proj");
    b.patch_bias_ = take("v.patch_bias");
    b.class_token_ = take("v.class_token");
    b.vision_proj_ = take("v.proj");
    b.token_table_ = take("t.token_table");
    b.text_proj_ = take("t.proj");

    if (b.token_table_.rows != static_cast<int>(b.vocab_.size()))
        throw ConfigError(path + ": vocabulary / token table size mismatch");
    return b;
}

}  // namespace capt
