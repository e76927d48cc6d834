#include "capt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "json.hpp"

namespace capt {

using nlohmann::json;

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open dataset manifest at " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid manifest JSON: " + e.what());
    }
    DatasetManifest m;
    m.name = j.value("name", "");
    if (m.name.empty()) throw ConfigError(path + ": manifest missing dataset name");
    if (!j.contains("classes") || !j["classes"].is_array())
        throw ConfigError(path + ": manifest missing classes array");
    for (const json& c : j["classes"]) {
        m.class_names.push_back(c.at("name").get<std::string>());
        const std::string split = c.value("split", "base");
        if (split != "base" && split != "novel")
            throw ConfigError(path + ": class split must be base or novel, got '" + split + "'");
        m.is_base.push_back(split == "base");
    }
    for (const json& r : j.value("images", json::array())) {
        ImageRecord rec;
        rec.path = r.at("path").get<std::string>();
        rec.class_name = r.at("class").get<std::string>();
        rec.id = r.value("id", rec.path);
        rec.role = r.value("role", "train");
        if (rec.role != "train" && rec.role != "test")
            throw ConfigError(path + ": image role must be train or test");
        m.images.push_back(std::move(rec));
    }
    m.validate();
    return m;
}

void DatasetManifest::save(const std::string& path) const {
    validate();
    json j;
    j["name"] = name;
    j["classes"] = json::array();
    for (size_t i = 0; i < class_names.size(); ++i)
        j["classes"].push_back({{"name", class_names[i]}, {"split", is_base[i] ? "base" : "novel"}});
    j["images"] = json::array();
    for (const ImageRecord& r : images)
        j["images"].push_back({{"path", r.path}, {"class", r.class_name}, {"id", r.id}, {"role", r.role}});
    std::ofstream os(path);
    if (!os) throw InputError("cannot write manifest to " + path);
    os << j.dump(2) << "\n";
}

void DatasetManifest::validate() const {
    if (class_names.size() != is_base.size()) throw ConfigError("manifest: class/flag size mismatch");
    std::set<std::string> seen;
    for (const std::string& c : class_names)
        if (!seen.insert(c).second) throw ConfigError("manifest: duplicate class '" + c + "'");
    for (const ImageRecord& r : images)
        if (!seen.count(r.class_name))
            throw ConfigError("manifest: image " + r.id + " references unknown class '" + r.class_name + "'");
}

int DatasetManifest::class_index(const std::string& name) const {
    for (size_t i = 0; i < class_names.size(); ++i)
        if (class_names[i] == name) return static_cast<int>(i);
    throw InputError("unknown class '" + name + "'");
}

std::vector<std::string> DatasetManifest::base_classes() const {
    std::vector<std::string> out;
    for (size_t i = 0; i < class_names.size(); ++i)
        if (is_base[i]) out.push_back(class_names[i]);
    return out;
}

std::vector<std::string> DatasetManifest::novel_classes() const {
    std::vector<std::string> out;
    for (size_t i = 0; i < class_names.size(); ++i)
        if (!is_base[i]) out.push_back(class_names[i]);
    return out;
}

std::vector<const ImageRecord*> DatasetManifest::records(const std::string& role) const {
    std::vector<const ImageRecord*> out;
    for (const ImageRecord& r : images)
        if (r.role == role) out.push_back(&r);
    return out;
}

ImageInput synthetic_image(uint64_t seed, int size) {
    // High seed bits choose a sinusoidal base pattern, low bits add
    // instance noise. Seeds that share `seed >> 10` depict the same
    // underlying pattern, which is how procedural datasets give every
    // class a common visual structure.
    const uint64_t pattern = seed >> 10;
    Rng prng(pattern * 7919 + 3);
    const double fx = 0.5 + 2.5 * prng.uniform();
    const double fy = 0.5 + 2.5 * prng.uniform();
    double phase[3];
    for (double& p : phase) p = 6.2831853071795862 * prng.uniform();

    Rng nrng(seed * 0x9e3779b97f4a7c15ull + 1);
    ImageInput img;
    img.id = "synthetic:" + std::to_string(seed);
    img.height = img.width = size;
    img.pixels.resize(static_cast<size_t>(size) * size * 3);
    size_t i = 0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double wave = std::sin(6.2831853071795862 * (fx * x + fy * y) / size + phase[ch]);
                img.pixels[i++] = 0.5 + 0.3 * wave + 0.15 * (nrng.uniform() - 0.5);
            }
    return img;
}

namespace {

double sample_bilinear(const ImageInput& img, double y, double x, int ch) {
    const int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, img.height - 1);
    const int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const int x1 = std::min(x0 + 1, img.width - 1);
    const double fy = y - y0, fx = x - x0;
    auto at = [&](int yy, int xx) {
        return img.pixels[(static_cast<size_t>(yy) * img.width + xx) * 3 + ch];
    };
    return at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x1) * (1 - fy) * fx +
           at(y1, x0) * fy * (1 - fx) + at(y1, x1) * fy * fx;
}

ImageInput resize_image(const ImageInput& img, int size) {
    if (img.height == size && img.width == size) return img;
    ImageInput out;
    out.id = img.id;
    out.height = out.width = size;
    out.pixels.resize(static_cast<size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double sy = (y + 0.5) * img.height / size - 0.5;
                const double sx = (x + 0.5) * img.width / size - 0.5;
                out.pixels[(static_cast<size_t>(y) * size + x) * 3 + ch] =
                    sample_bilinear(img, std::max(0.0, sy), std::max(0.0, sx), ch);
            }
    return out;
}

}  // namespace

ImageInput load_image(const std::string& path, int size) {
    if (path.rfind("synthetic:", 0) == 0) {
        const uint64_t seed = std::strtoull(path.c_str() + 10, nullptr, 10);
        return synthetic_image(seed, size);
    }
    if (path.size() > 7 && path.substr(path.size() - 7) == ".imgbin") {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw InputError("cannot open image " + path);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "CIMG", 4) != 0) throw InputError(path + ": not an imgbin file");
        uint32_t h = 0, w = 0, c = 0;
        is.read(reinterpret_cast<char*>(&h), 4);
        is.read(reinterpret_cast<char*>(&w), 4);
        is.read(reinterpret_cast<char*>(&c), 4);
        if (c != 3) throw InputError(path + ": imgbin must have 3 channels");
        std::vector<float> buf(static_cast<size_t>(h) * w * 3);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) throw InputError(path + ": truncated imgbin");
        ImageInput img;
        img.id = path;
        img.height = static_cast<int>(h);
        img.width = static_cast<int>(w);
        img.pixels.assign(buf.begin(), buf.end());
        img.validate();
        return resize_image(img, size);
    }
    throw InputError("unsupported image path '" + path +
                     "' (expected synthetic:<seed> or a .imgbin file; see README for conversion)");
}

void save_imgbin(const std::string& path, const ImageInput& img) {
    img.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write image to " + path);
    os.write("CIMG", 4);
    const uint32_t h = static_cast<uint32_t>(img.height), w = static_cast<uint32_t>(img.width), c = 3;
    os.write(reinterpret_cast<const char*>(&h), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    os.write(reinterpret_cast<const char*>(&c), 4);
    std::vector<float> buf(img.pixels.begin(), img.pixels.end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

ImageInput augment_image(const ImageInput& img, Rng& rng) {
    const double area_scale = 0.8 + 0.2 * rng.uniform();
    const double side = std::sqrt(area_scale);
    const int ch = std::max(1, static_cast<int>(std::lround(img.height * side)));
    const int cw = std::max(1, static_cast<int>(std::lround(img.width * side)));
    const int oy = static_cast<int>(rng.below(static_cast<uint64_t>(img.height - ch + 1)));
    const int ox = static_cast<int>(rng.below(static_cast<uint64_t>(img.width - cw + 1)));
    const bool flip = rng.uniform() < 0.5;

    ImageInput crop;
    crop.id = img.id;
    crop.height = ch;
    crop.width = cw;
    crop.pixels.resize(static_cast<size_t>(ch) * cw * 3);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            for (int k = 0; k < 3; ++k) {
                const int sx = flip ? (cw - 1 - x) : x;
                crop.pixels[(static_cast<size_t>(y) * cw + x) * 3 + k] =
                    img.pixels[(static_cast<size_t>(oy + y) * img.width + (ox + sx)) * 3 + k];
            }
    return resize_image(crop, img.height);
}

}  // namespace capt
