#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "paradis/error.hpp"
#include "paradis/tensor.hpp"

namespace paradis {

struct Dataset {
    Tensor<float> images;  // [N, C, H, W]
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

    Tensor<float> gather(const std::vector<std::size_t>& idx) const {
        const std::size_t per = images.size() / std::max<std::size_t>(1, size());
        Tensor<float> out(Shape{idx.size(), images.dim(1), images.dim(2), images.dim(3)});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(images.data() + idx[i] * per, per, out.data() + i * per);
        return out;
    }

    std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(labels[i]);
        return out;
    }

    Dataset subset(const std::vector<std::size_t>& idx) const {
        return Dataset{gather(idx), gather_labels(idx), num_classes};
    }

    // Consecutive batches of at most batch_size samples, up to `limit` samples.
    std::vector<Tensor<float>> batches(std::size_t batch_size, std::size_t limit = static_cast<std::size_t>(-1)) const {
        std::vector<Tensor<float>> out;
        const std::size_t n = std::min(limit, size());
        for (std::size_t s = 0; s < n; s += batch_size) {
            std::vector<std::size_t> idx(std::min(batch_size, n - s));
            std::iota(idx.begin(), idx.end(), s);
            out.push_back(gather(idx));
        }
        return out;
    }
};

// Source description, written "blobs:classes=10,samples=2048,seed=1",
// "folder:path=data/train,res=8" or "builtin".
struct DatasetSpec {
    std::string source = "blobs";
    std::size_t classes = 10;
    std::size_t samples = 2048;
    std::uint64_t seed = 1;
    double noise = 1.0;       // per-pixel noise std around the class prototype
    double separation = 1.0;  // prototype scale
    std::size_t channels = 3;
    std::size_t size = 8;  // square spatial resolution
    std::string path;
    double eval_fraction = 0.2;

    static DatasetSpec parse(const std::string& text) {
        DatasetSpec d;
        const auto colon = text.find(':');
        d.source = text.substr(0, colon);
        if (d.source == "builtin") {
            d.classes = 10;
            d.samples = 1000;
            d.seed = 7;
            d.noise = 0.8;
        } else if (d.source != "blobs" && d.source != "folder") {
            throw ConfigError({"unknown dataset source \"" + d.source + "\" (expected blobs, folder or builtin)"});
        }
        if (colon == std::string::npos) return d;
        std::stringstream ss(text.substr(colon + 1));
        std::string kv;
        std::vector<std::string> problems;
        while (std::getline(ss, kv, ',')) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                problems.push_back("dataset option \"" + kv + "\" is not key=value");
                continue;
            }
            const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
            try {
                if (k == "classes") d.classes = std::stoul(v);
                else if (k == "samples") d.samples = std::stoul(v);
                else if (k == "seed") d.seed = std::stoull(v);
                else if (k == "noise") d.noise = std::stod(v);
                else if (k == "separation") d.separation = std::stod(v);
                else if (k == "channels") d.channels = std::stoul(v);
                else if (k == "size" || k == "res") d.size = std::stoul(v);
                else if (k == "path") d.path = v;
                else if (k == "eval") d.eval_fraction = std::stod(v);
                else problems.push_back("unknown dataset option \"" + k + "\"");
            } catch (const std::exception&) {
                problems.push_back("bad value for dataset option \"" + k + "\": " + v);
            }
        }
        if (d.eval_fraction < 0 || d.eval_fraction >= 1) problems.push_back("dataset eval fraction must be in [0,1)");
        if (d.source == "folder" && d.path.empty()) problems.push_back("folder dataset needs path=");
        if (!problems.empty()) throw ConfigError(problems);
        return d;
    }

    std::string str() const {
        std::ostringstream os;
        os.precision(17);
        if (source == "folder") {
            os << "folder:path=" << path << ",res=" << size << ",eval=" << eval_fraction;
        } else {
            os << source << ":classes=" << classes << ",samples=" << samples << ",seed=" << seed << ",noise=" << noise
               << ",separation=" << separation << ",channels=" << channels << ",size=" << size
               << ",eval=" << eval_fraction;
        }
        return os.str();
    }
};

// Gaussian blobs in image space: each class has a spatially smooth random
// prototype; samples add white noise. Labels cycle so classes are balanced.
inline Dataset make_blobs(const DatasetSpec& d) {
    std::mt19937_64 rng(d.seed);
    std::normal_distribution<float> n01(0.f, 1.f);
    const std::size_t C = d.channels, S = d.size, per = C * S * S;
    std::vector<std::vector<float>> protos(d.classes, std::vector<float>(per));
    for (auto& p : protos) {
        std::vector<float> raw(per);
        for (auto& v : raw) v = n01(rng);
        // 3x3 box blur per channel, then unit RMS.
        double rms = 0;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    float acc = 0;
                    int cnt = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const long yy = long(y) + dy, xx = long(x) + dx;
                            if (yy < 0 || xx < 0 || yy >= long(S) || xx >= long(S)) continue;
                            acc += raw[(c * S + yy) * S + xx];
                            ++cnt;
                        }
                    p[(c * S + y) * S + x] = acc / float(cnt);
                    rms += double(acc / float(cnt)) * (acc / float(cnt));
                }
        const float k = float(d.separation / std::sqrt(rms / double(per)));
        for (auto& v : p) v *= k;
    }
    Dataset out;
    out.num_classes = d.classes;
    out.images = Tensor<float>(Shape{d.samples, C, S, S});
    out.labels.resize(d.samples);
    for (std::size_t i = 0; i < d.samples; ++i) {
        const std::size_t k = i % d.classes;
        out.labels[i] = static_cast<int>(k);
        float* dst = out.images.data() + i * per;
        for (std::size_t j = 0; j < per; ++j) dst[j] = protos[k][j] + float(d.noise) * n01(rng);
    }
    return out;
}

namespace detail {

// Binary (P5/P6) or ASCII (P2/P3) netpbm image as [3, H, W] floats in [0,1].
inline std::vector<float> read_pnm(const std::filesystem::path& file, std::size_t& h, std::size_t& w) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError("cannot open image " + file.string());
    std::string magic;
    in >> magic;
    auto next_int = [&]() {
        int v;
        while (true) {
            in >> std::ws;
            if (in.peek() == '#') {
                std::string line;
                std::getline(in, line);
                continue;
            }
            if (!(in >> v)) throw FormatError("truncated image header in " + file.string());
            return v;
        }
    };
    if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") throw FormatError("not a PGM/PPM image: " + file.string());
    w = std::size_t(next_int());
    h = std::size_t(next_int());
    const int maxv = next_int();
    const bool color = magic == "P3" || magic == "P6";
    const bool binary = magic == "P5" || magic == "P6";
    const std::size_t comps = color ? 3 : 1;
    std::vector<float> px(h * w * comps);
    if (binary) {
        in.get();
        for (auto& v : px) {
            int c = in.get();
            if (maxv > 255) c = (c << 8) | in.get();
            if (!in) throw FormatError("truncated pixel data in " + file.string());
            v = float(c) / float(maxv);
        }
    } else {
        for (auto& v : px) v = float(next_int()) / float(maxv);
    }
    std::vector<float> chw(3 * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) chw[(c * h + y) * w + x] = px[(y * w + x) * comps + (color ? c : 0)];
    return chw;
}

}  // namespace detail

// path/<class>/<image>.{ppm,pgm}; classes sorted by directory name, images
// resized by nearest neighbour to res x res.
inline Dataset load_image_folder(const DatasetSpec& d) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(d.path)) throw FormatError("dataset folder not found: " + d.path);
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(d.path))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    std::vector<std::pair<fs::path, int>> files;
    for (std::size_t k = 0; k < class_dirs.size(); ++k) {
        std::vector<fs::path> imgs;
        for (const auto& e : fs::directory_iterator(class_dirs[k])) {
            const auto ext = e.path().extension().string();
            if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") imgs.push_back(e.path());
        }
        std::sort(imgs.begin(), imgs.end());
        for (auto& p : imgs) files.emplace_back(p, int(k));
    }
    if (files.empty()) throw FormatError("no .ppm/.pgm images under " + d.path);
    const std::size_t S = d.size;
    Dataset out;
    out.num_classes = class_dirs.size();
    out.images = Tensor<float>(Shape{files.size(), 3, S, S});
    for (std::size_t i = 0; i < files.size(); ++i) {
        std::size_t h = 0, w = 0;
        const auto chw = detail::read_pnm(files[i].first, h, w);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x)
                    out.images.at(i, c, y, x) = chw[(c * h + y * h / S) * w + x * w / S];
        out.labels.push_back(files[i].second);
    }
    return out;
}

inline Dataset make_dataset(const DatasetSpec& d) {
    if (d.source == "folder") return load_image_folder(d);
    return make_blobs(d);
}

// Deterministic disjoint split; the eval part takes every class in proportion.
inline std::pair<Dataset, Dataset> split(const Dataset& all, double eval_fraction, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < all.size(); ++i) by_class[all.labels[i]].push_back(i);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::vector<std::size_t> train, eval;
    for (auto& [k, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_eval = static_cast<std::size_t>(std::round(eval_fraction * double(idx.size())));
        eval.insert(eval.end(), idx.begin(), idx.begin() + n_eval);
        train.insert(train.end(), idx.begin() + n_eval, idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(eval.begin(), eval.end());
    return {all.subset(train), all.subset(eval)};
}

}  // namespace paradis
