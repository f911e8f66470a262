#include "xmgc/data_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "xmgc/error.hpp"

namespace fs = std::filesystem;

namespace xmgc {

namespace {

constexpr const char* kManifestHeader =
    "visual_path,tactile_path,class_id,split,roi_x,roi_y,roi_w,roi_h";

bool has_image_extension(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

struct ParsedName {
    std::string class_token;  // e.g. "cloth03"
    int class_id = 0;
    std::string index;  // e.g. "0"
};

// `<token><digits>_<index>.<ext>`; the trailing digits of the token are the
// class id, the part after the last underscore is the per-image index.
ParsedName parse_image_name(const fs::path& path) {
    const std::string stem = path.stem().string();
    const auto underscore = stem.rfind('_');
    if (underscore == std::string::npos || underscore == 0 || underscore + 1 == stem.size())
        throw ValueError("cannot parse image filename '" + path.string() +
                         "': expected <class><NN>_<index>.<ext>");
    ParsedName out;
    out.class_token = stem.substr(0, underscore);
    out.index = stem.substr(underscore + 1);
    std::size_t digits = out.class_token.size();
    while (digits > 0 && std::isdigit(static_cast<unsigned char>(out.class_token[digits - 1])))
        --digits;
    if (digits == out.class_token.size())
        throw ValueError("cannot parse image filename '" + path.string() +
                         "': class token '" + out.class_token + "' has no trailing digits");
    out.class_id = std::stoi(out.class_token.substr(digits));
    return out;
}

struct ClassFiles {
    // index -> path, sorted by index string
    std::map<std::string, std::string> visual;
    std::map<std::string, std::string> tactile;
    int class_id = 0;
};

void scan_side(const fs::path& dir, bool visual_side, std::map<std::string, ClassFiles>& classes) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory missing: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        if (!has_image_extension(entry.path())) continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        ParsedName name = parse_image_name(p);
        ClassFiles& cf = classes[name.class_token];
        cf.class_id = name.class_id;
        auto& side = visual_side ? cf.visual : cf.tactile;
        side[name.index] = p.string();
    }
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

int parse_int_field(const std::string& text, const char* what, const std::string& line) {
    try {
        std::size_t pos = 0;
        int v = std::stoi(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ValueError(std::string("bad ") + what + " '" + text + "' in manifest row: " + line);
    }
}

struct Hsv {
    double h, s, v;  // h in degrees
};

void hsv_to_rgb(Hsv in, double& r, double& g, double& b) {
    const double c = in.v * in.s;
    const double hp = in.h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    switch (static_cast<int>(hp) % 6) {
        case 0: r1 = c; g1 = x; break;
        case 1: r1 = x; g1 = c; break;
        case 2: g1 = c; b1 = x; break;
        case 3: g1 = x; b1 = c; break;
        case 4: r1 = x; b1 = c; break;
        default: r1 = c; b1 = x; break;
    }
    const double m = in.v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

std::uint8_t to_byte(double v) {
    long r = std::lround(v);
    if (r < 0) r = 0;
    if (r > 255) r = 255;
    return static_cast<std::uint8_t>(r);
}

}  // namespace

std::string split_for_source(const std::string& source_id) {
    // FNV-1a 64 over the id plus a fixed salt; bucket 9 of 10 is the test set.
    std::uint64_t hash = 14695981039346656037ULL;
    const std::string salted = source_id + ":xmgc-split-v1";
    for (unsigned char c : salted) {
        hash ^= c;
        hash *= 1099511628211ULL;
    }
    return hash % 10 == 9 ? "test" : "train";
}

int class_id_from_filename(const std::string& path) {
    return parse_image_name(fs::path(path)).class_id;
}

DatasetManifest discover_pairs(const std::string& root) {
    const fs::path base(root);
    if (!fs::is_directory(base)) throw IoError("dataset root missing: " + root);
    std::map<std::string, ClassFiles> classes;
    scan_side(base / "visual", true, classes);
    scan_side(base / "tactile", false, classes);

    DatasetManifest manifest;
    for (const auto& [token, cf] : classes) {
        if (cf.visual.empty() || cf.tactile.empty()) {
            manifest.warnings.push_back("class '" + token + "' has images on only the " +
                                        (cf.visual.empty() ? "tactile" : "visual") +
                                        " side; excluded");
            continue;
        }
        auto key_set = [](const std::map<std::string, std::string>& side) {
            std::set<std::string> keys;
            for (const auto& [k, v] : side) keys.insert(k);
            return keys;
        };
        const bool index_matched = key_set(cf.visual) == key_set(cf.tactile);
        if (index_matched) {
            for (const auto& [index, vpath] : cf.visual) {
                PairRecord rec;
                rec.visual_path = vpath;
                rec.tactile_path = cf.tactile.at(index);
                rec.class_id = cf.class_id;
                rec.source_id = token + "_" + index;
                rec.split = split_for_source(rec.source_id);
                manifest.rows.push_back(std::move(rec));
            }
        } else {
            for (const auto& [vi, vpath] : cf.visual) {
                for (const auto& [ti, tpath] : cf.tactile) {
                    PairRecord rec;
                    rec.visual_path = vpath;
                    rec.tactile_path = tpath;
                    rec.class_id = cf.class_id;
                    rec.source_id = stem_of(vpath) + "+" + stem_of(tpath);
                    rec.split = split_for_source(rec.source_id);
                    manifest.rows.push_back(std::move(rec));
                }
            }
        }
    }
    std::sort(manifest.rows.begin(), manifest.rows.end(),
              [](const PairRecord& a, const PairRecord& b) {
                  return std::tie(a.class_id, a.source_id, a.visual_path, a.tactile_path) <
                         std::tie(b.class_id, b.source_id, b.visual_path, b.tactile_path);
              });
    return manifest;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open manifest for writing: " + path);
    out << kManifestHeader << "\n";
    for (const PairRecord& rec : manifest.rows) {
        out << rec.visual_path << ',' << rec.tactile_path << ',' << rec.class_id << ','
            << rec.split << ',';
        if (rec.roi) {
            out << rec.roi->x << ',' << rec.roi->y << ',' << rec.roi->w << ',' << rec.roi->h;
        } else {
            out << ",,,";
        }
        out << "\n";
    }
    for (const std::string& warning : manifest.warnings) out << "# warning: " << warning << "\n";
    if (!out) throw IoError("failed writing manifest: " + path);
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest: " + path);
    DatasetManifest manifest;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("# warning: ", 0) == 0) {
            manifest.warnings.push_back(line.substr(11));
            continue;
        }
        if (line[0] == '#') continue;
        if (first && line == kManifestHeader) {
            first = false;
            continue;
        }
        first = false;
        std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 8)
            throw ValueError("manifest row has " + std::to_string(f.size()) +
                             " fields, expected 8: " + line);
        PairRecord rec;
        rec.visual_path = f[0];
        rec.tactile_path = f[1];
        rec.class_id = parse_int_field(f[2], "class_id", line);
        rec.split = f[3];
        if (rec.split != "train" && rec.split != "test")
            throw ValueError("bad split '" + rec.split + "' in manifest row: " + line);
        const bool any_roi = !f[4].empty() || !f[5].empty() || !f[6].empty() || !f[7].empty();
        const bool all_roi = !f[4].empty() && !f[5].empty() && !f[6].empty() && !f[7].empty();
        if (any_roi != all_roi)
            throw ValueError("partial ROI in manifest row (need all four fields or none): " + line);
        if (all_roi) {
            RoiRect roi;
            roi.x = parse_int_field(f[4], "roi_x", line);
            roi.y = parse_int_field(f[5], "roi_y", line);
            roi.w = parse_int_field(f[6], "roi_w", line);
            roi.h = parse_int_field(f[7], "roi_h", line);
            rec.roi = roi;
        }
        rec.source_id = stem_of(rec.visual_path) == stem_of(rec.tactile_path)
                            ? stem_of(rec.visual_path)
                            : stem_of(rec.visual_path) + "+" + stem_of(rec.tactile_path);
        manifest.rows.push_back(std::move(rec));
    }
    return manifest;
}

Image extract_roi(const Image& image, const RoiRect& rect) {
    if (rect.w <= 0 || rect.h <= 0)
        throw ValueError("ROI must have positive size, got " + std::to_string(rect.w) + "x" +
                         std::to_string(rect.h));
    return crop(image, rect.x, rect.y, rect.w, rect.h);
}

std::pair<int, int> jitter_offsets(int margin, Rng& rng) {
    if (margin < 0) throw ValueError("jitter margin must be >= 0, got " + std::to_string(margin));
    if (margin == 0) return {0, 0};
    const int ox = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(margin) + 1));
    const int oy = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(margin) + 1));
    return {ox, oy};
}

Image crop_at(const Image& image, int ox, int oy, int target) {
    return crop(image, ox, oy, target, target);
}

Tensor normalize(const Image& image) {
    Tensor t = Tensor::zeros({1, 3, image.height, image.width});
    float* data = t.mutable_values().data();
    const std::int64_t plane = static_cast<std::int64_t>(image.height) * image.width;
    for (int y = 0; y < image.height; ++y) {
        const std::uint8_t* row = image.row(y);
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                data[c * plane + y * image.width + x] =
                    static_cast<float>(row[x * 3 + c]) / 127.5f - 1.0f;
            }
        }
    }
    return t;
}

Image denormalize(const Tensor& tensor) {
    const auto& shape = tensor.shape();
    std::int64_t channels, height, width;
    if (shape.size() == 4 && shape[0] == 1) {
        channels = shape[1];
        height = shape[2];
        width = shape[3];
    } else if (shape.size() == 3) {
        channels = shape[0];
        height = shape[1];
        width = shape[2];
    } else {
        throw ShapeError("denormalize expects [1,3,H,W] or [3,H,W], got " + shape_str(shape));
    }
    if (channels != 3)
        throw ShapeError("denormalize expects 3 channels, got " + shape_str(shape));
    Image img = make_image(static_cast<int>(width), static_cast<int>(height));
    const float* data = tensor.values().data();
    const std::int64_t plane = height * width;
    for (std::int64_t y = 0; y < height; ++y) {
        std::uint8_t* row = img.row(static_cast<int>(y));
        for (std::int64_t x = 0; x < width; ++x) {
            for (std::int64_t c = 0; c < 3; ++c) {
                const double v = static_cast<double>(data[c * plane + y * width + x]);
                row[x * 3 + c] = to_byte((v + 1.0) * 127.5);
            }
        }
    }
    return img;
}

Tensor normalize_batch(const std::vector<const Image*>& images) {
    if (images.empty()) throw ValueError("normalize_batch needs at least one image");
    const int h = images[0]->height, w = images[0]->width;
    Tensor batch = Tensor::zeros({static_cast<int>(images.size()), 3, h, w});
    const std::int64_t sample = 3LL * h * w;
    float* dst = batch.mutable_values().data();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->height != h || images[i]->width != w)
            throw ShapeError("normalize_batch: image " + std::to_string(i) + " is " +
                             std::to_string(images[i]->width) + "x" +
                             std::to_string(images[i]->height) + ", expected " +
                             std::to_string(w) + "x" + std::to_string(h));
        Tensor one = normalize(*images[i]);
        std::memcpy(dst + static_cast<std::int64_t>(i) * sample, one.values().data(),
                    static_cast<std::size_t>(sample) * sizeof(float));
    }
    return batch;
}

int default_jitter_margin(int resolution) {
    if (resolution <= 0) throw ValueError("resolution must be positive");
    return static_cast<int>((30LL * resolution + 128) / 256);
}

std::vector<LoadedPair> bind_dataset(const DatasetManifest& manifest, int resolution, int margin) {
    if (resolution <= 0 || margin < 0)
        throw ValueError("bad bind geometry: resolution " + std::to_string(resolution) +
                         ", margin " + std::to_string(margin));
    const int side = resolution + margin;
    std::vector<LoadedPair> out;
    out.reserve(manifest.rows.size());
    for (const PairRecord& rec : manifest.rows) {
        LoadedPair pair;
        pair.class_id = rec.class_id;
        pair.source_id = rec.source_id;
        pair.split = rec.split;
        Image visual = read_image(rec.visual_path);
        Image tactile = read_image(rec.tactile_path);
        if (rec.roi) tactile = extract_roi(tactile, *rec.roi);
        pair.visual = resize_bicubic(visual, side, side);
        pair.tactile = resize_bicubic(tactile, side, side);
        out.push_back(std::move(pair));
    }
    return out;
}

std::vector<LoadedPair> bind_synthetic(const std::vector<SyntheticPair>& pairs, int resolution,
                                       int margin) {
    const int side = resolution + margin;
    std::vector<LoadedPair> out;
    out.reserve(pairs.size());
    for (const SyntheticPair& p : pairs) {
        LoadedPair lp;
        lp.class_id = p.class_id;
        lp.source_id = p.source_id;
        lp.split = p.split;
        lp.visual = resize_bicubic(p.visual, side, side);
        lp.tactile = resize_bicubic(p.tactile, side, side);
        out.push_back(std::move(lp));
    }
    return out;
}

std::vector<SyntheticPair> make_synthetic_pairs(int num_classes, int pairs_per_class,
                                                int resolution, std::uint64_t seed) {
    if (num_classes <= 0 || pairs_per_class <= 0 || resolution <= 0)
        throw ValueError("synthetic dataset needs positive classes, pairs, and resolution");
    Rng rng(seed, RngStream::Synthetic);
    std::vector<SyntheticPair> out;
    out.reserve(static_cast<std::size_t>(num_classes) * pairs_per_class);
    const double scale = resolution / 64.0;
    for (int c = 0; c < num_classes; ++c) {
        const int kind = c % 3;  // 0 stripes, 1 checks, 2 dots
        const int level = c / 3;
        const double period = (6.0 + 3.0 * level) * scale;
        const double theta = (20.0 + 50.0 * level) * (3.14159265358979323846 / 180.0);
        const double ct = std::cos(theta), st = std::sin(theta);
        double base_r, base_g, base_b;
        hsv_to_rgb({360.0 * c / num_classes, 0.75, 0.95}, base_r, base_g, base_b);
        for (int p = 0; p < pairs_per_class; ++p) {
            const double phase_x = rng.uniform() * 2.0 * 3.14159265358979323846;
            const double phase_y = rng.uniform() * 2.0 * 3.14159265358979323846;
            SyntheticPair pair;
            pair.class_id = c;
            char id[32];
            std::snprintf(id, sizeof(id), "synth%02d_%d", c, p);
            pair.source_id = id;
            pair.split = split_for_source(pair.source_id);
            pair.visual = make_image(resolution, resolution);
            pair.tactile = make_image(resolution, resolution);
            for (int y = 0; y < resolution; ++y) {
                std::uint8_t* vrow = pair.visual.row(y);
                std::uint8_t* trow = pair.tactile.row(y);
                for (int x = 0; x < resolution; ++x) {
                    // Rotated texture coordinates shared by both modalities.
                    const double u = x * ct + y * st;
                    const double v = -x * st + y * ct;
                    double h;
                    if (kind == 0) {
                        h = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * u / period +
                                                 phase_x);
                    } else if (kind == 1) {
                        h = 0.5 + 0.5 *
                                      std::sin(2.0 * 3.14159265358979323846 * u / period +
                                               phase_x) *
                                      std::sin(2.0 * 3.14159265358979323846 * v / period +
                                               phase_y);
                    } else {
                        // Nearest dot on a square lattice, gaussian falloff.
                        const double su = u / period + phase_x / (2.0 * 3.14159265358979323846);
                        const double sv = v / period + phase_y / (2.0 * 3.14159265358979323846);
                        const double du = (su - std::floor(su + 0.5)) * period;
                        const double dv = (sv - std::floor(sv + 0.5)) * period;
                        const double sigma = period / 4.0;
                        h = std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
                    }
                    vrow[x * 3 + 0] = to_byte(255.0 * base_r * (0.30 + 0.70 * h));
                    vrow[x * 3 + 1] = to_byte(255.0 * base_g * (0.30 + 0.70 * h));
                    vrow[x * 3 + 2] = to_byte(255.0 * base_b * (0.30 + 0.70 * h));
                    trow[x * 3 + 0] = to_byte(70.0 + 170.0 * h);
                    trow[x * 3 + 1] = to_byte(25.0 + 55.0 * h);
                    trow[x * 3 + 2] = to_byte(25.0 + 55.0 * h);
                }
            }
            out.push_back(std::move(pair));
        }
    }
    return out;
}

std::vector<LabeledImage> mix_real_generated(const std::vector<LabeledImage>& real,
                                             const std::vector<LabeledImage>& generated) {
    std::map<int, std::vector<const LabeledImage*>> by_class_real, by_class_gen;
    for (const auto& li : real) by_class_real[li.class_id].push_back(&li);
    for (const auto& li : generated) by_class_gen[li.class_id].push_back(&li);
    for (const auto& [cls, v] : by_class_real)
        if (!by_class_gen.count(cls))
            throw ValueError("class " + std::to_string(cls) +
                             " present in real set but missing from generated set");
    for (const auto& [cls, v] : by_class_gen)
        if (!by_class_real.count(cls))
            throw ValueError("class " + std::to_string(cls) +
                             " present in generated set but missing from real set");
    auto by_source = [](const LabeledImage* a, const LabeledImage* b) {
        return a->source_id < b->source_id;
    };
    std::vector<LabeledImage> out;
    for (auto& [cls, reals] : by_class_real) {
        auto& gens = by_class_gen[cls];
        std::sort(reals.begin(), reals.end(), by_source);
        std::sort(gens.begin(), gens.end(), by_source);
        const std::size_t n = std::min(reals.size(), gens.size());
        for (std::size_t i = 0; i < n; ++i) out.push_back(*reals[i]);
        for (std::size_t i = 0; i < n; ++i) out.push_back(*gens[i]);
    }
    return out;
}

}  // namespace xmgc
