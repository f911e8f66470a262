#include "xmgc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "xmgc/error.hpp"
#include "xmgc/nets.hpp"
#include "xmgc/ops.hpp"
#include "xmgc/training.hpp"

namespace fs = std::filesystem;

namespace xmgc {

namespace {

// One statistic set per channel; covariance with the n-1 factor. Variance
// goes through the same accumulation as covariance so that identical images
// produce bitwise-equal numerator and denominator (score exactly 1).
double covariance(const std::vector<double>& a, double mean_a, const std::vector<double>& b,
                  double mean_b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - mean_a) * (b[i] - mean_b);
    return acc / (static_cast<double>(a.size()) - 1.0);
}

double ssim_from_stats(double mx, double my, double sxx, double syy, double sxy, double c1,
                       double c2) {
    const double numerator = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
    const double denominator = (mx * mx + my * my + c1) * (sxx + syy + c2);
    return numerator / denominator;
}

double channel_ssim_global(const std::vector<double>& x, const std::vector<double>& y, double c1,
                           double c2) {
    const double n = static_cast<double>(x.size());
    double sum_x = 0.0, sum_y = 0.0;
    for (double v : x) sum_x += v;
    for (double v : y) sum_y += v;
    const double mx = sum_x / n;
    const double my = sum_y / n;
    const double sxy = covariance(x, mx, y, my);
    const double sxx = covariance(x, mx, x, mx);
    const double syy = covariance(y, my, y, my);
    return ssim_from_stats(mx, my, sxx, syy, sxy, c1, c2);
}

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;

const std::vector<double>& gaussian_window() {
    static const std::vector<double> weights = [] {
        std::vector<double> w(kWindow * kWindow);
        const int half = kWindow / 2;
        double total = 0.0;
        for (int i = 0; i < kWindow; ++i) {
            for (int j = 0; j < kWindow; ++j) {
                const double dy = i - half, dx = j - half;
                const double v =
                    std::exp(-(dx * dx + dy * dy) / (2.0 * kWindowSigma * kWindowSigma));
                w[i * kWindow + j] = v;
                total += v;
            }
        }
        for (double& v : w) v /= total;
        return w;
    }();
    return weights;
}

double channel_ssim_windowed(const std::vector<double>& x, const std::vector<double>& y,
                             int width, int height, double c1, double c2) {
    const std::vector<double>& w = gaussian_window();
    const int half = kWindow / 2;
    double total = 0.0;
    std::int64_t windows = 0;
    for (int cy = half; cy < height - half; ++cy) {
        for (int cx = half; cx < width - half; ++cx) {
            double mx = 0.0, my = 0.0;
            for (int i = 0; i < kWindow; ++i) {
                const int row = (cy + i - half) * width + cx - half;
                for (int j = 0; j < kWindow; ++j) {
                    const double weight = w[i * kWindow + j];
                    mx += weight * x[row + j];
                    my += weight * y[row + j];
                }
            }
            double sxx = 0.0, syy = 0.0, sxy = 0.0;
            for (int i = 0; i < kWindow; ++i) {
                const int row = (cy + i - half) * width + cx - half;
                for (int j = 0; j < kWindow; ++j) {
                    const double weight = w[i * kWindow + j];
                    const double dx = x[row + j] - mx;
                    const double dy = y[row + j] - my;
                    sxx += weight * (dx * dx);
                    syy += weight * (dy * dy);
                    // dx*dy rounds once, so swapping the images cannot change
                    // the accumulated value.
                    sxy += weight * (dx * dy);
                }
            }
            total += ssim_from_stats(mx, my, sxx, syy, sxy, c1, c2);
            ++windows;
        }
    }
    return total / static_cast<double>(windows);
}

std::vector<double> channel_of(const Image& img, int channel) {
    std::vector<double> out(static_cast<std::size_t>(img.width) * img.height);
    std::size_t k = 0;
    for (int y = 0; y < img.height; ++y) {
        const std::uint8_t* row = img.row(y);
        for (int x = 0; x < img.width; ++x) out[k++] = row[x * 3 + channel];
    }
    return out;
}

bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::map<std::string, std::string> image_files(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        out[entry.path().filename().string()] = entry.path().string();
    }
    return out;
}

}  // namespace

SsimScore colour_ssim(const Image& x, const Image& y, SsimMode mode,
                      const SsimConstants& constants) {
    if (x.width != y.width || x.height != y.height)
        throw ShapeError("images must match: " + std::to_string(x.width) + "x" +
                         std::to_string(x.height) + " vs " + std::to_string(y.width) + "x" +
                         std::to_string(y.height));
    if (static_cast<std::int64_t>(x.width) * x.height < 2)
        throw ValueError("image too small for similarity statistics");
    if (mode == SsimMode::kWindowed && (x.width < kWindow || x.height < kWindow))
        throw ValueError("windowed mode needs images of at least " + std::to_string(kWindow) +
                         "x" + std::to_string(kWindow));
    const double c1 = constants.c1(), c2 = constants.c2();
    SsimScore score;
    double* out[3] = {&score.r, &score.g, &score.b};
    for (int c = 0; c < 3; ++c) {
        const std::vector<double> xc = channel_of(x, c);
        const std::vector<double> yc = channel_of(y, c);
        *out[c] = mode == SsimMode::kGlobal
                      ? channel_ssim_global(xc, yc, c1, c2)
                      : channel_ssim_windowed(xc, yc, x.width, x.height, c1, c2);
    }
    return score;
}

GroupReport evaluate_experiment_group(const std::string& generated_dir,
                                      const std::string& real_dir, SsimMode mode,
                                      const SsimConstants& constants) {
    const auto generated = image_files(generated_dir);
    const auto real = image_files(real_dir);
    GroupReport report;
    for (const auto& [name, gpath] : generated) {
        auto it = real.find(name);
        if (it == real.end()) {
            report.warnings.push_back("generated image '" + name +
                                      "' has no real counterpart; excluded");
            continue;
        }
        Image gimg = read_image(gpath);
        Image rimg = read_image(it->second);
        if (gimg.width != rimg.width || gimg.height != rimg.height) {
            report.warnings.push_back("'" + name + "' is " + std::to_string(gimg.width) + "x" +
                                      std::to_string(gimg.height) + " generated vs " +
                                      std::to_string(rimg.width) + "x" +
                                      std::to_string(rimg.height) + " real; excluded");
            continue;
        }
        report.rows.push_back({name, colour_ssim(gimg, rimg, mode, constants)});
    }
    for (const auto& [name, rpath] : real) {
        if (!generated.count(name))
            report.warnings.push_back("real image '" + name +
                                      "' has no generated counterpart; excluded");
    }
    if (!report.rows.empty()) {
        for (const SsimRow& row : report.rows) {
            report.average.r += row.score.r;
            report.average.g += row.score.g;
            report.average.b += row.score.b;
        }
        const double n = static_cast<double>(report.rows.size());
        report.average.r /= n;
        report.average.g /= n;
        report.average.b /= n;
    } else {
        report.warnings.push_back("no filename-matched pairs between '" + generated_dir +
                                  "' and '" + real_dir + "'");
    }
    return report;
}

void write_ssim_csv(const std::string& path, const GroupReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open report for writing: " + path);
    out << "filename,ssim_r,ssim_g,ssim_b,ssim_mean\n";
    char line[256];
    for (const SsimRow& row : report.rows) {
        std::snprintf(line, sizeof(line), "%s,%.10g,%.10g,%.10g,%.10g\n", row.filename.c_str(),
                      row.score.r, row.score.g, row.score.b, row.score.mean());
        out << line;
    }
    for (const std::string& warning : report.warnings) out << "# warning: " << warning << "\n";
    if (!out) throw IoError("failed writing report: " + path);
}

// ---------------------------------------------------------------------------
// classification protocol

namespace {

// Classifier optimizer settings; the adversarial learning rate is too slow
// for a plain supervised head.
constexpr double kClassifierLr = 1e-3;
constexpr double kClassifierDecay = 0.9;
constexpr double kClassifierEps = 1e-8;
constexpr int kTrainBatch = 16;
constexpr int kEvalBatch = 32;

double classifier_accuracy(const NetworkSpec& spec, ParameterSet& params,
                           const std::vector<LabeledImage>& test) {
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < test.size(); start += kEvalBatch) {
        const std::size_t stop = std::min(test.size(), start + kEvalBatch);
        std::vector<const Image*> batch;
        for (std::size_t i = start; i < stop; ++i) batch.push_back(&test[i].image);
        Tensor logits = net_forward(spec, params, normalize_batch(batch), {.training = false});
        const std::vector<int> preds = argmax_rows(logits);
        for (std::size_t i = start; i < stop; ++i)
            if (preds[i - start] == test[i].class_id) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

std::vector<double> run_classifier(const std::vector<LabeledImage>& train,
                                   const std::vector<LabeledImage>& test, int num_classes,
                                   int epochs, std::uint64_t seed, int resolution) {
    Rng rng(seed, RngStream::Classifier);
    Network net = build_classifier(resolution, num_classes, rng);
    OptimizerState opt = make_optimizer_state(net.params);

    std::vector<double> accuracy;
    if (epochs == 0) {
        accuracy.push_back(classifier_accuracy(net.spec, net.params, test));
        return accuracy;
    }
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            const std::size_t j = rng.uniform_int(static_cast<std::uint32_t>(i + 1));
            std::swap(order[i], order[j]);
        }
        for (std::size_t start = 0; start < order.size(); start += kTrainBatch) {
            const std::size_t stop = std::min(order.size(), start + kTrainBatch);
            std::vector<const Image*> batch;
            std::vector<int> labels;
            for (std::size_t i = start; i < stop; ++i) {
                batch.push_back(&train[order[i]].image);
                labels.push_back(train[order[i]].class_id);
            }
            Tape tape;
            Tape::Scope scope(tape);
            Tensor logits =
                net_forward(net.spec, net.params, normalize_batch(batch), {.training = true});
            Tensor loss = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(loss.item64()))
                throw NumericError("non-finite classifier loss in epoch " +
                                   std::to_string(epoch));
            tape.backward(loss);
            rmsprop_step(net.params, opt, kClassifierLr, kClassifierDecay, kClassifierEps);
        }
        accuracy.push_back(classifier_accuracy(net.spec, net.params, test));
    }
    return accuracy;
}

int common_resolution(const std::vector<const std::vector<LabeledImage>*>& sets) {
    int res = 0;
    for (const auto* set : sets) {
        for (const LabeledImage& li : *set) {
            if (li.image.width != li.image.height)
                throw ShapeError("classifier inputs must be square, got " +
                                 std::to_string(li.image.width) + "x" +
                                 std::to_string(li.image.height) + " for '" + li.source_id + "'");
            if (res == 0) res = li.image.width;
            if (li.image.width != res)
                throw ShapeError("classifier inputs must share a resolution; '" + li.source_id +
                                 "' is " + std::to_string(li.image.width) + ", expected " +
                                 std::to_string(res));
        }
    }
    return res;
}

void check_labels(const std::vector<LabeledImage>& set, int num_classes, const char* what) {
    for (const LabeledImage& li : set) {
        if (li.class_id < 0 || li.class_id >= num_classes)
            throw ValueError(std::string(what) + " sample '" + li.source_id + "' has class " +
                             std::to_string(li.class_id) + ", outside [0, " +
                             std::to_string(num_classes) + ")");
    }
}

}  // namespace

std::vector<AccuracyRow> classification_protocol(const std::vector<LabeledImage>& real_train,
                                                 const std::vector<LabeledImage>& generated_train,
                                                 const std::vector<LabeledImage>& test,
                                                 int num_classes, int epochs, std::uint64_t seed,
                                                 const std::string& modality) {
    if (num_classes < 2) throw ValueError("classification needs at least 2 classes");
    if (epochs < 0) throw ValueError("epochs must be >= 0");
    if (real_train.empty()) throw ValueError("no real training samples");
    if (test.empty()) throw ValueError("no test samples");
    check_labels(real_train, num_classes, "real training");
    check_labels(generated_train, num_classes, "generated training");
    check_labels(test, num_classes, "test");
    const int resolution = common_resolution({&real_train, &generated_train, &test});

    const std::vector<double> real_acc =
        run_classifier(real_train, test, num_classes, epochs, seed, resolution);
    std::vector<double> mixed_acc;
    const bool has_generated = !generated_train.empty();
    if (has_generated) {
        const std::vector<LabeledImage> mixed = mix_real_generated(real_train, generated_train);
        if (mixed.empty()) throw ValueError("real+generated mix is empty");
        mixed_acc = run_classifier(mixed, test, num_classes, epochs, seed, resolution);
    }

    std::vector<AccuracyRow> rows;
    for (std::size_t i = 0; i < real_acc.size(); ++i) {
        AccuracyRow row;
        row.iteration = epochs == 0 ? 0 : static_cast<int>(i + 1);
        row.real_acc = real_acc[i];
        row.has_realgen = has_generated;
        if (has_generated) row.realgen_acc = mixed_acc[i];
        row.modality = modality;
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_accuracy_csv(const std::string& path, const std::vector<AccuracyRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open report for writing: " + path);
    out << "iteration,real_acc,realgen_acc,modality\n";
    char line[160];
    for (const AccuracyRow& row : rows) {
        if (row.has_realgen) {
            std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%s\n", row.iteration, row.real_acc,
                          row.realgen_acc, row.modality.c_str());
        } else {
            std::snprintf(line, sizeof(line), "%d,%.10g,,%s\n", row.iteration, row.real_acc,
                          row.modality.c_str());
        }
        out << line;
    }
    if (!out) throw IoError("failed writing report: " + path);
}

}  // namespace xmgc
