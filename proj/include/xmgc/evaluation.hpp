#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmgc/data_pipeline.hpp"
#include "xmgc/image.hpp"

namespace xmgc {

struct SsimConstants {
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;  // 8-bit

    double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
    double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

enum class SsimMode {
    kGlobal,    // one statistic set over the whole image, n-1 covariance
    kWindowed,  // 11x11 Gaussian (sigma 1.5) local statistics, averaged
};

struct SsimScore {
    double r = 0, g = 0, b = 0;
    double mean() const { return (r + g + b) / 3.0; }
};

/// Mean over R,G,B of the per-channel structural similarity between two
/// equally-sized images. Identical images score exactly 1 and the measure is
/// exactly symmetric.
SsimScore colour_ssim(const Image& x, const Image& y, SsimMode mode = SsimMode::kGlobal,
                      const SsimConstants& constants = {});

struct SsimRow {
    std::string filename;
    SsimScore score;
};

struct GroupReport {
    std::vector<SsimRow> rows;
    SsimScore average;  // arithmetic mean over rows
    std::vector<std::string> warnings;
};

/// Pairs images in two directories by filename and scores each pair.
/// Files without a counterpart (or with mismatched dimensions) produce a
/// warning and are excluded.
GroupReport evaluate_experiment_group(const std::string& generated_dir,
                                      const std::string& real_dir,
                                      SsimMode mode = SsimMode::kGlobal,
                                      const SsimConstants& constants = {});

/// CSV `filename,ssim_r,ssim_g,ssim_b,ssim_mean`.
void write_ssim_csv(const std::string& path, const GroupReport& report);

struct AccuracyRow {
    int iteration = 0;
    double real_acc = 0;
    double realgen_acc = 0;
    bool has_realgen = false;
    std::string modality;
};

/// Trains the texture classifier on real samples alone and (when a generated
/// set is provided) on the 50/50 real+generated mix with the same seed, and
/// reports held-out accuracy after each epoch. epochs == 0 evaluates the
/// untrained classifier once (chance-level baseline).
std::vector<AccuracyRow> classification_protocol(const std::vector<LabeledImage>& real_train,
                                                 const std::vector<LabeledImage>& generated_train,
                                                 const std::vector<LabeledImage>& test,
                                                 int num_classes, int epochs, std::uint64_t seed,
                                                 const std::string& modality);

/// CSV `iteration,real_acc,realgen_acc,modality`; realgen_acc is empty when
/// the run had no generated samples.
void write_accuracy_csv(const std::string& path, const std::vector<AccuracyRow>& rows);

}  // namespace xmgc
