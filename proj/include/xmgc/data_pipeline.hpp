#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xmgc/image.hpp"
#include "xmgc/rng.hpp"
#include "xmgc/tensor.hpp"

namespace xmgc {

struct RoiRect {
    int x = 0, y = 0, w = 0, h = 0;
};

struct PairRecord {
    std::string visual_path;
    std::string tactile_path;
    int class_id = 0;
    std::string split;  // "train" | "test"
    std::optional<RoiRect> roi;  // applied to the tactile image
    std::string source_id;       // shared stem; drives the split hash
};

struct DatasetManifest {
    std::vector<PairRecord> rows;
    std::vector<std::string> warnings;
};

/// Scans <root>/visual and <root>/tactile for `<classNN>_<index>.<ext>`
/// files. Classes whose visual and tactile index sets match exactly pair
/// one-to-one by index; otherwise every visual image pairs with every
/// tactile image of the class. Rows come out sorted; one-sided classes
/// produce warnings.
DatasetManifest discover_pairs(const std::string& root);

/// CSV `visual_path,tactile_path,class_id,split,roi_x,roi_y,roi_w,roi_h`
/// (empty ROI fields mean whole image), then warnings as trailing
/// `# warning: ...` comment lines.
void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

/// Bounds-checked sub-image copy (crop with the dataset-facing contract).
Image extract_roi(const Image& image, const RoiRect& rect);

/// Independent uniform draws over {0..margin} for x and y.
std::pair<int, int> jitter_offsets(int margin, Rng& rng);

/// target x target crop at the given offset.
Image crop_at(const Image& image, int ox, int oy, int target);

/// pixel/127.5 - 1 into a [1,3,H,W] tensor; denormalize rounds back and is
/// exact on all 256 byte values.
Tensor normalize(const Image& image);
Image denormalize(const Tensor& tensor);

/// normalize() stacked into one [N,3,H,W] batch. All images must share
/// dimensions.
Tensor normalize_batch(const std::vector<const Image*>& images);

/// Default jitter margin for a resolution: 30 px at 256, scaled linearly.
int default_jitter_margin(int resolution);

struct LoadedPair {
    Image visual;
    Image tactile;
    int class_id = 0;
    std::string source_id;
    std::string split;
};

/// Reads, ROI-crops (tactile), and resizes both sides of every manifest row
/// to (resolution + margin) squared, ready for jitter-cropping.
std::vector<LoadedPair> bind_dataset(const DatasetManifest& manifest, int resolution, int margin);

struct SyntheticPair {
    Image visual;
    Image tactile;
    int class_id = 0;
    std::string source_id;
    std::string split;
};

/// Procedural paired textures: per class a stripe/check/dot height field
/// with class-specific period and orientation, rendered as a class-coloured
/// visual image and as a red-dominant relief-shaded tactile image of the
/// same, pixel-aligned geometry.
std::vector<SyntheticPair> make_synthetic_pairs(int num_classes, int pairs_per_class,
                                                int resolution, std::uint64_t seed);

/// Synthetic pairs resized onto the (resolution + margin) grid.
std::vector<LoadedPair> bind_synthetic(const std::vector<SyntheticPair>& pairs, int resolution,
                                       int margin);

struct LabeledImage {
    Image image;
    int class_id = 0;
    std::string source_id;
    bool generated = false;
};

/// 50/50 per-class mix; each class contributes min(real, generated) samples
/// from either side, in sorted order.
std::vector<LabeledImage> mix_real_generated(const std::vector<LabeledImage>& real,
                                             const std::vector<LabeledImage>& generated);

/// Split assignment by source_id hash: ~10% test, rest train. Deterministic
/// across runs and platforms.
std::string split_for_source(const std::string& source_id);

/// Class id from a `<class><NN>_<index>.<ext>` filename (trailing digits of
/// the part before the last underscore).
int class_id_from_filename(const std::string& path);

}  // namespace xmgc
