#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xmgc/ops.hpp"
#include "xmgc/rng.hpp"
#include "xmgc/tensor.hpp"

namespace xmgc {

inline constexpr float kBnMomentum = 0.99f;
inline constexpr float kBnEpsilon = 1e-5f;
inline constexpr double kInitStddev = 0.02;

struct LayerSpec {
    enum Kind { kConv, kConvTranspose, kLinear, kFlatten, kGlobalAvgPool };
    enum Act { kNone, kRelu, kLeakyRelu, kSigmoid, kTanh };

    std::string name;
    Kind kind = kConv;
    int in_channels = 0;   // in_features for kLinear
    int out_channels = 0;  // out_features for kLinear
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    bool batchnorm = false;
    Act activation = kNone;
    // Index of an earlier layer whose output is concatenated onto this
    // layer's input (U-Net skip), or -1.
    int concat_with = -1;
};

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    int resolution = 0;
    int input_channels = 0;
    Shape output_shape;  // per-sample, e.g. {3, 64, 64} or {1}
};

/// Insertion-ordered name -> tensor map. Order is the checkpoint order.
class ParameterSet {
public:
    void add(std::string name, Tensor tensor);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Network {
    NetworkSpec spec;
    ParameterSet params;
};

/// U-Net: `depth` stride-2 conv blocks, mirrored transpose-conv decoder with
/// skip concatenation from encoder i to decoder depth-1-i, tanh output.
/// Channel widths min(base_filters * 2^i, 512).
Network build_unet_generator(int resolution, Rng& rng, int in_channels = 3, int out_channels = 3,
                             int base_filters = 64, int depth = 7);

/// Conditional discriminator over concat(condition, candidate): stride-2
/// conv stack down to 2x2, flatten, affine to one logit, sigmoid.
Network build_discriminator(int resolution, Rng& rng, int condition_channels = 3,
                            int candidate_channels = 3, int base_filters = 64);

/// Small from-scratch texture classifier: conv 16-32-64 stride-2 blocks,
/// global average pool, affine to num_classes logits.
Network build_classifier(int resolution, int num_classes, Rng& rng);

struct ForwardOptions {
    bool training = false;
    // Replaces every skip tensor with zeros (diagnostics: proves skips are
    // live paths). Never used by training or inference.
    bool zero_skips = false;
};

Tensor net_forward(const NetworkSpec& spec, ParameterSet& params, const Tensor& input,
                   const ForwardOptions& options = {});

/// Total element count of learnable tensors (running stats excluded).
std::int64_t parameter_count(const ParameterSet& params);

}  // namespace xmgc
