#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmgc/data_pipeline.hpp"
#include "xmgc/nets.hpp"
#include "xmgc/tensor.hpp"

namespace xmgc {

struct TrainingConfig {
    std::string direction = "visual_to_tactile";  // or "tactile_to_visual"
    int resolution = 256;
    int batch_size = 1;
    int iterations = 20000;
    double learning_rate = 2e-4;
    double rmsprop_decay = 0.9;
    double rmsprop_epsilon = 1e-8;
    double l1_weight = 0.0;
    int jitter_margin = -1;  // -1 -> default_jitter_margin(resolution)
    std::uint64_t seed = 1;
    int checkpoint_every = 1000;

    int effective_jitter_margin() const;
    /// Encoder depth: 7, capped so the bottleneck is at least 2x2.
    int generator_depth() const;
    void validate() const;
};

/// Strict parse: unknown keys are rejected by name, types must match.
TrainingConfig config_from_json(const std::string& json_text);
std::string config_to_json(const TrainingConfig& config);

/// RMSProp caches for one parameter set, same names, plus the step count.
struct OptimizerState {
    ParameterSet cache;
    std::uint64_t steps = 0;
};

OptimizerState make_optimizer_state(const ParameterSet& params);

/// cache <- rho*cache + (1-rho)*g^2 ; p <- p - lr*g/sqrt(cache+eps), then
/// grads are cleared. Every learnable parameter must have a populated grad.
void rmsprop_step(ParameterSet& params, OptimizerState& state, double learning_rate, double rho,
                  double epsilon);

/// bce(d_real, 1) + bce(d_fake, 0)
Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake);
/// bce(d_fake, 1) + l1_weight * l1(generated, target)
Tensor generator_loss(const Tensor& d_fake, const Tensor& generated, const Tensor& target,
                      double l1_weight);

struct Checkpoint {
    std::uint32_t version = 1;
    std::uint64_t iteration = 0;
    std::string config_json;
    ParameterSet tensors;    // generator + discriminator params and stats
    ParameterSet optimizer;  // RMSProp caches, matching names
    std::vector<std::uint8_t> rng_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

struct LossRow {
    std::int64_t iteration;
    double loss_d;
    double loss_g;
    double loss_l1;
};

/// CSV `iteration,loss_d,loss_g,loss_l1`.
void write_loss_log(const std::string& path, const std::vector<LossRow>& rows);

struct TrainOptions {
    /// Keep generator parameters at initialization and skip its update step
    /// (adversarial-dynamics diagnostics).
    bool freeze_generator = false;
    std::string checkpoint_dir;  // empty: no checkpoint files
    std::string loss_log_path;   // empty: no CSV file
    const Checkpoint* resume = nullptr;
    /// Called after every iteration with the latest row.
    std::function<void(const LossRow&)> progress;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossRow> log;
};

/// Alternating optimization: a discriminator step on (real, detached fake)
/// then a generator step through the discriminator, both RMSProp. Trains on
/// the "train" rows of `data`; each sample is jitter-cropped to
/// config.resolution. Non-finite losses abort with NumericError.
TrainResult train(const TrainingConfig& config, const std::vector<LoadedPair>& data,
                  const TrainOptions& options = {});

/// Rebuilds the generator from a checkpoint and translates each input image
/// (which must match the checkpoint resolution) to the other modality.
std::vector<Image> generate(const Checkpoint& checkpoint, const std::vector<Image>& inputs);

}  // namespace xmgc
