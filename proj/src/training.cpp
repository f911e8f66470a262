#include "xmgc/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "xmgc/error.hpp"
#include "xmgc/ops.hpp"

namespace fs = std::filesystem;

namespace xmgc {

namespace {

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_exact(int v) {
    int k = 0;
    while ((1 << k) < v) ++k;
    return k;
}

}  // namespace

int TrainingConfig::effective_jitter_margin() const {
    return jitter_margin >= 0 ? jitter_margin : default_jitter_margin(resolution);
}

int TrainingConfig::generator_depth() const {
    return std::min(7, log2_exact(resolution) - 1);
}

void TrainingConfig::validate() const {
    if (direction != "visual_to_tactile" && direction != "tactile_to_visual")
        throw ValueError("direction must be visual_to_tactile or tactile_to_visual, got '" +
                         direction + "'");
    if (!power_of_two(resolution) || resolution < 4)
        throw ValueError("resolution must be a power of two >= 4, got " +
                         std::to_string(resolution));
    if (batch_size < 1) throw ValueError("batch_size must be >= 1");
    if (iterations < 1) throw ValueError("iterations must be >= 1");
    if (!(learning_rate > 0)) throw ValueError("learning_rate must be positive");
    if (!(rmsprop_decay >= 0 && rmsprop_decay < 1))
        throw ValueError("rmsprop_decay must be in [0, 1)");
    if (!(rmsprop_epsilon > 0)) throw ValueError("rmsprop_epsilon must be positive");
    if (l1_weight < 0) throw ValueError("l1_weight must be >= 0");
    if (jitter_margin < -1) throw ValueError("jitter_margin must be >= 0 (or -1 for default)");
    if (checkpoint_every < 1) throw ValueError("checkpoint_every must be >= 1");
}

TrainingConfig config_from_json(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ValueError("config must be a JSON object");
    TrainingConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        try {
            if (key == "direction") {
                cfg.direction = value.get<std::string>();
            } else if (key == "resolution") {
                cfg.resolution = value.get<int>();
            } else if (key == "batch_size") {
                cfg.batch_size = value.get<int>();
            } else if (key == "iterations") {
                cfg.iterations = value.get<int>();
            } else if (key == "learning_rate") {
                cfg.learning_rate = value.get<double>();
            } else if (key == "rmsprop_decay") {
                cfg.rmsprop_decay = value.get<double>();
            } else if (key == "rmsprop_epsilon") {
                cfg.rmsprop_epsilon = value.get<double>();
            } else if (key == "l1_weight") {
                cfg.l1_weight = value.get<double>();
            } else if (key == "jitter_margin") {
                cfg.jitter_margin = value.get<int>();
            } else if (key == "seed") {
                cfg.seed = value.get<std::uint64_t>();
            } else if (key == "checkpoint_every") {
                cfg.checkpoint_every = value.get<int>();
            } else {
                throw ValueError("unknown config key '" + key + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValueError("bad value for config key '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

std::string config_to_json(const TrainingConfig& config) {
    nlohmann::ordered_json doc;
    doc["direction"] = config.direction;
    doc["resolution"] = config.resolution;
    doc["batch_size"] = config.batch_size;
    doc["iterations"] = config.iterations;
    doc["learning_rate"] = config.learning_rate;
    doc["rmsprop_decay"] = config.rmsprop_decay;
    doc["rmsprop_epsilon"] = config.rmsprop_epsilon;
    doc["l1_weight"] = config.l1_weight;
    doc["jitter_margin"] = config.jitter_margin;
    doc["seed"] = config.seed;
    doc["checkpoint_every"] = config.checkpoint_every;
    return doc.dump(2);
}

OptimizerState make_optimizer_state(const ParameterSet& params) {
    OptimizerState state;
    for (const auto& [name, tensor] : params) {
        if (tensor.requires_grad()) state.cache.add(name, Tensor::zeros(tensor.shape()));
    }
    return state;
}

void rmsprop_step(ParameterSet& params, OptimizerState& state, double learning_rate, double rho,
                  double epsilon) {
    for (auto& [name, param] : params) {
        if (!param.requires_grad()) continue;
        if (!param.has_grad())
            throw ValueError("optimizer step with unpopulated gradient for '" + name + "'");
        Tensor& cache = state.cache.at(name);
        auto c = cache.mutable_values();
        auto p = param.mutable_values();
        auto g = param.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double ci = rho * c[i] + (1.0 - rho) * gi * gi;
            c[i] = static_cast<float>(ci);
            p[i] = static_cast<float>(p[i] - learning_rate * gi / std::sqrt(ci + epsilon));
        }
        param.clear_grad();
    }
    ++state.steps;
}

Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake) {
    return add(bce_loss(d_real, 1), bce_loss(d_fake, 0));
}

Tensor generator_loss(const Tensor& d_fake, const Tensor& generated, const Tensor& target,
                      double l1_weight) {
    return add(bce_loss(d_fake, 1),
               scale(l1_loss(generated, target), static_cast<float>(l1_weight)));
}

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace {

constexpr char kMagic[4] = {'X', 'M', 'G', 'C'};

void put_u32(std::ofstream& out, std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& out, std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_tensors(std::ofstream& out, const ParameterSet& set) {
    put_u32(out, static_cast<std::uint32_t>(set.size()));
    for (const auto& [name, tensor] : set) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        out.put(0);  // dtype: f32
        const Shape& shape = tensor.shape();
        put_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
        auto vals = tensor.values();
        out.write(reinterpret_cast<const char*>(vals.data()),
                  static_cast<std::streamsize>(vals.size() * sizeof(float)));
    }
}

struct Reader {
    std::ifstream in;
    std::string path;

    void bytes(void* dst, std::size_t n) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw CheckpointError(CheckpointStatus::Truncated,
                                  "checkpoint truncated: " + path);
    }
    std::uint32_t u32() {
        std::uint8_t b[4];
        bytes(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint8_t b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
};

ParameterSet read_tensors(Reader& r) {
    ParameterSet set;
    const std::uint32_t count = r.u32();
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        std::uint8_t dtype = 0;
        r.bytes(&dtype, 1);
        if (dtype != 0)
            throw ValueError("checkpoint tensor '" + name + "' has unsupported dtype " +
                             std::to_string(dtype));
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        std::int64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<int>(r.u32());
            numel *= shape[i];
        }
        std::vector<float> values(static_cast<std::size_t>(numel));
        r.bytes(values.data(), values.size() * sizeof(float));
        set.add(name, Tensor::from(shape, std::move(values)));
    }
    return set;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, 4);
    put_u32(out, checkpoint.version);
    put_u64(out, checkpoint.iteration);
    put_u32(out, static_cast<std::uint32_t>(checkpoint.config_json.size()));
    out.write(checkpoint.config_json.data(),
              static_cast<std::streamsize>(checkpoint.config_json.size()));
    put_tensors(out, checkpoint.tensors);
    put_tensors(out, checkpoint.optimizer);
    put_u32(out, static_cast<std::uint32_t>(checkpoint.rng_state.size()));
    out.write(reinterpret_cast<const char*>(checkpoint.rng_state.data()),
              static_cast<std::streamsize>(checkpoint.rng_state.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r;
    r.path = path;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError(CheckpointStatus::BadMagic, "not a checkpoint file: " + path);
    Checkpoint cp;
    cp.version = r.u32();
    if (cp.version != 1)
        throw CheckpointError(CheckpointStatus::VersionMismatch,
                              "checkpoint version " + std::to_string(cp.version) +
                                  " not supported (expected 1): " + path);
    cp.iteration = r.u64();
    const std::uint32_t config_len = r.u32();
    cp.config_json.resize(config_len);
    r.bytes(cp.config_json.data(), config_len);
    cp.tensors = read_tensors(r);
    cp.optimizer = read_tensors(r);
    const std::uint32_t rng_len = r.u32();
    cp.rng_state.resize(rng_len);
    r.bytes(cp.rng_state.data(), rng_len);
    return cp;
}

void write_loss_log(const std::string& path, const std::vector<LossRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open loss log for writing: " + path);
    out << "iteration,loss_d,loss_g,loss_l1\n";
    char line[160];
    for (const LossRow& row : rows) {
        std::snprintf(line, sizeof(line), "%lld,%.10g,%.10g,%.10g\n",
                      static_cast<long long>(row.iteration), row.loss_d, row.loss_g, row.loss_l1);
        out << line;
    }
    if (!out) throw IoError("failed writing loss log: " + path);
}

// ---------------------------------------------------------------------------
// training loop

namespace {

Tensor batch_normalize(const std::vector<Image>& images) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(images.size());
    for (const Image& img : images) ptrs.push_back(&img);
    return normalize_batch(ptrs);
}

void copy_into_params(ParameterSet& params, const ParameterSet& source, const std::string& prefix,
                      const std::string& what) {
    for (auto& [name, tensor] : params) {
        const Tensor* src = source.find(prefix + name);
        if (!src)
            throw ValueError(what + " is missing tensor '" + prefix + name + "'");
        if (src->shape() != tensor.shape())
            throw ShapeError(what + " tensor '" + prefix + name + "' has shape " +
                             shape_str(src->shape()) + ", expected " + shape_str(tensor.shape()));
        std::memcpy(tensor.mutable_values().data(), src->values().data(),
                    static_cast<std::size_t>(tensor.numel()) * sizeof(float));
    }
}

Checkpoint snapshot(const Network& gen, const Network& disc, const OptimizerState& opt_g,
                    const OptimizerState& opt_d, const Rng& data_rng, std::uint64_t iteration,
                    const std::string& config_json) {
    Checkpoint cp;
    cp.iteration = iteration;
    cp.config_json = config_json;
    for (const auto& [name, tensor] : gen.params) cp.tensors.add("g." + name, tensor.clone());
    for (const auto& [name, tensor] : disc.params) cp.tensors.add("d." + name, tensor.clone());
    for (const auto& [name, tensor] : opt_g.cache) cp.optimizer.add("g." + name, tensor.clone());
    for (const auto& [name, tensor] : opt_d.cache) cp.optimizer.add("d." + name, tensor.clone());
    auto state = data_rng.serialize();
    cp.rng_state.assign(state.begin(), state.end());
    return cp;
}

}  // namespace

TrainResult train(const TrainingConfig& config, const std::vector<LoadedPair>& data,
                  const TrainOptions& options) {
    config.validate();
    const int res = config.resolution;
    const int margin = config.effective_jitter_margin();
    const int side = res + margin;
    const bool v2t = config.direction == "visual_to_tactile";

    std::vector<const LoadedPair*> train_pairs;
    for (const LoadedPair& pair : data) {
        if (pair.split != "train") continue;
        if (pair.visual.width != side || pair.visual.height != side ||
            pair.tactile.width != side || pair.tactile.height != side)
            throw ShapeError("pair '" + pair.source_id + "' is " +
                             std::to_string(pair.visual.width) + "x" +
                             std::to_string(pair.visual.height) + ", expected " +
                             std::to_string(side) + "x" + std::to_string(side) +
                             " (resolution + jitter margin)");
        train_pairs.push_back(&pair);
    }
    if (train_pairs.empty()) throw ValueError("no pairs with split=train to train on");

    Rng init_rng(config.seed, RngStream::ParamInit);
    Network gen = build_unet_generator(res, init_rng, 3, 3, 64, config.generator_depth());
    Network disc = build_discriminator(res, init_rng);
    OptimizerState opt_g = make_optimizer_state(gen.params);
    OptimizerState opt_d = make_optimizer_state(disc.params);
    Rng data_rng(config.seed, RngStream::Data);
    const std::string config_json = config_to_json(config);
    std::int64_t start = 0;

    if (options.resume) {
        const Checkpoint& cp = *options.resume;
        copy_into_params(gen.params, cp.tensors, "g.", "resume checkpoint");
        copy_into_params(disc.params, cp.tensors, "d.", "resume checkpoint");
        copy_into_params(opt_g.cache, cp.optimizer, "g.", "resume checkpoint optimizer");
        copy_into_params(opt_d.cache, cp.optimizer, "d.", "resume checkpoint optimizer");
        if (cp.rng_state.size() != 16)
            throw ValueError("resume checkpoint has malformed RNG state");
        data_rng = Rng::deserialize(cp.rng_state.data());
        start = static_cast<std::int64_t>(cp.iteration);
        opt_g.steps = opt_d.steps = cp.iteration;
        if (start >= config.iterations)
            throw ValueError("checkpoint is already at iteration " + std::to_string(start) +
                             " of " + std::to_string(config.iterations));
    }

    if (!options.checkpoint_dir.empty()) fs::create_directories(options.checkpoint_dir);

    std::vector<LossRow> log;
    log.reserve(static_cast<std::size_t>(config.iterations - start));

    for (std::int64_t iter = start + 1; iter <= config.iterations; ++iter) {
        std::vector<Image> cond_imgs, targ_imgs;
        cond_imgs.reserve(static_cast<std::size_t>(config.batch_size));
        targ_imgs.reserve(static_cast<std::size_t>(config.batch_size));
        for (int b = 0; b < config.batch_size; ++b) {
            const std::uint32_t idx =
                data_rng.uniform_int(static_cast<std::uint32_t>(train_pairs.size()));
            const auto [ox, oy] = jitter_offsets(margin, data_rng);
            const LoadedPair& pair = *train_pairs[idx];
            const Image& cond_src = v2t ? pair.visual : pair.tactile;
            const Image& targ_src = v2t ? pair.tactile : pair.visual;
            cond_imgs.push_back(crop_at(cond_src, ox, oy, res));
            targ_imgs.push_back(crop_at(targ_src, ox, oy, res));
        }
        Tensor condition = batch_normalize(cond_imgs);
        Tensor target = batch_normalize(targ_imgs);

        // Generator forward on its own tape so the generator step can reuse it.
        Tape tape_g;
        Tensor fake;
        if (options.freeze_generator) {
            fake = net_forward(gen.spec, gen.params, condition, {.training = true});
        } else {
            Tape::Scope scope(tape_g);
            fake = net_forward(gen.spec, gen.params, condition, {.training = true});
        }

        // Discriminator step against real and detached fake.
        double loss_d_value;
        {
            Tape tape_d;
            Tape::Scope scope(tape_d);
            Tensor d_real = net_forward(disc.spec, disc.params,
                                        concat_channels(condition, target), {.training = true});
            Tensor d_fake =
                net_forward(disc.spec, disc.params, concat_channels(condition, fake.detached()),
                            {.training = true});
            Tensor loss_d = discriminator_loss(d_real, d_fake);
            loss_d_value = loss_d.item64();
            tape_d.backward(loss_d);
        }
        rmsprop_step(disc.params, opt_d, config.learning_rate, config.rmsprop_decay,
                     config.rmsprop_epsilon);

        // Generator step through the updated discriminator.
        double loss_g_value, loss_l1_value;
        if (options.freeze_generator) {
            Tensor d_on_fake = net_forward(disc.spec, disc.params,
                                           concat_channels(condition, fake), {.training = true});
            loss_g_value = generator_loss(d_on_fake, fake, target, config.l1_weight).item64();
            loss_l1_value = l1_loss(fake, target).item64();
        } else {
            Tape::Scope scope(tape_g);
            Tensor d_on_fake = net_forward(disc.spec, disc.params,
                                           concat_channels(condition, fake), {.training = true});
            Tensor bce_g = bce_loss(d_on_fake, 1);
            Tensor l1 = l1_loss(fake, target);
            Tensor loss_g = add(bce_g, scale(l1, static_cast<float>(config.l1_weight)));
            loss_g_value = loss_g.item64();
            loss_l1_value = l1.item64();
            tape_g.backward(loss_g);
            rmsprop_step(gen.params, opt_g, config.learning_rate, config.rmsprop_decay,
                         config.rmsprop_epsilon);
            // The generator step backpropagated through the discriminator;
            // drop those gradients before the next discriminator step.
            for (auto& [name, param] : disc.params) param.clear_grad();
        }

        if (!std::isfinite(loss_d_value) || !std::isfinite(loss_g_value) ||
            !std::isfinite(loss_l1_value))
            throw NumericError("non-finite loss at iteration " + std::to_string(iter) +
                               " (loss_d=" + std::to_string(loss_d_value) +
                               ", loss_g=" + std::to_string(loss_g_value) + ")");

        LossRow row{iter, loss_d_value, loss_g_value, loss_l1_value};
        log.push_back(row);
        if (options.progress) options.progress(row);

        if (!options.checkpoint_dir.empty() &&
            (iter % config.checkpoint_every == 0 || iter == config.iterations)) {
            Checkpoint cp = snapshot(gen, disc, opt_g, opt_d, data_rng,
                                     static_cast<std::uint64_t>(iter), config_json);
            char name[48];
            std::snprintf(name, sizeof(name), "checkpoint_%06lld.bin",
                          static_cast<long long>(iter));
            save_checkpoint((fs::path(options.checkpoint_dir) / name).string(), cp);
            if (iter == config.iterations)
                save_checkpoint((fs::path(options.checkpoint_dir) / "checkpoint_final.bin").string(),
                                cp);
        }
    }

    if (!options.loss_log_path.empty()) write_loss_log(options.loss_log_path, log);

    TrainResult result;
    result.checkpoint = snapshot(gen, disc, opt_g, opt_d, data_rng,
                                 static_cast<std::uint64_t>(config.iterations), config_json);
    result.log = std::move(log);
    return result;
}

std::vector<Image> generate(const Checkpoint& checkpoint, const std::vector<Image>& inputs) {
    TrainingConfig cfg = config_from_json(checkpoint.config_json);
    Rng dummy(0, RngStream::ParamInit);
    Network gen = build_unet_generator(cfg.resolution, dummy, 3, 3, 64, cfg.generator_depth());
    copy_into_params(gen.params, checkpoint.tensors, "g.", "checkpoint");

    std::vector<Image> out;
    out.reserve(inputs.size());
    for (const Image& input : inputs) {
        if (input.width != cfg.resolution || input.height != cfg.resolution)
            throw ShapeError("input image is " + std::to_string(input.width) + "x" +
                             std::to_string(input.height) + " but the checkpoint was trained at " +
                             std::to_string(cfg.resolution) + "x" +
                             std::to_string(cfg.resolution));
        Tensor x = normalize(input);
        Tensor y = net_forward(gen.spec, gen.params, x, {.training = false});
        out.push_back(denormalize(y));
    }
    return out;
}

}  // namespace xmgc
