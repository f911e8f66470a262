#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "util.hpp"
#include "xmgc/training.hpp"

using namespace xmgc;
using testutil::max_abs_diff;
using testutil::TempDir;

namespace {

std::vector<std::uint8_t> slurp_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return {raw.begin(), raw.end()};
}

std::string slurp_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Small all-train synthetic dataset bound to the training grid.
std::vector<LoadedPair> tiny_dataset(int resolution, int margin, std::uint64_t seed = 3) {
    auto pairs = make_synthetic_pairs(1, 4, resolution, seed);
    for (auto& p : pairs) p.split = "train";
    return bind_synthetic(pairs, resolution, margin);
}

TrainingConfig tiny_config(int iterations) {
    TrainingConfig cfg;
    cfg.direction = "visual_to_tactile";
    cfg.resolution = 16;
    cfg.iterations = iterations;
    cfg.l1_weight = 100.0;
    cfg.jitter_margin = 0;
    cfg.seed = 7;
    cfg.checkpoint_every = 1000000;  // no periodic files unless asked
    return cfg;
}

}  // namespace

TEST_CASE("config json round-trips every field") {
    TrainingConfig cfg;
    cfg.direction = "tactile_to_visual";
    cfg.resolution = 128;
    cfg.batch_size = 2;
    cfg.iterations = 1234;
    cfg.learning_rate = 3e-4;
    cfg.rmsprop_decay = 0.95;
    cfg.rmsprop_epsilon = 1e-7;
    cfg.l1_weight = 50.0;
    cfg.jitter_margin = 12;
    cfg.seed = 99;
    cfg.checkpoint_every = 500;

    TrainingConfig back = config_from_json(config_to_json(cfg));
    CHECK(back.direction == cfg.direction);
    CHECK(back.resolution == cfg.resolution);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.iterations == cfg.iterations);
    CHECK(back.learning_rate == cfg.learning_rate);
    CHECK(back.rmsprop_decay == cfg.rmsprop_decay);
    CHECK(back.rmsprop_epsilon == cfg.rmsprop_epsilon);
    CHECK(back.l1_weight == cfg.l1_weight);
    CHECK(back.jitter_margin == cfg.jitter_margin);
    CHECK(back.seed == cfg.seed);
    CHECK(back.checkpoint_every == cfg.checkpoint_every);
}

TEST_CASE("config parse rejects unknown keys by name") {
    try {
        config_from_json(R"({"resolution": 64, "learning_rte": 0.1})");
        CHECK(false);
    } catch (const ValueError& e) {
        CHECK(std::string(e.what()).find("learning_rte") != std::string::npos);
    }
    CHECK_THROWS_AS(config_from_json(R"({"resolution": "big"})"), ValueError);
    CHECK_THROWS_AS(config_from_json("not json at all"), ValueError);
}

TEST_CASE("config validation rejects nonsense") {
    TrainingConfig cfg;
    cfg.direction = "sideways";
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.resolution = 48;  // not a power of two
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.resolution = 2;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.iterations = 0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.rmsprop_decay = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.l1_weight = -5.0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = {};
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("generator depth caps the bottleneck at 2x2") {
    TrainingConfig cfg;
    cfg.resolution = 256;
    CHECK(cfg.generator_depth() == 7);
    cfg.resolution = 512;
    CHECK(cfg.generator_depth() == 7);
    cfg.resolution = 64;
    CHECK(cfg.generator_depth() == 5);
    cfg.resolution = 16;
    CHECK(cfg.generator_depth() == 3);
    cfg.resolution = 4;
    CHECK(cfg.generator_depth() == 1);
}

TEST_CASE("default jitter margin kicks in when unset") {
    TrainingConfig cfg;
    cfg.resolution = 256;
    cfg.jitter_margin = -1;
    CHECK(cfg.effective_jitter_margin() == 30);
    cfg.jitter_margin = 5;
    CHECK(cfg.effective_jitter_margin() == 5);
}

TEST_CASE("rmsprop matches the two-step closed form") {
    // One parameter, gradient pinned at 1:
    //   c1 = 0.1, step1 = lr / sqrt(0.1 + eps)
    //   c2 = 0.19, step2 = lr / sqrt(0.19 + eps)
    ParameterSet params;
    params.add("w", Tensor::zeros({1}, true));
    OptimizerState st = make_optimizer_state(params);
    const double lr = 1e-3, rho = 0.9, eps = 1e-8;

    auto push_unit_grad = [&] {
        auto g = params.at("w").data()->grad_buffer();
        g[0] = 1.0f;
    };

    push_unit_grad();
    rmsprop_step(params, st, lr, rho, eps);
    const double c1 = 0.1;
    const double w1 = -lr / std::sqrt(c1 + eps);
    CHECK(st.cache.at("w").values()[0] == doctest::Approx(c1).epsilon(1e-6));
    CHECK(params.at("w").values()[0] == doctest::Approx(w1).epsilon(1e-6));
    CHECK(std::abs(params.at("w").values()[0] - (-3.16228e-3)) < 1e-7);
    CHECK(st.steps == 1);

    push_unit_grad();
    rmsprop_step(params, st, lr, rho, eps);
    const double c2 = rho * c1 + (1 - rho);  // 0.19
    const double w2 = w1 - lr / std::sqrt(c2 + eps);
    CHECK(st.cache.at("w").values()[0] == doctest::Approx(c2).epsilon(1e-6));
    CHECK(params.at("w").values()[0] == doctest::Approx(w2).epsilon(1e-6));
    CHECK(st.steps == 2);

    // Grads are cleared by the step.
    CHECK_FALSE(params.at("w").has_grad());
}

TEST_CASE("rmsprop leaves non-learnable tensors alone and demands grads") {
    ParameterSet params;
    params.add("w", Tensor::full({2}, 1.0f, true));
    params.add("stat", Tensor::full({2}, 5.0f));  // running stat, no grad flag
    OptimizerState st = make_optimizer_state(params);

    // Unpopulated learnable grad is an error naming the tensor.
    try {
        rmsprop_step(params, st, 1e-3, 0.9, 1e-8);
        CHECK(false);
    } catch (const ValueError& e) {
        CHECK(std::string(e.what()).find("w") != std::string::npos);
    }

    auto g = params.at("w").data()->grad_buffer();
    g[0] = 1.0f;
    g[1] = -1.0f;
    rmsprop_step(params, st, 1e-3, 0.9, 1e-8);
    CHECK(params.at("stat").values()[0] == 5.0f);
    CHECK(params.at("w").values()[0] != 1.0f);
}

TEST_CASE("gan losses have their closed-form values at p=0.5") {
    Tensor half = Tensor::from({1}, {0.5f});
    CHECK(discriminator_loss(half, half).item64() ==
          doctest::Approx(1.3862943611198906).epsilon(1e-12));
    Tensor gen = Tensor::from({2}, {0.3f, 0.5f});
    Tensor tgt = Tensor::from({2}, {0.5f, 0.5f});
    // bce(0.5,1) + 100 * l1 = ln2 + 100*0.1
    CHECK(generator_loss(half, gen, tgt, 100.0).item64() ==
          doctest::Approx(0.6931471805599453 + 10.0).epsilon(1e-7));
    // l1_weight 0 drops the reconstruction term entirely
    CHECK(generator_loss(half, gen, tgt, 0.0).item64() ==
          doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("checkpoint round-trips bitwise") {
    TempDir dir("ckpt");
    Rng rng(3, RngStream::ParamInit);
    Network g = build_unet_generator(16, rng, 3, 3, 4, 3);

    Checkpoint ck;
    ck.iteration = 77;
    ck.config_json = config_to_json(TrainingConfig{});
    for (const auto& [name, t] : g.params) ck.tensors.add("g." + name, t);
    OptimizerState st = make_optimizer_state(g.params);
    for (const auto& [name, t] : st.cache) ck.optimizer.add("g." + name, t);
    Rng data_rng(9, RngStream::Data);
    data_rng.next_u32();
    auto ser = data_rng.serialize();
    ck.rng_state.assign(ser.begin(), ser.end());

    const std::string p1 = dir.file("a.bin"), p2 = dir.file("b.bin");
    save_checkpoint(p1, ck);
    Checkpoint back = load_checkpoint(p1);
    CHECK(back.version == 1);
    CHECK(back.iteration == 77);
    CHECK(back.config_json == ck.config_json);
    CHECK(back.rng_state == ck.rng_state);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    auto it = ck.tensors.begin();
    for (const auto& [name, t] : back.tensors) {
        CHECK(name == it->first);
        CHECK(t.shape() == it->second.shape());
        CHECK(max_abs_diff(t.values(), it->second.values()) == 0.0);
        ++it;
    }

    save_checkpoint(p2, back);
    CHECK(slurp_bytes(p1) == slurp_bytes(p2));
}

TEST_CASE("checkpoint loader rejects damage with specific statuses") {
    TempDir dir("ckpt_bad");
    Checkpoint ck;
    ck.config_json = "{}";
    ck.tensors.add("g.w", Tensor::full({3}, 1.5f, true));
    ck.rng_state.assign(16, 0);
    const std::string path = dir.file("ok.bin");
    save_checkpoint(path, ck);

    auto bytes = slurp_bytes(path);

    {  // wrong magic
        auto bad = bytes;
        bad[0] = 'Y';
        const std::string p = dir.file("magic.bin");
        std::ofstream(p, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()),
                   static_cast<std::streamsize>(bad.size()));
        try {
            load_checkpoint(p);
            CHECK(false);
        } catch (const CheckpointError& e) {
            CHECK(e.status() == CheckpointStatus::BadMagic);
        }
    }
    {  // future version
        auto bad = bytes;
        bad[4] = 0xff;
        const std::string p = dir.file("version.bin");
        std::ofstream(p, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()),
                   static_cast<std::streamsize>(bad.size()));
        try {
            load_checkpoint(p);
            CHECK(false);
        } catch (const CheckpointError& e) {
            CHECK(e.status() == CheckpointStatus::VersionMismatch);
        }
    }
    {  // truncated
        auto bad = bytes;
        bad.resize(bad.size() - 7);
        const std::string p = dir.file("cut.bin");
        std::ofstream(p, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()),
                   static_cast<std::streamsize>(bad.size()));
        try {
            load_checkpoint(p);
            CHECK(false);
        } catch (const CheckpointError& e) {
            CHECK(e.status() == CheckpointStatus::Truncated);
        }
    }
    CHECK_THROWS_AS(load_checkpoint(dir.file("absent.bin")), IoError);
}

TEST_CASE("training is deterministic given the seed") {
    auto data = tiny_dataset(16, 0);
    TrainingConfig cfg = tiny_config(4);

    TrainResult a = train(cfg, data);
    TrainResult b = train(cfg, data);
    REQUIRE(a.log.size() == 4);
    REQUIRE(b.log.size() == 4);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss_d == b.log[i].loss_d);
        CHECK(a.log[i].loss_g == b.log[i].loss_g);
        CHECK(a.log[i].loss_l1 == b.log[i].loss_l1);
    }
    auto ita = a.checkpoint.tensors.begin();
    for (const auto& [name, t] : b.checkpoint.tensors) {
        CHECK(max_abs_diff(t.values(), ita->second.values()) == 0.0);
        ++ita;
    }

    // A different seed moves the losses.
    TrainingConfig other = cfg;
    other.seed = 8;
    TrainResult c = train(other, data);
    bool differs = false;
    for (std::size_t i = 0; i < a.log.size(); ++i) differs |= a.log[i].loss_g != c.log[i].loss_g;
    CHECK(differs);
}

TEST_CASE("loss log files are byte-identical across reruns") {
    TempDir dir("logs");
    auto data = tiny_dataset(16, 0);
    TrainingConfig cfg = tiny_config(3);

    TrainOptions opt;
    opt.loss_log_path = dir.file("l1.csv");
    train(cfg, data, opt);
    opt.loss_log_path = dir.file("l2.csv");
    train(cfg, data, opt);
    const std::string t1 = slurp_text(dir.file("l1.csv"));
    CHECK(t1 == slurp_text(dir.file("l2.csv")));
    CHECK(t1.find("iteration,loss_d,loss_g,loss_l1") == 0);
}

TEST_CASE("resume reproduces the uninterrupted run exactly") {
    TempDir dir("resume");
    auto data = tiny_dataset(16, 0);

    TrainingConfig cfg12 = tiny_config(12);
    TrainResult straight = train(cfg12, data);

    TrainingConfig cfg6 = tiny_config(6);
    TrainResult first = train(cfg6, data);
    TrainResult second = train(cfg12, data, [&] {
        TrainOptions o;
        o.resume = &first.checkpoint;
        return o;
    }());

    REQUIRE(second.log.size() == 6);  // iterations 7..12
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(second.log[i].iteration == straight.log[6 + i].iteration);
        CHECK(second.log[i].loss_d == straight.log[6 + i].loss_d);
        CHECK(second.log[i].loss_g == straight.log[6 + i].loss_g);
        CHECK(second.log[i].loss_l1 == straight.log[6 + i].loss_l1);
    }
    auto its = straight.checkpoint.tensors.begin();
    for (const auto& [name, t] : second.checkpoint.tensors) {
        CHECK(name == its->first);
        CHECK(max_abs_diff(t.values(), its->second.values()) == 0.0);
        ++its;
    }
    auto ito = straight.checkpoint.optimizer.begin();
    for (const auto& [name, t] : second.checkpoint.optimizer) {
        CHECK(max_abs_diff(t.values(), ito->second.values()) == 0.0);
        ++ito;
    }
    CHECK(second.checkpoint.rng_state == straight.checkpoint.rng_state);

    // Resuming past the end is a config error.
    TrainOptions done;
    done.resume = &straight.checkpoint;
    CHECK_THROWS_AS(train(cfg12, data, done), ValueError);
}

TEST_CASE("freeze_generator pins G while D keeps learning") {
    auto data = tiny_dataset(16, 0);
    TrainingConfig cfg = tiny_config(5);

    TrainOptions opt;
    opt.freeze_generator = true;
    TrainResult r = train(cfg, data, opt);

    // The generator tensors must equal a freshly initialized generator.
    TrainingConfig one = tiny_config(1);
    TrainOptions opt1;
    opt1.freeze_generator = true;
    TrainResult fresh = train(one, data, opt1);
    for (const auto& [name, t] : r.checkpoint.tensors) {
        if (name.rfind("g.", 0) != 0) continue;
        if (name.find(".bn_mean") != std::string::npos ||
            name.find(".bn_var") != std::string::npos)
            continue;  // running stats still move in train mode
        const Tensor* other = fresh.checkpoint.tensors.find(name);
        REQUIRE(other != nullptr);
        CHECK(max_abs_diff(t.values(), other->values()) == 0.0);
    }

    // And the discriminator must actually be training against it.
    bool d_changed = false;
    for (const auto& [name, t] : r.checkpoint.tensors) {
        if (name.rfind("d.", 0) != 0 || name.find("bn_") != std::string::npos) continue;
        const Tensor* other = fresh.checkpoint.tensors.find(name);
        REQUIRE(other != nullptr);
        d_changed |= max_abs_diff(t.values(), other->values()) > 0.0;
    }
    CHECK(d_changed);
}

TEST_CASE("exploding losses abort with the iteration in the message") {
    auto data = tiny_dataset(16, 0);
    TrainingConfig cfg = tiny_config(50);
    cfg.learning_rate = 1e15;  // guarantees inf/nan within a few steps
    try {
        train(cfg, data);
        CHECK(false);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("iteration") != std::string::npos);
    }
}

TEST_CASE("generate rebuilds the generator and enforces resolution") {
    auto data = tiny_dataset(16, 0);
    TrainingConfig cfg = tiny_config(2);
    TrainResult r = train(cfg, data);

    Image in = make_image(16, 16);
    for (auto& p : in.pixels) p = 90;
    auto out = generate(r.checkpoint, {in});
    REQUIRE(out.size() == 1);
    CHECK(out[0].width == 16);
    CHECK(out[0].height == 16);

    Image wrong = make_image(32, 32);
    CHECK_THROWS_AS(generate(r.checkpoint, {wrong}), ShapeError);

    // Deterministic: same checkpoint, same input, same bytes.
    auto out2 = generate(r.checkpoint, {in});
    CHECK(out[0].pixels == out2[0].pixels);
}

TEST_CASE("train writes periodic and final checkpoints that reload") {
    TempDir dir("ckpt_files");
    auto data = tiny_dataset(16, 0);
    TrainingConfig cfg = tiny_config(4);
    cfg.checkpoint_every = 2;

    TrainOptions opt;
    opt.checkpoint_dir = dir.str();
    TrainResult r = train(cfg, data, opt);

    CHECK(std::filesystem::exists(dir.path() / "checkpoint_000002.bin"));
    CHECK(std::filesystem::exists(dir.path() / "checkpoint_000004.bin"));
    REQUIRE(std::filesystem::exists(dir.path() / "checkpoint_final.bin"));

    Checkpoint final = load_checkpoint(dir.file("checkpoint_final.bin"));
    CHECK(final.iteration == 4);
    auto it = r.checkpoint.tensors.begin();
    for (const auto& [name, t] : final.tensors) {
        CHECK(name == it->first);
        CHECK(max_abs_diff(t.values(), it->second.values()) == 0.0);
        ++it;
    }
}
