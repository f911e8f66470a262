// Command-line front end: dataset preparation, training in either
// direction, generation, and the two evaluation protocols.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmgc/data_pipeline.hpp"
#include "xmgc/error.hpp"
#include "xmgc/evaluation.hpp"
#include "xmgc/image.hpp"
#include "xmgc/training.hpp"

namespace fs = std::filesystem;
using namespace xmgc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitArtifact = 4;

struct RunConfig {
    TrainingConfig training;
    std::string dataset_root;
    std::string manifest;
    std::string out_dir;
    std::string tag;
};

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config: " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(buffer.str());
    } catch (const nlohmann::json::exception& e) {
        throw ValueError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ValueError("config must be a JSON object");
    RunConfig cfg;
    nlohmann::json training = nlohmann::json::object();
    for (const auto& [key, value] : doc.items()) {
        try {
            if (key == "dataset_root") {
                cfg.dataset_root = value.get<std::string>();
            } else if (key == "manifest") {
                cfg.manifest = value.get<std::string>();
            } else if (key == "out_dir") {
                cfg.out_dir = value.get<std::string>();
            } else if (key == "tag") {
                cfg.tag = value.get<std::string>();
            } else {
                training[key] = value;  // validated (and unknown keys rejected) below
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValueError("bad value for config key '" + key + "': " + e.what());
        }
    }
    cfg.training = config_from_json(training.dump());
    return cfg;
}

std::string direction_from_flag(const std::string& flag) {
    if (flag == "v2t" || flag == "visual_to_tactile") return "visual_to_tactile";
    if (flag == "t2v" || flag == "tactile_to_visual") return "tactile_to_visual";
    throw ValueError("direction must be v2t or t2v, got '" + flag + "'");
}

std::vector<std::string> sorted_image_paths(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    return paths;
}

// --- dataset prepare ------------------------------------------------------

struct SyntheticArgs {
    int classes = 0, pairs = 0, res = 0;
    std::uint64_t seed = 0;
};

SyntheticArgs parse_synthetic(const std::vector<std::string>& tokens) {
    SyntheticArgs args;
    bool seen[4] = {false, false, false, false};
    for (const std::string& token : tokens) {
        const auto eq = token.find('=');
        if (eq == std::string::npos)
            throw ValueError("--synthetic expects key=value tokens, got '" + token + "'");
        const std::string key = token.substr(0, eq);
        const std::string value = token.substr(eq + 1);
        try {
            if (key == "classes") {
                args.classes = std::stoi(value);
                seen[0] = true;
            } else if (key == "pairs") {
                args.pairs = std::stoi(value);
                seen[1] = true;
            } else if (key == "res") {
                args.res = std::stoi(value);
                seen[2] = true;
            } else if (key == "seed") {
                args.seed = std::stoull(value);
                seen[3] = true;
            } else {
                throw ValueError("unknown --synthetic key '" + key + "'");
            }
        } catch (const ValueError&) {
            throw;
        } catch (const std::exception&) {
            throw ValueError("bad --synthetic value '" + token + "'");
        }
    }
    const char* names[4] = {"classes", "pairs", "res", "seed"};
    for (int i = 0; i < 4; ++i)
        if (!seen[i])
            throw ValueError(std::string("--synthetic requires ") + names[i] + "=<value>");
    return args;
}

std::map<std::string, RoiRect> read_roi_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open ROI manifest: " + path);
    std::map<std::string, RoiRect> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
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
        if (fields.size() != 5)
            throw ValueError("ROI manifest rows are tactile_file,x,y,w,h; got: " + line);
        if (fields[0] == "tactile_file") continue;  // header
        try {
            RoiRect rect{std::stoi(fields[1]), std::stoi(fields[2]), std::stoi(fields[3]),
                         std::stoi(fields[4])};
            out[fs::path(fields[0]).filename().string()] = rect;
        } catch (const std::exception&) {
            throw ValueError("bad ROI manifest row: " + line);
        }
    }
    return out;
}

int cmd_dataset_prepare(const std::string& root, const std::string& roi_manifest,
                        const std::vector<std::string>& synthetic_tokens) {
    DatasetManifest manifest;
    if (!synthetic_tokens.empty()) {
        const SyntheticArgs args = parse_synthetic(synthetic_tokens);
        const auto pairs = make_synthetic_pairs(args.classes, args.pairs, args.res, args.seed);
        fs::create_directories(fs::path(root) / "visual");
        fs::create_directories(fs::path(root) / "tactile");
        for (const SyntheticPair& pair : pairs) {
            const std::string name = pair.source_id + ".png";
            PairRecord rec;
            rec.visual_path = (fs::path(root) / "visual" / name).string();
            rec.tactile_path = (fs::path(root) / "tactile" / name).string();
            rec.class_id = pair.class_id;
            rec.split = pair.split;
            rec.source_id = pair.source_id;
            write_png(rec.visual_path, pair.visual);
            write_png(rec.tactile_path, pair.tactile);
            manifest.rows.push_back(std::move(rec));
        }
    } else {
        manifest = discover_pairs(root);
        if (!roi_manifest.empty()) {
            const auto rois = read_roi_manifest(roi_manifest);
            std::map<std::string, bool> used;
            for (PairRecord& rec : manifest.rows) {
                const std::string base = fs::path(rec.tactile_path).filename().string();
                auto it = rois.find(base);
                if (it != rois.end()) {
                    rec.roi = it->second;
                    used[base] = true;
                }
            }
            for (const auto& [base, rect] : rois)
                if (!used.count(base))
                    manifest.warnings.push_back("ROI entry '" + base +
                                                "' matches no tactile image");
        }
    }
    const std::string manifest_path = (fs::path(root) / "manifest.csv").string();
    write_manifest(manifest_path, manifest);
    for (const std::string& warning : manifest.warnings)
        std::cerr << "warning: " << warning << "\n";
    std::cout << "manifest=" << manifest_path << " rows=" << manifest.rows.size() << std::endl;
    return kExitOk;
}

// --- train ------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& direction_flag) {
    RunConfig cfg = run_config_from_file(config_path);
    if (!direction_flag.empty()) cfg.training.direction = direction_from_flag(direction_flag);
    cfg.training.validate();

    std::string manifest_path = cfg.manifest;
    if (manifest_path.empty()) {
        if (cfg.dataset_root.empty())
            throw ValueError("config needs 'manifest' or 'dataset_root'");
        manifest_path = (fs::path(cfg.dataset_root) / "manifest.csv").string();
    }
    if (!fs::exists(manifest_path)) throw IoError("manifest not found: " + manifest_path);
    if (cfg.out_dir.empty()) throw ValueError("config needs 'out_dir'");
    fs::path artifacts = cfg.out_dir;
    if (!cfg.tag.empty()) artifacts /= cfg.tag;
    fs::create_directories(artifacts);

    const DatasetManifest manifest = read_manifest(manifest_path);
    const auto data = bind_dataset(manifest, cfg.training.resolution,
                                   cfg.training.effective_jitter_margin());

    TrainOptions options;
    options.checkpoint_dir = artifacts.string();
    options.loss_log_path = (artifacts / "loss_log.csv").string();
    const int every = std::max(1, cfg.training.iterations / 40);
    options.progress = [&](const LossRow& row) {
        if (row.iteration == 1 || row.iteration == cfg.training.iterations ||
            row.iteration % every == 0) {
            std::printf("iter=%lld/%d loss_d=%.4f loss_g=%.4f loss_l1=%.4f\n",
                        static_cast<long long>(row.iteration), cfg.training.iterations,
                        row.loss_d, row.loss_g, row.loss_l1);
            std::fflush(stdout);
        }
    };
    train(cfg.training, data, options);
    std::cout << "final_checkpoint=" << (artifacts / "checkpoint_final.bin").string()
              << std::endl;
    std::cout << "loss_log=" << options.loss_log_path << std::endl;
    return kExitOk;
}

// --- generate ---------------------------------------------------------------

int cmd_generate(const std::string& checkpoint_path, const std::string& inputs_dir,
                 const std::string& out_dir) {
    const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
    const TrainingConfig cfg = config_from_json(checkpoint.config_json);
    const auto paths = sorted_image_paths(inputs_dir);
    if (paths.empty()) throw IoError("no input images in " + inputs_dir);
    std::vector<Image> inputs;
    inputs.reserve(paths.size());
    for (const std::string& path : paths)
        inputs.push_back(resize_bicubic(read_image(path), cfg.resolution, cfg.resolution));
    const std::vector<Image> outputs = generate(checkpoint, inputs);
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const std::string name = fs::path(paths[i]).stem().string() + ".png";
        write_png((fs::path(out_dir) / name).string(), outputs[i]);
    }
    std::cout << "generated=" << outputs.size() << " out=" << out_dir << std::endl;
    return kExitOk;
}

// --- eval ssim ----------------------------------------------------------------

int cmd_eval_ssim(const std::string& generated_dir, const std::string& real_dir, bool windowed) {
    const GroupReport report = evaluate_experiment_group(
        generated_dir, real_dir, windowed ? SsimMode::kWindowed : SsimMode::kGlobal);
    std::cout << "filename,ssim_r,ssim_g,ssim_b,ssim_mean\n";
    for (const SsimRow& row : report.rows)
        std::printf("%s,%.10g,%.10g,%.10g,%.10g\n", row.filename.c_str(), row.score.r,
                    row.score.g, row.score.b, row.score.mean());
    for (const std::string& warning : report.warnings) std::cerr << "warning: " << warning << "\n";
    if (report.rows.empty()) throw ValueError("no image pairs to score");
    std::printf("mean_colour_ssim=%.10g\n", report.average.mean());
    std::fflush(stdout);
    return kExitOk;
}

// --- eval classify -------------------------------------------------------------

std::vector<LabeledImage> labeled_from_dir(const std::string& dir) {
    std::vector<LabeledImage> out;
    if (!fs::is_directory(dir)) return out;
    for (const std::string& path : sorted_image_paths(dir)) {
        LabeledImage li;
        li.image = read_image(path);
        li.class_id = class_id_from_filename(path);
        li.source_id = fs::path(path).stem().string();
        li.generated = true;
        out.push_back(std::move(li));
    }
    return out;
}

int cmd_eval_classify(const std::string& manifest_path, const std::string& generated_dir,
                      int epochs) {
    const DatasetManifest manifest = read_manifest(manifest_path);
    if (manifest.rows.empty()) throw ValueError("manifest has no rows: " + manifest_path);

    int num_classes = 0;
    for (const PairRecord& rec : manifest.rows)
        num_classes = std::max(num_classes, rec.class_id + 1);

    struct ModalitySets {
        std::vector<LabeledImage> train, test;
    };
    ModalitySets visual, tactile;
    for (const PairRecord& rec : manifest.rows) {
        LabeledImage v;
        v.image = read_image(rec.visual_path);
        v.class_id = rec.class_id;
        v.source_id = rec.source_id + ":v";
        LabeledImage t;
        t.image = read_image(rec.tactile_path);
        if (rec.roi) t.image = extract_roi(t.image, *rec.roi);
        t.class_id = rec.class_id;
        t.source_id = rec.source_id + ":t";
        if (rec.split == "train") {
            visual.train.push_back(std::move(v));
            tactile.train.push_back(std::move(t));
        } else {
            visual.test.push_back(std::move(v));
            tactile.test.push_back(std::move(t));
        }
    }

    const std::uint64_t seed = 1;  // protocol is seed-fixed; both conditions share it
    std::vector<AccuracyRow> rows;
    const struct {
        const char* name;
        ModalitySets* sets;
    } modalities[] = {{"visual", &visual}, {"tactile", &tactile}};
    for (const auto& m : modalities) {
        std::vector<LabeledImage> generated;
        if (!generated_dir.empty())
            generated = labeled_from_dir((fs::path(generated_dir) / m.name).string());
        auto part = classification_protocol(m.sets->train, generated, m.sets->test, num_classes,
                                            epochs, seed, m.name);
        rows.insert(rows.end(), part.begin(), part.end());
    }

    std::cout << "iteration,real_acc,realgen_acc,modality\n";
    for (const AccuracyRow& row : rows) {
        if (row.has_realgen)
            std::printf("%d,%.10g,%.10g,%s\n", row.iteration, row.real_acc, row.realgen_acc,
                        row.modality.c_str());
        else
            std::printf("%d,%.10g,,%s\n", row.iteration, row.real_acc, row.modality.c_str());
    }
    std::fflush(stdout);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-modal visual/tactile texture translation"};
    app.require_subcommand(1);

    // dataset prepare
    auto* dataset = app.add_subcommand("dataset", "Dataset utilities");
    dataset->require_subcommand(1);
    auto* prepare = dataset->add_subcommand("prepare", "Scan or synthesize a paired dataset");
    std::string root, roi_manifest;
    std::vector<std::string> synthetic_tokens;
    prepare->add_option("--root", root, "Dataset root (visual/ + tactile/)")->required();
    prepare->add_option("--roi-manifest", roi_manifest,
                        "CSV tactile_file,x,y,w,h with regions of interest");
    prepare->add_option("--synthetic", synthetic_tokens,
                        "classes=K pairs=P res=R seed=S: generate procedural pairs")
        ->expected(4);

    // train
    auto* train_cmd = app.add_subcommand("train", "Train the translation GAN");
    std::string config_path, direction_flag;
    train_cmd->add_option("--config", config_path, "RunConfig JSON file")->required();
    train_cmd->add_option("--direction", direction_flag, "v2t or t2v (overrides config)");

    // generate
    auto* generate_cmd = app.add_subcommand("generate", "Translate a directory of images");
    std::string checkpoint_path, inputs_dir, out_dir;
    generate_cmd->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
    generate_cmd->add_option("--inputs", inputs_dir, "Directory of source-modality images")
        ->required();
    generate_cmd->add_option("--out", out_dir, "Output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluation protocols");
    eval->require_subcommand(1);
    auto* ssim_cmd = eval->add_subcommand("ssim", "Colour-SSIM against ground truth");
    std::string generated_dir, real_dir;
    bool windowed = false;
    ssim_cmd->add_option("--generated", generated_dir, "Generated images")->required();
    ssim_cmd->add_option("--real", real_dir, "Ground-truth images")->required();
    ssim_cmd->add_flag("--windowed", windowed, "11x11 Gaussian-window statistics");
    auto* classify_cmd = eval->add_subcommand("classify", "Real vs real+generated accuracy table");
    std::string cls_manifest, cls_generated;
    int epochs = 0;
    classify_cmd->add_option("--manifest", cls_manifest, "Dataset manifest CSV")->required();
    classify_cmd->add_option("--generated", cls_generated,
                             "Directory with generated visual/ and tactile/ images");
    classify_cmd->add_option("--epochs", epochs, "Training epochs (0: untrained baseline)")
        ->required();

    try {
        app.parse(argc, argv);
        if (prepare->parsed()) return cmd_dataset_prepare(root, roi_manifest, synthetic_tokens);
        if (train_cmd->parsed()) return cmd_train(config_path, direction_flag);
        if (generate_cmd->parsed()) return cmd_generate(checkpoint_path, inputs_dir, out_dir);
        if (ssim_cmd->parsed()) return cmd_eval_ssim(generated_dir, real_dir, windowed);
        if (classify_cmd->parsed()) return cmd_eval_classify(cls_manifest, cls_generated, epochs);
        std::cerr << "no subcommand\n";
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
