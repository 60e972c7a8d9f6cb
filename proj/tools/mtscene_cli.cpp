// Command-line front end: dataset synthesis, training, evaluation, the
// balancer ablation, reconstruction export, and gradient checking.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtscene/harness.hpp"
#include "mtscene/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mtscene;

namespace {

// exit codes: 0 ok, 2 config/usage, 3 io/runtime, 4 numeric check failure
int fail(const std::string& category, const std::string& message, int code) {
    json err = {{"error", {{"category", category}, {"message", message}}}};
    std::cerr << err.dump() << "\n";
    return code;
}

TrainConfig make_config(const std::string& config_path, const std::string& dataset, const std::string& out,
                        int64_t seed, int64_t epochs, int64_t batch, const std::string& mode) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
    if (!dataset.empty()) cfg.dataset_dir = dataset;
    if (!out.empty()) cfg.out_dir = out;
    if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
    if (epochs > 0) cfg.epochs = epochs;
    if (batch > 0) cfg.batch_size = batch;
    if (!mode.empty()) cfg.balancer.mode = balancer_mode_from_string(mode);
    cfg.validate();
    return cfg;
}

Sample sample_from_image(const std::string& path) {
    int64_t h = 0, w = 0;
    auto rgb = read_png_rgb8(path, h, w);
    Sample s;
    s.image = Tensor::zeros({3, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c)
                s.image.at(c, y, x) = static_cast<double>(rgb[static_cast<size_t>((y * w + x) * 3 + c)]) / 255.0;
    s.mask = Tensor::zeros({h, w});
    s.depth = Tensor::zeros({h, w});
    s.intrinsics = {0.8 * static_cast<double>(w), 0.8 * static_cast<double>(w), static_cast<double>(w) / 2.0,
                    static_cast<double>(h) / 2.0};
    s.has_annotations = false;
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task scene understanding toolkit"};
    app.require_subcommand(1);

    std::string config_path, dataset, out, split = "val", mode, checkpoint, image_path;
    int64_t seed = -1, epochs = 0, batch = 0, n_train = 200, n_val = 40, n_test = 0, index = 0, n_seeds = 5;
    double obj_thr = 0.25, nms_iou = 0.5;
    std::string modes_csv = "fixed,awu";

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "JSON config file (missing keys take defaults)");
        c->add_option("--dataset", dataset, "dataset directory");
        c->add_option("--out", out, "output directory");
        c->add_option("--seed", seed, "random seed");
    };

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(synth);
    synth->add_option("--train", n_train, "training samples");
    synth->add_option("--val", n_val, "validation samples");
    synth->add_option("--test", n_test, "test samples");

    auto* train_cmd = app.add_subcommand("train", "train with the configured balancer mode");
    add_common(train_cmd);
    train_cmd->add_option("--epochs", epochs, "override epochs");
    train_cmd->add_option("--batch", batch, "override batch size");
    train_cmd->add_option("--mode", mode, "balancer mode: awu | gradient-alignment | fixed");

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval_cmd->add_option("--split", split, "dataset split (train|val|test)");
    eval_cmd->add_option("--objectness", obj_thr, "objectness threshold");
    eval_cmd->add_option("--nms", nms_iou, "NMS IoU threshold");

    auto* ablate_cmd = app.add_subcommand("ablate", "matched-seed comparison of balancer modes");
    add_common(ablate_cmd);
    ablate_cmd->add_option("--seeds", n_seeds, "number of matched seeds");
    ablate_cmd->add_option("--modes", modes_csv, "comma-separated balancer modes");
    ablate_cmd->add_option("--epochs", epochs, "override epochs");
    ablate_cmd->add_option("--batch", batch, "override batch size");

    auto* recon_cmd = app.add_subcommand("reconstruct", "export depth PNG, point cloud, and overlay");
    add_common(recon_cmd);
    recon_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    recon_cmd->add_option("--split", split, "dataset split");
    recon_cmd->add_option("--index", index, "sample index within the split");
    recon_cmd->add_option("--image", image_path, "run on a raw RGB PNG instead of a dataset sample");
    recon_cmd->add_option("--objectness", obj_thr, "objectness threshold");
    recon_cmd->add_option("--nms", nms_iou, "NMS IoU threshold");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of losses and full model");
    grad_cmd->add_option("--seed", seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // --help prints and exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // usage errors share the configuration exit code
    }

    try {
        if (synth->parsed()) {
            TrainConfig cfg = make_config(config_path, dataset, out, seed, 0, 0, "");
            std::string dir = !dataset.empty() ? dataset : (!out.empty() ? out : "dataset");
            write_dataset(dir, cfg.scene, cfg.seed, n_train, n_val, n_test);
            std::cout << json{{"dataset_dir", dir}, {"train", n_train}, {"val", n_val}, {"test", n_test}}.dump()
                      << "\n";
        } else if (train_cmd->parsed()) {
            TrainConfig cfg = make_config(config_path, dataset, out, seed, epochs, batch, mode);
            TrainResult r = train(cfg);
            std::cout << json{{"checkpoint", r.checkpoint_path},
                              {"runlog", r.runlog_path},
                              {"steps", r.steps},
                              {"best_val", json::parse(r.best_val.to_json())}}
                             .dump(2)
                      << "\n";
        } else if (eval_cmd->parsed()) {
            if (dataset.empty()) return fail("config", "evaluate: --dataset is required", 2);
            EvalOptions opts{obj_thr, nms_iou, 0.5};
            EvalReport rep = evaluate_checkpoint(checkpoint, dataset, split, opts);
            std::cout << rep.to_json() << "\n";
            if (!out.empty()) {
                fs::create_directories(out);
                std::ofstream f(fs::path(out) / "eval.json");
                f << rep.to_json() << "\n";
            }
        } else if (ablate_cmd->parsed()) {
            TrainConfig cfg = make_config(config_path, dataset, out, seed, epochs, batch, "");
            std::vector<BalancerMode> modes;
            std::stringstream ss(modes_csv);
            std::string tok;
            while (std::getline(ss, tok, ',')) modes.push_back(balancer_mode_from_string(tok));
            auto rows = ablate(cfg, modes, n_seeds);
            std::cout << ablation_csv(rows);
        } else if (recon_cmd->parsed()) {
            Model model = load_checkpoint(checkpoint);
            Sample s;
            if (!image_path.empty()) {
                s = sample_from_image(image_path);
            } else {
                if (dataset.empty()) return fail("config", "reconstruct: need --image or --dataset", 2);
                Dataset data = load_split(dataset, split);
                if (index < 0 || index >= static_cast<int64_t>(data.samples.size()))
                    return fail("config", "reconstruct: sample index out of range", 2);
                s = data.samples[static_cast<size_t>(index)];
            }
            fs::create_directories(out.empty() ? "." : out);
            std::string stem = (fs::path(out.empty() ? "." : out) / "recon").string();
            EvalOptions opts{obj_thr, nms_iou, 0.5};
            auto r = reconstruct(model, s, stem, opts);
            std::cout << json{{"depth_png", r.depth_png},
                              {"ply", r.ply},
                              {"overlay_png", r.overlay_png},
                              {"detections", r.detections}}
                             .dump()
                      << "\n";
        } else if (grad_cmd->parsed()) {
            GradCheckReport rep = run_gradcheck(seed >= 0 ? static_cast<uint64_t>(seed) : 7);
            json j = {{"seg", rep.seg},
                      {"depth", rep.depth},
                      {"detection", rep.detection},
                      {"end_to_end", rep.end_to_end}};
            bool ok = rep.seg < 1e-4 && rep.depth < 1e-4 && rep.detection < 1e-4 && rep.end_to_end < 1e-3;
            j["pass"] = ok;
            std::cout << j.dump(2) << "\n";
            if (!ok) return fail("numeric", "gradient check exceeded tolerance", 4);
        }
    } catch (const std::invalid_argument& e) {
        return fail("config", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), 3);
    }
    return 0;
}
