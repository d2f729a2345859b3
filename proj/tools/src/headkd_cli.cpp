#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "headkd/checkpoint.hpp"
#include "headkd/coco.hpp"
#include "headkd/data.hpp"
#include "headkd/eval.hpp"
#include "headkd/png_io.hpp"
#include "headkd/report.hpp"
#include "headkd/train.hpp"

namespace {

using headkd::Tensor;
using headkd::train::ConfigError;
using json = nlohmann::json;

void require_cpu(const std::string& device) {
    if (device != "cpu") {
        throw ConfigError("device \"" + device + "\" is not available; this build is CPU only");
    }
}

json metrics_json(const headkd::eval::MapMetrics& m) {
    return json{{"map", m.map},     {"map50", m.map50}, {"map75", m.map75},
                {"map_s", m.map_s}, {"map_m", m.map_m}, {"map_l", m.map_l}};
}

headkd::train::DistillPlan load_plan_checked(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError("config file not found: " + path);
    }
    return headkd::train::load_plan(path);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
    if (!out.good()) throw std::runtime_error("write failed: " + path);
}

// Pairs each ground-truth image with the detections recorded for its id.
// Images absent from the detections file count as having none; detections
// for unknown ids are a config error rather than being dropped silently.
struct AlignedEval {
    std::vector<headkd::Detections> dets;
    std::vector<headkd::toydet::Targets> gts;
};

AlignedEval align_by_id(const headkd::data::NamedDetections& named,
                        const std::vector<headkd::data::Sample>& gt_samples) {
    std::map<std::string, const headkd::Detections*> by_id;
    for (const auto& [id, d] : named) {
        if (!by_id.emplace(id, &d).second) {
            throw ConfigError("detections file lists image \"" + id + "\" twice");
        }
    }
    std::map<std::string, bool> seen;
    AlignedEval out;
    for (const auto& s : gt_samples) {
        seen[s.id] = true;
        auto it = by_id.find(s.id);
        out.dets.push_back(it == by_id.end() ? headkd::Detections{} : *it->second);
        out.gts.push_back(s.targets);
    }
    for (const auto& [id, d] : named) {
        (void)d;
        if (!seen.count(id)) {
            throw ConfigError("detections refer to image \"" + id +
                              "\" which the ground-truth file does not contain");
        }
    }
    return out;
}

struct TrainArgs {
    std::string config;
    std::string out_dir;
    int64_t seed = -1;
    bool resume = false;
    std::string device = "cpu";
};

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
    cmd->add_option("--config", a.config, "Run plan (JSON)")->required();
    cmd->add_option("--out", a.out_dir, "Experiment directory")->required();
    cmd->add_option("--seed", a.seed, "Override the plan seed");
    cmd->add_flag("--resume", a.resume, "Continue from the newest checkpoint in --out");
    cmd->add_option("--device", a.device, "Compute device")->capture_default_str();
}

int run_training(const TrainArgs& a, bool teacher_only) {
    require_cpu(a.device);
    auto plan = load_plan_checked(a.config);
    if (a.seed >= 0) plan.seed = static_cast<uint64_t>(a.seed);
    if (teacher_only && plan.mode != "baseline") {
        throw ConfigError("train-teacher trains a plain detector; got mode \"" + plan.mode +
                          "\" (use the distill command for that)");
    }
    auto result = headkd::train::train(plan, a.out_dir, a.resume);
    json doc{{"checkpoint", result.final_checkpoint}, {"metrics", metrics_json(result.metrics)}};
    std::cout << doc.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy-detector distillation: baseline, HEAD, and TF-HEAD training plus reports"};
    app.require_subcommand(1);

    TrainArgs teacher_args;
    auto* teach = app.add_subcommand(
        "train-teacher", "Train a baseline detector whose checkpoint can serve as a teacher");
    add_train_flags(teach, teacher_args);

    TrainArgs distill_args;
    auto* dist = app.add_subcommand(
        "distill", "Run a training plan (mode baseline, head, or tf_head)");
    add_train_flags(dist, distill_args);

    std::string am_ckpt, am_image, am_out, am_device = "cpu";
    int am_level = 3;
    auto* amap = app.add_subcommand("activation-map",
                                    "Render a backbone activation heatmap for one image");
    amap->add_option("--checkpoint", am_ckpt, "Detector checkpoint directory")->required();
    amap->add_option("--image", am_image, "Input PNG")->required();
    amap->add_option("--level", am_level, "Pyramid level")->capture_default_str();
    amap->add_option("--out", am_out, "Output PNG")->required();
    amap->add_option("--device", am_device, "Compute device")->capture_default_str();

    std::string lc_dir, lc_out;
    auto* curves = app.add_subcommand("loss-curves",
                                      "Export an experiment's loss log as CSV");
    curves->add_option("--experiment", lc_dir, "Experiment directory (reads log.jsonl)")
        ->required();
    curves->add_option("--out", lc_out, "Output CSV")->required();

    std::string ea_dets, ea_gt, ea_out;
    auto* errors = app.add_subcommand(
        "error-analysis", "Classify detections into Correct/Loc/Background/FalseNegative");
    errors->add_option("--detections", ea_dets, "Detections JSON")->required();
    errors->add_option("--gt", ea_gt, "Ground-truth annotations (COCO JSON)")->required();
    errors->add_option("--out", ea_out, "Report path (default: stdout)");

    std::string ev_dets, ev_gt, ev_ckpt, ev_config, ev_out, ev_device = "cpu";
    double ev_image_size = 128;
    auto* evaluate = app.add_subcommand("evaluate", "Compute mAP metrics");
    evaluate->add_option("--detections", ev_dets, "Detections JSON (with --gt)");
    evaluate->add_option("--gt", ev_gt, "Ground-truth annotations (COCO JSON)");
    evaluate->add_option("--image-size", ev_image_size, "Nominal image size for area buckets")
        ->capture_default_str();
    evaluate->add_option("--checkpoint", ev_ckpt, "Detector checkpoint (with --config)");
    evaluate->add_option("--config", ev_config, "Plan supplying the dataset and inference settings");
    evaluate->add_option("--out", ev_out, "Also write the detections JSON here");
    evaluate->add_option("--device", ev_device, "Compute device")->capture_default_str();

    teach->callback([&] { run_training(teacher_args, true); });
    dist->callback([&] { run_training(distill_args, false); });

    amap->callback([&] {
        require_cpu(am_device);
        if (!std::filesystem::exists(am_ckpt)) {
            throw ConfigError("checkpoint not found: " + am_ckpt);
        }
        auto det = headkd::toydet::load_detector(am_ckpt);
        Tensor image = headkd::read_png_rgb(am_image);
        Tensor map = headkd::report::detector_activation_map(det, image, am_level);
        Tensor color =
            headkd::report::colormap_image(map, image.shape()[1], image.shape()[2]);
        headkd::write_png_rgb(am_out, color);
        std::cout << "wrote " << am_out << "\n";
    });

    curves->callback([&] {
        std::string log_path = lc_dir + "/log.jsonl";
        if (!std::filesystem::exists(log_path)) {
            throw ConfigError("no log.jsonl under " + lc_dir);
        }
        headkd::report::loss_curves_csv(log_path, lc_out);
        std::cout << "wrote " << lc_out << "\n";
    });

    errors->callback([&] {
        auto named = headkd::data::load_detections_json(ea_dets);
        auto gt_samples = headkd::data::load_coco(ea_gt, "");
        auto aligned = align_by_id(named, gt_samples);
        auto report = headkd::report::error_analysis(aligned.dets, aligned.gts);
        std::string text = headkd::report::error_report_json(report);
        if (ea_out.empty()) {
            std::cout << text << "\n";
        } else {
            write_text(ea_out, text);
            std::cout << "wrote " << ea_out << "\n";
        }
    });

    evaluate->callback([&] {
        require_cpu(ev_device);
        bool from_files = !ev_dets.empty() || !ev_gt.empty();
        bool from_model = !ev_ckpt.empty() || !ev_config.empty();
        if (from_files == from_model) {
            throw ConfigError(
                "evaluate needs either --detections with --gt, or --checkpoint with --config");
        }
        headkd::eval::MapMetrics metrics;
        if (from_files) {
            if (ev_dets.empty() || ev_gt.empty()) {
                throw ConfigError("evaluate from files needs both --detections and --gt");
            }
            auto named = headkd::data::load_detections_json(ev_dets);
            auto gt_samples = headkd::data::load_coco(ev_gt, "");
            auto aligned = align_by_id(named, gt_samples);
            metrics = headkd::eval::evaluate_map(aligned.dets, aligned.gts,
                                                 static_cast<headkd::real>(ev_image_size));
        } else {
            if (ev_ckpt.empty() || ev_config.empty()) {
                throw ConfigError("evaluate from a model needs both --checkpoint and --config");
            }
            auto plan = load_plan_checked(ev_config);
            auto det = headkd::toydet::load_detector(ev_ckpt);
            auto dataset = headkd::train::load_dataset(plan.data);
            headkd::data::NamedDetections named;
            metrics = headkd::train::evaluate_detector(det, dataset.val, plan.infer, &named);
            if (!ev_out.empty()) headkd::data::save_detections_json(ev_out, named);
        }
        std::cout << metrics_json(metrics).dump() << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
