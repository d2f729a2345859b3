#include "headkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "headkd/bridge.hpp"
#include "headkd/checkpoint.hpp"

namespace headkd::train {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---- schedule / early stop ----

std::vector<int> Schedule::default_drops(int total_epochs) {
    std::vector<int> drops;
    for (int d : {total_epochs * 2 / 3, total_epochs * 11 / 12}) {
        if (d > 0 && d < total_epochs && (drops.empty() || d > drops.back())) drops.push_back(d);
    }
    return drops;
}

void Schedule::validate() const {
    if (total_epochs < 1) throw ConfigError("schedule: total_epochs must be >= 1");
    if (base_lr <= 0) throw ConfigError("schedule: base_lr must be positive");
    if (drop_factor <= 0 || drop_factor > 1) throw ConfigError("schedule: bad drop_factor");
    if (momentum < 0 || momentum >= 1) throw ConfigError("schedule: bad momentum");
    if (weight_decay < 0) throw ConfigError("schedule: negative weight_decay");
    int prev = 0;
    for (int d : lr_drop_epochs) {
        if (d <= prev && !(d > 0 && prev == 0 && lr_drop_epochs.front() == d)) {
            throw ConfigError("schedule: lr_drop_epochs must be strictly increasing");
        }
        if (d <= 0 || d >= total_epochs) {
            throw ConfigError("schedule: lr drops must lie inside (0, total_epochs)");
        }
        prev = d;
    }
}

real lr_at(const Schedule& s, int epoch) {
    int drops = 0;
    for (int d : s.lr_drop_epochs) {
        if (epoch >= d) ++drops;
    }
    return s.base_lr * std::pow(s.drop_factor, drops);
}

void EarlyStopPolicy::validate(const Schedule& s) const {
    if (!enabled) return;
    if (stop_epoch < 0) throw ConfigError("early_stop: stop_epoch unresolved; call normalize()");
    if (std::find(s.lr_drop_epochs.begin(), s.lr_drop_epochs.end(), stop_epoch) ==
        s.lr_drop_epochs.end()) {
        throw ConfigError("early_stop: stop_epoch must be one of the lr drop epochs");
    }
}

bool ckd_enabled(const EarlyStopPolicy& p, int epoch) {
    if (!p.enabled) return true;
    if (p.stop_epoch < 0) throw std::logic_error("ckd_enabled: stop_epoch unresolved");
    return epoch < p.stop_epoch;
}

// ---- plan ----

void DataConfig::validate() const {
    if (batch_size < 1) throw ConfigError("data: batch_size must be >= 1");
    if (resize_short_lo < 8 || resize_short_hi < resize_short_lo) {
        throw ConfigError("data: bad resize_short range");
    }
    if (resize_long_max < resize_short_hi) {
        throw ConfigError("data: resize_long_max below the short-side range");
    }
    if (coco_annotations.empty()) {
        try {
            shapes.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("data.shapes: ") + e.what());
        }
    }
}

void DistillPlan::normalize() {
    if (schedule.lr_drop_epochs.empty()) {
        schedule.lr_drop_epochs = Schedule::default_drops(schedule.total_epochs);
    }
    if (early_stop.enabled && schedule.lr_drop_epochs.empty()) {
        early_stop.enabled = false;  // constant-lr schedule: nothing to stop at
    }
    if (early_stop.enabled && early_stop.stop_epoch < 0) {
        early_stop.stop_epoch = schedule.lr_drop_epochs.front();
    }
}

void DistillPlan::validate() const {
    if (mode != "baseline" && mode != "head" && mode != "tf_head") {
        throw ConfigError("plan: mode must be baseline, head, or tf_head");
    }
    try {
        student.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("plan.student: ") + e.what());
    }
    if (mode == "baseline") {
        if (!assistants.empty()) throw ConfigError("plan: baseline mode takes no assistants");
    } else {
        if (assistants.empty()) throw ConfigError("plan: " + mode + " mode needs assistants");
    }
    if (mode == "head") {
        if (teacher_checkpoint.empty()) {
            throw ConfigError("plan: head mode requires teacher_checkpoint");
        }
        if (assistants.size() != 1) {
            throw ConfigError("plan: head mode uses exactly one assistant");
        }
    } else if (!teacher_checkpoint.empty()) {
        throw ConfigError("plan: teacher_checkpoint is only valid in head mode");
    }
    std::vector<std::string> names;
    for (const auto& a : assistants) {
        if (a.name.empty()) throw ConfigError("plan: assistant without a name");
        if (a.init != "random" && a.init != "from_teacher") {
            throw ConfigError("plan: assistant init must be random or from_teacher");
        }
        if (a.init == "from_teacher" && mode != "head") {
            throw ConfigError("plan: from_teacher init needs a teacher (head mode)");
        }
        try {
            a.head.validate();
        } catch (const std::exception& e) {
            throw ConfigError("plan.assistants[" + a.name + "]: " + e.what());
        }
        names.push_back(a.name);
    }
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
        throw ConfigError("plan: duplicate assistant names");
    }
    try {
        weights.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("plan.weights: ") + e.what());
    }
    schedule.validate();
    early_stop.validate(schedule);
    data.validate();
    if (infer.score_thresh < 0 || infer.score_thresh >= 1 || infer.topk_per_level < 1 ||
        infer.nms_iou <= 0 || infer.nms_iou > 1 || infer.max_dets < 1) {
        throw ConfigError("plan.infer: bad inference settings");
    }
}

namespace {

json shapes_to_json(const data::ShapesSpec& s) {
    return json{{"num_images", s.num_images},   {"val_images", s.val_images},
                {"image_size", s.image_size},   {"num_classes", s.num_classes},
                {"min_objects", s.min_objects}, {"max_objects", s.max_objects},
                {"min_size", s.min_size},       {"max_size", s.max_size},
                {"max_overlap_iou", s.max_overlap_iou},
                {"color_jitter", s.color_jitter},
                {"noise_sigma", s.noise_sigma}, {"seed", s.seed}};
}

data::ShapesSpec shapes_from_json(const json& j) {
    data::ShapesSpec s;
    s.num_images = j.value("num_images", s.num_images);
    s.val_images = j.value("val_images", s.val_images);
    s.image_size = j.value("image_size", s.image_size);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.min_objects = j.value("min_objects", s.min_objects);
    s.max_objects = j.value("max_objects", s.max_objects);
    s.min_size = j.value("min_size", s.min_size);
    s.max_size = j.value("max_size", s.max_size);
    s.max_overlap_iou = j.value("max_overlap_iou", s.max_overlap_iou);
    s.color_jitter = j.value("color_jitter", s.color_jitter);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
    return s;
}

json detector_to_json(const toydet::DetectorConfig& cfg) {
    return json::parse(toydet::config_to_json(cfg));
}

toydet::DetectorConfig detector_from_json(const json& j) {
    return toydet::config_from_json(j.dump());
}

}  // namespace

DistillPlan plan_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    DistillPlan p;
    try {
        p.mode = j.value("mode", p.mode);
        p.seed = j.value("seed", p.seed);
        if (j.contains("student")) p.student = detector_from_json(j["student"]);
        p.teacher_checkpoint = j.value("teacher_checkpoint", p.teacher_checkpoint);
        for (const auto& a : j.value("assistants", json::array())) {
            assistant::AssistantSpec spec;
            spec.name = a.value("name", std::string());
            spec.init = a.value("init", spec.init);
            if (a.contains("head")) spec.head = detector_from_json(a["head"]);
            p.assistants.push_back(std::move(spec));
        }
        if (j.contains("weights")) {
            const json& w = j["weights"];
            p.weights.lambda_A = w.value("lambda_A", p.weights.lambda_A);
            p.weights.lambda_C_same_stage =
                w.value("lambda_C_same_stage", p.weights.lambda_C_same_stage);
            p.weights.lambda_C_cross = w.value("lambda_C_cross", p.weights.lambda_C_cross);
            p.weights.lambda_assistant_gt =
                w.value("lambda_assistant_gt", p.weights.lambda_assistant_gt);
        }
        if (j.contains("schedule")) {
            const json& s = j["schedule"];
            p.schedule.total_epochs = s.value("total_epochs", p.schedule.total_epochs);
            p.schedule.lr_drop_epochs =
                s.value("lr_drop_epochs", p.schedule.lr_drop_epochs);
            p.schedule.base_lr = s.value("base_lr", p.schedule.base_lr);
            p.schedule.drop_factor = s.value("drop_factor", p.schedule.drop_factor);
            p.schedule.momentum = s.value("momentum", p.schedule.momentum);
            p.schedule.weight_decay = s.value("weight_decay", p.schedule.weight_decay);
        }
        if (j.contains("early_stop")) {
            const json& e = j["early_stop"];
            p.early_stop.enabled = e.value("enabled", p.early_stop.enabled);
            p.early_stop.stop_epoch = e.value("stop_epoch", p.early_stop.stop_epoch);
        }
        if (j.contains("data")) {
            const json& d = j["data"];
            if (d.contains("shapes")) p.data.shapes = shapes_from_json(d["shapes"]);
            p.data.coco_annotations = d.value("coco_annotations", p.data.coco_annotations);
            p.data.coco_image_root = d.value("coco_image_root", p.data.coco_image_root);
            if (d.contains("resize_short")) {
                const auto r = d["resize_short"].get<std::vector<int>>();
                if (r.size() != 2) throw ConfigError("plan.data: resize_short must be [lo, hi]");
                p.data.resize_short_lo = r[0];
                p.data.resize_short_hi = r[1];
            }
            p.data.resize_long_max = d.value("resize_long_max", p.data.resize_long_max);
            p.data.hflip = d.value("hflip", p.data.hflip);
            p.data.batch_size = d.value("batch_size", p.data.batch_size);
        }
        if (j.contains("infer")) {
            const json& i = j["infer"];
            p.infer.score_thresh = i.value("score_thresh", p.infer.score_thresh);
            p.infer.topk_per_level = i.value("topk_per_level", p.infer.topk_per_level);
            p.infer.nms_iou = i.value("nms_iou", p.infer.nms_iou);
            p.infer.max_dets = i.value("max_dets", p.infer.max_dets);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    return p;
}

std::string plan_to_json_text(const DistillPlan& p) {
    ordered_json j;
    j["mode"] = p.mode;
    j["seed"] = p.seed;
    j["student"] = detector_to_json(p.student);
    j["teacher_checkpoint"] = p.teacher_checkpoint;
    ordered_json assistants = json::array();
    for (const auto& a : p.assistants) {
        assistants.push_back(
            {{"name", a.name}, {"init", a.init}, {"head", detector_to_json(a.head)}});
    }
    j["assistants"] = std::move(assistants);
    j["weights"] = {{"lambda_A", p.weights.lambda_A},
                    {"lambda_C_same_stage", p.weights.lambda_C_same_stage},
                    {"lambda_C_cross", p.weights.lambda_C_cross},
                    {"lambda_assistant_gt", p.weights.lambda_assistant_gt}};
    j["schedule"] = {{"total_epochs", p.schedule.total_epochs},
                     {"lr_drop_epochs", p.schedule.lr_drop_epochs},
                     {"base_lr", p.schedule.base_lr},
                     {"drop_factor", p.schedule.drop_factor},
                     {"momentum", p.schedule.momentum},
                     {"weight_decay", p.schedule.weight_decay}};
    j["early_stop"] = {{"enabled", p.early_stop.enabled},
                       {"stop_epoch", p.early_stop.stop_epoch}};
    j["data"] = {{"shapes", shapes_to_json(p.data.shapes)},
                 {"coco_annotations", p.data.coco_annotations},
                 {"coco_image_root", p.data.coco_image_root},
                 {"resize_short", {p.data.resize_short_lo, p.data.resize_short_hi}},
                 {"resize_long_max", p.data.resize_long_max},
                 {"hflip", p.data.hflip},
                 {"batch_size", p.data.batch_size}};
    j["infer"] = {{"score_thresh", p.infer.score_thresh},
                  {"topk_per_level", p.infer.topk_per_level},
                  {"nms_iou", p.infer.nms_iou},
                  {"max_dets", p.infer.max_dets}};
    return j.dump(1);
}

DistillPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("plan: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return plan_from_json_text(ss.str());
}

// ---- models ----

nn::ParamMap Models::trainable() const {
    nn::ParamMap out = student->params();
    for (const auto& a : assistants) a.collect("A_" + a.name(), out);
    for (const auto& [name, taps] : akd_adapters) {
        for (const auto& [tap, ad] : taps) ad.collect("adapter.akd." + name + "." + tap, out);
    }
    for (const auto& [name, ad] : ckd_adapters) ad.collect("adapter.ckd." + name, out);
    return out;
}

namespace {

std::vector<std::string> head_tap_names(const toydet::DetectorConfig& cfg) {
    std::vector<std::string> names;
    if (cfg.family == "two_stage") {
        names = {"fc1", "fc2"};
    } else {
        for (int l = cfg.min_level; l <= cfg.max_level; ++l) {
            names.push_back("cls_l" + std::to_string(l));
            if (cfg.family == "dense") names.push_back("reg_l" + std::to_string(l));
        }
    }
    return names;
}

int64_t tap_dim(const toydet::DetectorConfig& cfg, const std::string& tap) {
    return tap.rfind("fc", 0) == 0 ? cfg.rcnn_width : cfg.channels;
}

distill::Adapter make_ckd_adapter(const std::string& teacher_family,
                                  const toydet::DetectorConfig& teacher_like,
                                  const toydet::DetectorConfig& student, Rng& rng) {
    const bool t_two = teacher_family == "two_stage";
    const bool s_two = student.family == "two_stage";
    if (t_two && !s_two) {
        return distill::Adapter::linear(student.channels, teacher_like.rcnn_width, rng);
    }
    if (!t_two && !s_two) {
        return distill::Adapter::conv1x1(student.channels, teacher_like.channels, rng);
    }
    if (t_two && s_two) {
        return distill::Adapter::linear(student.rcnn_width, teacher_like.rcnn_width, rng);
    }
    throw ConfigError(
        "ckd: a one-stage teacher-side head cannot supervise a two-stage student head");
}

}  // namespace

Models build_models(const DistillPlan& plan) {
    Models m;
    m.student = std::make_unique<toydet::Detector>(plan.student, plan.seed);

    if (plan.mode == "head") {
        if (!fs::exists(fs::path(plan.teacher_checkpoint) / "spec.json")) {
            throw ConfigError("plan: teacher checkpoint not found at " + plan.teacher_checkpoint);
        }
        m.teacher =
            std::make_unique<toydet::Detector>(toydet::load_detector(plan.teacher_checkpoint));
        nn::ParamMap frozen = m.teacher->params();
        for (auto& [name, v] : frozen) v.set_requires_grad(false);
    }

    for (const auto& spec : plan.assistants) {
        assistant::Assistant a(spec, plan.student.channels, plan.seed);
        if (spec.init == "from_teacher") {
            if (!m.teacher) throw ConfigError("plan: from_teacher init without a teacher");
            a.init_from_teacher(*m.teacher);
        }
        m.assistants.push_back(std::move(a));
    }

    if (plan.mode == "head") {
        const assistant::Assistant& a = m.assistants.front();
        const toydet::DetectorConfig& tcfg = m.teacher->config();
        if (!toydet::heads_homogeneous(tcfg, a.spec().head)) {
            throw ConfigError("plan: the head-mode assistant must mirror the teacher head");
        }
        for (const std::string& tap : head_tap_names(tcfg)) {
            Rng rng = Rng::stream(plan.seed, "adapter_init:" + a.name() + ":" + tap);
            const int64_t in = tap_dim(a.spec().head, tap);
            const int64_t out = tap_dim(tcfg, tap);
            m.akd_adapters[a.name()][tap] =
                tap.rfind("fc", 0) == 0 ? distill::Adapter::linear(in, out, rng)
                                        : distill::Adapter::conv1x1(in, out, rng);
        }
        Rng rng = Rng::stream(plan.seed, "adapter_init:ckd:teacher");
        m.ckd_adapters["teacher"] = make_ckd_adapter(tcfg.family, tcfg, plan.student, rng);
    } else if (plan.mode == "tf_head") {
        for (const auto& a : m.assistants) {
            Rng rng = Rng::stream(plan.seed, "adapter_init:ckd:" + a.name());
            m.ckd_adapters[a.name()] =
                make_ckd_adapter(a.family(), a.spec().head, plan.student, rng);
        }
    }
    return m;
}

// ---- distill step ----

namespace {

std::map<int, Var> cls_feature_map(const HeadTaps& taps, int min_level, int max_level) {
    std::map<int, Var> out;
    for (int l = min_level; l <= max_level; ++l) {
        out[l] = taps.at("cls_l" + std::to_string(l));
    }
    return out;
}

struct StudentForward {
    FeaturePyramid pyr;
    LossReport gt;
    RoISet rois;
    std::map<int, Var> cls_features;  // one-stage students
    Var roi_features;                 // two-stage students: fc1 rows
};

std::map<int, bridge::LevelDense> dense_proposal_levels(const toydet::DenseOut& out,
                                                        const toydet::DetectorConfig& cfg,
                                                        const FeaturePyramid& pyr) {
    std::map<int, bridge::LevelDense> levels;
    for (const auto& [l, fm] : pyr.levels) {
        levels[l] = bridge::LevelDense{
            Var::constant(bridge::objectness_from_dense(out.cls.at(l).val(), cfg.num_classes)),
            Var::constant(out.reg.at(l).val()),
            toydet::make_anchors(fm.height(), fm.width(), fm.stride, cfg.anchors),
            cfg.anchors.slots()};
    }
    return levels;
}

// The point head predicts center distances rather than anchor deltas, so its
// proposal path synthesizes a one-slot anchor grid and encodes the decoded
// boxes back into delta form; the shared proposal machinery then applies.
std::map<int, bridge::LevelDense> point_proposal_levels(const toydet::PointOut& out,
                                                        const toydet::DetectorConfig& cfg,
                                                        const FeaturePyramid& pyr) {
    std::map<int, bridge::LevelDense> levels;
    for (const auto& [l, fm] : pyr.levels) {
        const Tensor& cls = out.cls.at(l).val();
        const Tensor& reg = out.reg.at(l).val();
        const int64_t h = fm.height(), w = fm.width();
        const real stride = static_cast<real>(fm.stride);
        std::vector<Box> anchors;
        anchors.reserve(static_cast<size_t>(h * w));
        Tensor deltas({4, h, w});
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const real px = (static_cast<real>(x) + real(0.5)) * stride;
                const real py = (static_cast<real>(y) + real(0.5)) * stride;
                const Box anchor{px - stride / 2, py - stride / 2, px + stride / 2,
                                 py + stride / 2};
                anchors.push_back(anchor);
                const Box decoded{px - reg.at(0, y, x), py - reg.at(1, y, x),
                                  px + reg.at(2, y, x), py + reg.at(3, y, x)};
                real d[4];
                bridge::encode_box(anchor, decoded, d);
                for (int64_t c = 0; c < 4; ++c) deltas.at(c, y, x) = d[c];
            }
        }
        levels[l] = bridge::LevelDense{
            Var::constant(bridge::objectness_from_dense(cls, cfg.num_classes)),
            Var::constant(std::move(deltas)), std::move(anchors), 1};
    }
    return levels;
}

std::map<int, bridge::LevelDense> rpn_proposal_levels(const toydet::RpnOut& out,
                                                      const toydet::DetectorConfig& cfg,
                                                      const FeaturePyramid& pyr) {
    std::map<int, bridge::LevelDense> levels;
    for (const auto& [l, fm] : pyr.levels) {
        levels[l] = bridge::LevelDense{
            out.obj.at(l), out.reg.at(l),
            toydet::make_anchors(fm.height(), fm.width(), fm.stride, cfg.anchors),
            cfg.anchors.slots()};
    }
    return levels;
}

StudentForward student_forward(const toydet::Detector& det, const data::Sample& s) {
    StudentForward f;
    Var image = Var::constant(s.image);
    f.pyr = det.backbone_forward(image);
    const toydet::DetectorConfig& cfg = det.config();
    const real img_w = static_cast<real>(s.width());
    const real img_h = static_cast<real>(s.height());

    if (cfg.family == "dense") {
        toydet::DenseOut out = det.dense()->forward(f.pyr);
        f.gt = toydet::dense_gt_loss(*det.dense(), out, s.targets, cfg, f.pyr);
        f.cls_features = cls_feature_map(out.taps, f.pyr.min_level(), f.pyr.max_level());
        f.rois = bridge::propose_rois(dense_proposal_levels(out, cfg, f.pyr), img_w, img_h,
                                      cfg.proposals);
        return f;
    }
    if (cfg.family == "point") {
        toydet::PointOut out = det.point()->forward(f.pyr);
        f.gt = toydet::point_gt_loss(*det.point(), out, s.targets, cfg, f.pyr);
        f.cls_features = cls_feature_map(out.taps, f.pyr.min_level(), f.pyr.max_level());
        f.rois = bridge::propose_rois(point_proposal_levels(out, cfg, f.pyr), img_w, img_h,
                                      cfg.proposals);
        return f;
    }

    // two-stage: mirror the plain gt path exactly (GT boxes appended for the
    // second stage) so the zero-weight trajectory matches the baseline
    toydet::RpnOut rpn_out = det.rpn()->forward(f.pyr);
    f.gt = toydet::rpn_gt_loss(rpn_out, s.targets, cfg, f.pyr);
    f.rois = bridge::propose_rois(rpn_proposal_levels(rpn_out, cfg, f.pyr), img_w, img_h,
                                  cfg.proposals);
    f.rois.source.reset();
    for (int64_t i = 0; i < s.targets.size(); ++i) {
        const Box& b = s.targets.boxes[static_cast<size_t>(i)];
        if (b.w() <= 0 || b.h() <= 0) continue;
        f.rois.boxes.push_back(b);
        f.rois.scores.push_back(1);
        f.rois.level.push_back(bridge::assign_fpn_level(b, cfg.min_level, cfg.max_level));
    }
    Var pooled = bridge::roi_align_pyramid(f.pyr, f.rois, cfg.roi_align_size);
    toydet::RcnnOut rcnn_out = det.rcnn()->forward(pooled);
    f.gt.merge(toydet::rcnn_gt_loss(rcnn_out, f.rois, s.targets, cfg));
    f.roi_features = rcnn_out.taps.at("fc1");
    return f;
}

struct SideFeatures {
    std::string family;
    HeadTaps taps;
    std::map<int, Var> cls_features;
    Var roi_features;
};

SideFeatures teacher_forward(const toydet::Detector& t, const data::Sample& s,
                             const RoISet& rois) {
    NoGradGuard frozen;
    SideFeatures out;
    out.family = t.family();
    FeaturePyramid pyr = t.backbone_forward(Var::constant(s.image));
    if (out.family == "two_stage") {
        Var pooled = bridge::roi_align_pyramid(pyr, rois, t.config().roi_align_size);
        toydet::RcnnOut rc = t.rcnn()->forward(pooled);
        out.taps = rc.taps;
        out.roi_features = rc.taps.at("fc1");
    } else if (out.family == "dense") {
        toydet::DenseOut o = t.dense()->forward(pyr);
        out.taps = o.taps;
        out.cls_features = cls_feature_map(o.taps, pyr.min_level(), pyr.max_level());
    } else {
        toydet::PointOut o = t.point()->forward(pyr);
        out.taps = o.taps;
        out.cls_features = cls_feature_map(o.taps, pyr.min_level(), pyr.max_level());
    }
    return out;
}

LossReport ckd_pair(const std::string& pair_name, const SideFeatures& tside,
                    const StudentForward& sf, const std::string& student_family,
                    const distill::Adapter& adapter, const distill::DistillWeights& w) {
    const bool t_two = tside.family == "two_stage";
    const bool s_two = student_family == "two_stage";
    const std::string term = "C_" + pair_name;
    if (t_two && !s_two) {
        Var traced = bridge::trace_rois_to_anchor_features(sf.rois, sf.cls_features);
        return distill::ckd_cross_stage(tside.roi_features, traced, adapter, w, term);
    }
    if (!t_two && !s_two) {
        return distill::ckd_same_stage(tside.cls_features, sf.cls_features, adapter, w, true,
                                       term);
    }
    if (t_two && s_two) {
        const std::map<int, Var> ft{{0, tside.roi_features}};
        const std::map<int, Var> fs{{0, sf.roi_features}};
        return distill::ckd_same_stage(ft, fs, adapter, w, false, term);
    }
    throw ConfigError(
        "ckd: a one-stage teacher-side head cannot supervise a two-stage student head");
}

LossReport forward_one(const DistillPlan& plan, const data::Sample& s, const Models& m) {
    if (plan.mode == "baseline") {
        return m.student->gt_loss(Var::constant(s.image), s.targets);
    }
    StudentForward sf = student_forward(*m.student, s);

    if (plan.mode == "head") {
        const assistant::Assistant& a = m.assistants.front();
        SideFeatures ts = teacher_forward(*m.teacher, s, sf.rois);
        assistant::Assistant::Forward af = a.forward_with_gt(sf.pyr, sf.rois, s.targets);
        LossReport akd =
            distill::akd_loss(ts.taps, af.taps, m.akd_adapters.at(a.name()),
                              af.gt.reweighted(plan.weights.lambda_assistant_gt), plan.weights);
        LossReport ckd = ckd_pair("teacher", ts, sf, plan.student.family,
                                  m.ckd_adapters.at("teacher"), plan.weights);
        return distill::compose_head(sf.gt, akd.with_prefix("A_" + a.name() + "/"), ckd);
    }

    std::vector<std::pair<LossReport, LossReport>> per_assistant;
    for (const auto& a : m.assistants) {
        assistant::Assistant::Forward af = a.forward_with_gt(sf.pyr, sf.rois, s.targets);
        SideFeatures ts;
        ts.family = a.family();
        ts.cls_features = af.cls_features;
        ts.roi_features = af.roi_features;
        LossReport ar = af.gt.reweighted(plan.weights.lambda_assistant_gt)
                            .with_prefix("A_" + a.name() + "/");
        LossReport cr = ckd_pair(a.name(), ts, sf, plan.student.family,
                                 m.ckd_adapters.at(a.name()), plan.weights);
        per_assistant.emplace_back(std::move(ar), std::move(cr));
    }
    return distill::compose_tf_head(sf.gt, per_assistant);
}

// Numeric snapshot of a report: same names/weights/flags, values detached to
// plain scalars so the step's graph can be freed.
LossReport snapshot(const LossReport& r) {
    LossReport out;
    for (const auto& [name, t] : r.terms()) {
        out.add(name, Var::scalar(t.value.val().item()), t.weight, t.enabled);
    }
    return out;
}

LossReport average_reports(const std::vector<LossReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("average_reports: empty batch");
    LossReport out;
    const auto& first = reports.front().terms();
    for (size_t k = 0; k < first.size(); ++k) {
        real sum = 0;
        for (const auto& r : reports) {
            const auto& terms = r.terms();
            if (terms.size() != first.size() || terms[k].first != first[k].first) {
                throw std::logic_error("average_reports: term sets differ across the batch");
            }
            sum += terms[k].second.value.val().item();
        }
        out.add(first[k].first, Var::scalar(sum / static_cast<real>(reports.size())),
                first[k].second.weight, first[k].second.enabled);
    }
    return out;
}

}  // namespace

LossReport distill_step(const DistillPlan& plan, const std::vector<const data::Sample*>& batch,
                        Models& models, nn::Sgd& opt, int epoch) {
    if (batch.empty()) throw std::invalid_argument("distill_step: empty batch");
    const bool ckd_on = ckd_enabled(plan.early_stop, epoch);
    nn::ParamMap params = models.trainable();
    opt.zero_grad(params);
    const real inv_b = real(1) / static_cast<real>(batch.size());
    std::vector<LossReport> snapshots;
    snapshots.reserve(batch.size());
    for (const data::Sample* s : batch) {
        LossReport rep = forward_one(plan, *s, models);
        if (!ckd_on) rep.set_enabled_prefix("C_", false);
        backward(scale(rep.total_var(), inv_b));
        snapshots.push_back(snapshot(rep));
    }
    opt.step(params, lr_at(plan.schedule, epoch));
    return average_reports(snapshots);
}

// ---- evaluation ----

eval::MapMetrics evaluate_detector(const toydet::Detector& det,
                                   const std::vector<data::Sample>& samples,
                                   const toydet::InferenceConfig& icfg,
                                   data::NamedDetections* out_dets) {
    std::vector<Detections> dets;
    std::vector<toydet::Targets> gts;
    real image_size = 128;
    for (const auto& s : samples) {
        const data::Sample padded = data::pad_to_multiple(s, det.config().max_stride());
        Detections d = det.infer(Var::constant(padded.image), icfg);
        if (out_dets) out_dets->emplace_back(s.id, d);
        dets.push_back(std::move(d));
        gts.push_back(s.targets);
        image_size = std::max(image_size, static_cast<real>(std::max(s.height(), s.width())));
    }
    if (samples.empty()) return eval::MapMetrics{};
    return eval::evaluate_map(dets, gts, image_size);
}

// ---- experiment loop ----

data::Dataset load_dataset(const DataConfig& dc) {
    if (!dc.coco_annotations.empty()) {
        std::vector<data::Sample> samples =
            data::load_coco(dc.coco_annotations, dc.coco_image_root);
        data::Dataset ds;
        for (auto& s : samples) {
            (fnv1a_str(s.id) % 10 == 0 ? ds.val : ds.train).push_back(std::move(s));
        }
        return ds;
    }
    return data::generate_shapes(dc.shapes);
}

namespace {

data::Sample prepare(const data::Sample& s, const DistillPlan& plan, int64_t pad_stride,
                     int epoch) {
    Rng rng = Rng::stream(plan.seed, "aug:" + std::to_string(epoch) + ":" + s.id);
    data::Sample out = data::resize_sample(
        s, {plan.data.resize_short_lo, plan.data.resize_short_hi}, plan.data.resize_long_max,
        rng);
    if (plan.data.hflip && rng.uniform(0, 1) < real(0.5)) out = data::hflip_sample(out);
    return data::pad_to_multiple(out, pad_stride);
}

nn::ParamMap adapter_params(const Models& m) {
    nn::ParamMap out;
    for (const auto& [name, taps] : m.akd_adapters) {
        for (const auto& [tap, ad] : taps) ad.collect("akd." + name + "." + tap, out);
    }
    for (const auto& [name, ad] : m.ckd_adapters) ad.collect("ckd." + name, out);
    return out;
}

void save_checkpoint(const std::string& dir, const Models& m, nn::Sgd& opt, int epoch,
                     int64_t global_step) {
    fs::create_directories(dir);
    toydet::save_detector(*m.student, dir + "/student");
    for (const auto& a : m.assistants) {
        const std::string adir = dir + "/assistants/" + a.name();
        fs::create_directories(adir);
        ordered_json spec;
        spec["name"] = a.name();
        spec["init"] = a.spec().init;
        spec["head"] = detector_to_json(a.spec().head);
        std::ofstream sp(adir + "/spec.json");
        sp << spec.dump(1) << "\n";
        toydet::save_params(a.params(), adir + "/weights");
    }
    nn::ParamMap adp = adapter_params(m);
    if (!adp.empty()) toydet::save_params(adp, dir + "/adapters");
    if (!opt.velocity().empty()) {
        nn::ParamMap vel;
        for (const auto& [name, t] : opt.velocity()) vel[name] = Var::constant(t);
        toydet::save_params(vel, dir + "/velocity");
    }
    ordered_json state;
    state["epoch"] = epoch;
    state["global_step"] = global_step;
    std::ofstream st(dir + "/state.json");
    st << state.dump(1) << "\n";
}

int64_t load_checkpoint(const std::string& dir, Models& m, nn::Sgd& opt,
                        const nn::ParamMap& trainable) {
    nn::ParamMap sp = m.student->params();
    toydet::load_params(sp, dir + "/student/weights");
    for (auto& a : m.assistants) {
        nn::ParamMap ap = a.params();
        toydet::load_params(ap, dir + "/assistants/" + a.name() + "/weights");
    }
    nn::ParamMap adp = adapter_params(m);
    if (!adp.empty()) toydet::load_params(adp, dir + "/adapters");
    if (fs::exists(dir + "/velocity")) {
        nn::ParamMap vel;
        for (const auto& [name, v] : trainable) {
            vel[name] = Var::constant(Tensor::zeros(v.val().shape()));
        }
        toydet::load_params(vel, dir + "/velocity");
        opt.velocity().clear();
        for (const auto& [name, v] : vel) opt.velocity()[name] = v.val();
    }
    std::ifstream st(dir + "/state.json");
    if (!st) throw std::runtime_error("checkpoint missing state.json in " + dir);
    json state = json::parse(st);
    return state.at("global_step").get<int64_t>();
}

int newest_checkpoint_epoch(const std::string& ckpt_root) {
    int best = -1;
    if (!fs::is_directory(ckpt_root)) return best;
    for (const auto& e : fs::directory_iterator(ckpt_root)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("epoch_", 0) != 0) continue;
        if (!fs::exists(e.path() / "state.json")) continue;
        best = std::max(best, std::stoi(name.substr(6)));
    }
    return best;
}

// Drops any logged steps at or past the resume point so each step appears
// exactly once even after an interrupted epoch.
void trim_log(const std::string& path, int64_t resume_step) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            if (json::parse(line).value("step", int64_t(0)) >= resume_step) continue;
        } catch (const json::parse_error&) {
            continue;
        }
        keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) out << l << "\n";
}

}  // namespace

TrainResult train(const DistillPlan& plan_in, const std::string& out_dir, bool resume) {
    DistillPlan plan = plan_in;
    plan.normalize();
    plan.validate();

    fs::create_directories(out_dir);
    {
        std::ofstream pj(out_dir + "/plan.json");
        if (!pj) throw std::runtime_error("train: cannot write into " + out_dir);
        pj << plan_to_json_text(plan) << "\n";
    }

    data::Dataset ds = load_dataset(plan.data);
    if (ds.train.empty()) throw ConfigError("train: dataset has no training images");

    Models models = build_models(plan);
    nn::Sgd opt(plan.schedule.momentum, plan.schedule.weight_decay);
    nn::ParamMap trainable = models.trainable();

    int64_t pad_stride = plan.student.max_stride();
    if (models.teacher) pad_stride = std::max(pad_stride, models.teacher->config().max_stride());

    const std::string ckpt_root = out_dir + "/ckpt";
    const std::string log_path = out_dir + "/log.jsonl";
    int start_epoch = 0;
    int64_t global_step = 0;
    if (resume) {
        const int e = newest_checkpoint_epoch(ckpt_root);
        if (e >= 0) {
            global_step = load_checkpoint(ckpt_root + "/epoch_" + std::to_string(e), models, opt,
                                          trainable);
            start_epoch = e + 1;
            trim_log(log_path, global_step);
        }
    }
    if (!resume || !fs::exists(log_path)) {
        std::ofstream(log_path, std::ios::trunc);
    }
    std::ofstream log(log_path, std::ios::app);

    const int64_t batch_size = plan.data.batch_size;
    const auto& drops = plan.schedule.lr_drop_epochs;
    for (int epoch = start_epoch; epoch < plan.schedule.total_epochs; ++epoch) {
        std::vector<size_t> order(ds.train.size());
        std::iota(order.begin(), order.end(), size_t(0));
        Rng shuffle_rng = Rng::stream(plan.seed, "shuffle", static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
            const size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size));
            std::vector<data::Sample> staged;
            staged.reserve(end - at);
            for (size_t i = at; i < end; ++i) {
                staged.push_back(prepare(ds.train[order[i]], plan, pad_stride, epoch));
            }
            std::vector<const data::Sample*> batch;
            for (const auto& s : staged) batch.push_back(&s);
            LossReport rep = distill_step(plan, batch, models, opt, epoch);
            log << loss_report_json_line(rep, global_step,
                                         {{"epoch", static_cast<real>(epoch)},
                                          {"lr", lr_at(plan.schedule, epoch)}})
                << "\n";
            ++global_step;
        }
        log.flush();

        const bool pre_drop = std::find(drops.begin(), drops.end(), epoch + 1) != drops.end();
        if (pre_drop || epoch == plan.schedule.total_epochs - 1) {
            save_checkpoint(ckpt_root + "/epoch_" + std::to_string(epoch), models, opt, epoch,
                            global_step);
        }
    }

    save_checkpoint(ckpt_root + "/final", models, opt, plan.schedule.total_epochs - 1,
                    global_step);

    data::NamedDetections val_dets;
    eval::MapMetrics metrics = evaluate_detector(*models.student, ds.val, plan.infer, &val_dets);
    data::save_detections_json(out_dir + "/val_detections.json", val_dets);
    ordered_json mj;
    mj["map"] = metrics.map;
    mj["map50"] = metrics.map50;
    mj["map75"] = metrics.map75;
    mj["map_s"] = metrics.map_s;
    mj["map_m"] = metrics.map_m;
    mj["map_l"] = metrics.map_l;
    mj["val_images"] = ds.val.size();
    mj["steps"] = global_step;
    std::ofstream mf(out_dir + "/metrics.json");
    mf << mj.dump(1) << "\n";

    return TrainResult{metrics, ckpt_root + "/final/student"};
}

}  // namespace headkd::train
