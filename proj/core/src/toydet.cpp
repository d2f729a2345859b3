#include "headkd/toydet.hpp"

#include <cmath>
#include <stdexcept>

namespace headkd::toydet {

namespace {

// classification bias prior so the initial foreground probability is ~1%
constexpr real kClsBiasPrior = -4.59512;  // -log((1-0.01)/0.01)

void fill_bias(nn::Conv2d& conv, real v) { conv.b.val_mut().fill(v); }

}  // namespace

void DetectorConfig::validate() const {
    if (family != "dense" && family != "point" && family != "two_stage") {
        throw std::invalid_argument("DetectorConfig: unknown family " + family);
    }
    if (channels < 1 || rcnn_width < 1 || num_classes < 1 || num_convs < 1) {
        throw std::invalid_argument("DetectorConfig: widths and depths must be positive");
    }
    if (min_level < 2 || max_level > 6 || min_level > max_level) {
        throw std::invalid_argument("DetectorConfig: level range must sit within 2..6");
    }
    if (anchors.scales.empty()) throw std::invalid_argument("DetectorConfig: no anchor scales");
    if (static_cast<int>(point_range_breaks.size()) != max_level - min_level) {
        throw std::invalid_argument("DetectorConfig: need one point range break per level gap");
    }
    if (roi_align_size < 1) throw std::invalid_argument("DetectorConfig: bad roi_align_size");
}

std::vector<Box> make_anchors(int64_t h, int64_t w, int64_t stride, const AnchorConfig& cfg) {
    std::vector<Box> out;
    out.reserve(static_cast<size_t>(cfg.slots() * h * w));
    for (real scale : cfg.scales) {
        const real side = cfg.base * scale * static_cast<real>(stride);
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const real cx = (static_cast<real>(x) + real(0.5)) * static_cast<real>(stride);
                const real cy = (static_cast<real>(y) + real(0.5)) * static_cast<real>(stride);
                out.push_back(Box{cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2});
            }
        }
    }
    return out;
}

// ---- backbone ----

BackboneFPN::BackboneFPN(const DetectorConfig& cfg, Rng& rng)
    : channels(cfg.channels),
      min_level(cfg.min_level),
      max_level(cfg.max_level),
      pad_indivisible(cfg.pad_indivisible) {
    const bool bias = cfg.backbone_bias;
    // trunk widths by cumulative stride: 2 -> 16, 4 -> 32, 8+ -> 64
    auto push = [&](int64_t cin, int64_t cout, int64_t stride, int tap_level) {
        trunk.emplace_back(cin, cout, 3, stride, 1, rng, bias);
        trunk_level.push_back(tap_level);
    };
    push(3, 16, 2, -1);
    push(16, 32, 2, -1);
    push(32, 32, 1, 2);
    push(32, 64, 2, -1);
    push(64, 64, 1, 3);
    if (max_level >= 4) push(64, 64, 2, 4);
    if (max_level >= 5) push(64, 64, 2, 5);
    if (max_level >= 6) push(64, 64, 2, 6);

    auto trunk_channels = [](int level) { return level == 2 ? int64_t(32) : int64_t(64); };
    for (int l = min_level; l <= max_level; ++l) {
        lateral.emplace(l, nn::Conv2d(trunk_channels(l), channels, 1, 1, 0, rng, bias));
    }
    for (int l = min_level; l <= max_level; ++l) {
        smooth.emplace(l, nn::Conv2d(channels, channels, 3, 1, 1, rng, bias));
    }
}

FeaturePyramid BackboneFPN::forward(Var image) const {
    if (image.rank() != 3 || image.size(0) != 3) {
        throw std::invalid_argument("backbone: image must be (3,H,W)");
    }
    const int64_t stride_max = int64_t(1) << max_level;
    if (image.size(1) % stride_max != 0 || image.size(2) % stride_max != 0) {
        if (!pad_indivisible) {
            throw std::invalid_argument("backbone: image size " + std::to_string(image.size(1)) +
                                        "x" + std::to_string(image.size(2)) +
                                        " not divisible by stride " + std::to_string(stride_max) +
                                        "; resize or enable padding");
        }
        const int64_t h = image.size(1), w = image.size(2);
        const int64_t hp = (h + stride_max - 1) / stride_max * stride_max;
        const int64_t wp = (w + stride_max - 1) / stride_max * stride_max;
        Tensor padded({3, hp, wp});
        for (int64_t ch = 0; ch < 3; ++ch) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) padded.at(ch, y, x) = image.val().at(ch, y, x);
            }
        }
        image = Var::constant(std::move(padded));
    }

    std::map<int, Var> c;
    Var x = image;
    for (size_t i = 0; i < trunk.size(); ++i) {
        x = relu(trunk[i].forward(x));
        if (trunk_level[i] >= min_level) c[trunk_level[i]] = x;
    }

    FeaturePyramid pyr;
    Var top;
    for (int l = max_level; l >= min_level; --l) {
        Var lat = lateral.at(l).forward(c.at(l));
        top = top.defined() ? add(lat, upsample_nearest2(top)) : lat;
        pyr.levels[l] = FeatureMap{smooth.at(l).forward(top), int64_t(1) << l};
    }
    pyr.validate();
    return pyr;
}

void BackboneFPN::collect(const std::string& prefix, nn::ParamMap& out) const {
    for (size_t i = 0; i < trunk.size(); ++i) {
        trunk[i].collect(prefix + ".trunk." + std::to_string(i), out);
    }
    for (const auto& [l, conv] : lateral) {
        conv.collect(prefix + ".lateral.l" + std::to_string(l), out);
    }
    for (const auto& [l, conv] : smooth) {
        conv.collect(prefix + ".smooth.l" + std::to_string(l), out);
    }
}

// ---- dense head ----

DenseHead::DenseHead(const DetectorConfig& cfg, Rng& rng)
    : channels(cfg.channels), num_classes(cfg.num_classes), anchors(cfg.anchors) {
    for (int i = 0; i < cfg.num_convs; ++i) {
        cls_tower.emplace_back(channels, channels, 3, 1, 1, rng);
        reg_tower.emplace_back(channels, channels, 3, 1, 1, rng);
    }
    cls_pred = nn::Conv2d(channels, anchors.slots() * num_classes, 3, 1, 1, rng);
    reg_pred = nn::Conv2d(channels, anchors.slots() * 4, 3, 1, 1, rng);
    fill_bias(cls_pred, kClsBiasPrior);
}

DenseOut DenseHead::forward(const FeaturePyramid& pyr) const {
    if (pyr.channels() != channels) {
        throw std::invalid_argument("dense head: pyramid channels " +
                                    std::to_string(pyr.channels()) + ", expected " +
                                    std::to_string(channels));
    }
    DenseOut out;
    for (const auto& [l, fm] : pyr.levels) {
        Var tc = fm.data;
        for (const auto& conv : cls_tower) tc = relu(conv.forward(tc));
        Var tr = fm.data;
        for (const auto& conv : reg_tower) tr = relu(conv.forward(tr));
        const std::string suffix = "_l" + std::to_string(l);
        out.taps.named.emplace("cls" + suffix, tc);
        out.taps.named.emplace("reg" + suffix, tr);
        out.cls[l] = cls_pred.forward(tc);
        out.reg[l] = reg_pred.forward(tr);
    }
    return out;
}

void DenseHead::collect(const std::string& prefix, nn::ParamMap& out) const {
    for (size_t i = 0; i < cls_tower.size(); ++i) {
        cls_tower[i].collect(prefix + ".cls_tower." + std::to_string(i), out);
        reg_tower[i].collect(prefix + ".reg_tower." + std::to_string(i), out);
    }
    cls_pred.collect(prefix + ".cls_pred", out);
    reg_pred.collect(prefix + ".reg_pred", out);
}

// ---- point head ----

PointHead::PointHead(const DetectorConfig& cfg, Rng& rng)
    : channels(cfg.channels), num_classes(cfg.num_classes) {
    for (int i = 0; i < cfg.num_convs; ++i) {
        cls_tower.emplace_back(channels, channels, 3, 1, 1, rng);
        reg_tower.emplace_back(channels, channels, 3, 1, 1, rng);
    }
    cls_pred = nn::Conv2d(channels, num_classes, 3, 1, 1, rng);
    ctr_pred = nn::Conv2d(channels, 1, 3, 1, 1, rng);
    reg_pred = nn::Conv2d(channels, 4, 3, 1, 1, rng);
    fill_bias(cls_pred, kClsBiasPrior);
}

PointOut PointHead::forward(const FeaturePyramid& pyr) const {
    if (pyr.channels() != channels) {
        throw std::invalid_argument("point head: pyramid channel mismatch");
    }
    PointOut out;
    for (const auto& [l, fm] : pyr.levels) {
        Var tc = fm.data;
        for (const auto& conv : cls_tower) tc = relu(conv.forward(tc));
        Var tr = fm.data;
        for (const auto& conv : reg_tower) tr = relu(conv.forward(tr));
        out.taps.named.emplace("cls_l" + std::to_string(l), tc);
        out.cls[l] = cls_pred.forward(tc);
        out.ctr[l] = ctr_pred.forward(tr);
        out.reg[l] = scale(exp(reg_pred.forward(tr)), static_cast<real>(fm.stride));
    }
    return out;
}

void PointHead::collect(const std::string& prefix, nn::ParamMap& out) const {
    for (size_t i = 0; i < cls_tower.size(); ++i) {
        cls_tower[i].collect(prefix + ".cls_tower." + std::to_string(i), out);
        reg_tower[i].collect(prefix + ".reg_tower." + std::to_string(i), out);
    }
    cls_pred.collect(prefix + ".cls_pred", out);
    ctr_pred.collect(prefix + ".ctr_pred", out);
    reg_pred.collect(prefix + ".reg_pred", out);
}

// ---- two-stage head ----

Rpn::Rpn(const DetectorConfig& cfg, Rng& rng) : anchors(cfg.anchors) {
    conv = nn::Conv2d(cfg.channels, cfg.channels, 3, 1, 1, rng);
    obj_pred = nn::Conv2d(cfg.channels, anchors.slots(), 1, 1, 0, rng);
    reg_pred = nn::Conv2d(cfg.channels, anchors.slots() * 4, 1, 1, 0, rng);
    fill_bias(obj_pred, kClsBiasPrior);
}

RpnOut Rpn::forward(const FeaturePyramid& pyr) const {
    RpnOut out;
    for (const auto& [l, fm] : pyr.levels) {
        Var h = relu(conv.forward(fm.data));
        out.obj[l] = obj_pred.forward(h);
        out.reg[l] = reg_pred.forward(h);
    }
    return out;
}

void Rpn::collect(const std::string& prefix, nn::ParamMap& out) const {
    conv.collect(prefix + ".conv", out);
    obj_pred.collect(prefix + ".obj_pred", out);
    reg_pred.collect(prefix + ".reg_pred", out);
}

RcnnHead::RcnnHead(const DetectorConfig& cfg, Rng& rng)
    : in_dim(cfg.channels * cfg.roi_align_size * cfg.roi_align_size),
      width(cfg.rcnn_width),
      num_classes(cfg.num_classes) {
    fc1 = nn::Linear(in_dim, width, rng);
    fc2 = nn::Linear(width, width, rng);
    cls_pred = nn::Linear(width, num_classes + 1, rng);
    reg_pred = nn::Linear(width, 4, rng);
}

RcnnOut RcnnHead::forward(Var roi_feats) const {
    if (roi_feats.rank() != 2 || roi_feats.size(1) != in_dim) {
        throw std::invalid_argument("rcnn head: expected (N," + std::to_string(in_dim) +
                                    ") features, got " + shape_str(roi_feats.shape()));
    }
    RcnnOut out;
    Var h1 = relu(fc1.forward(roi_feats));
    Var h2 = relu(fc2.forward(h1));
    out.taps.named.emplace("fc1", h1);
    out.taps.named.emplace("fc2", h2);
    out.cls = cls_pred.forward(h2);
    out.reg = reg_pred.forward(h2);
    return out;
}

void RcnnHead::collect(const std::string& prefix, nn::ParamMap& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
    cls_pred.collect(prefix + ".cls_pred", out);
    reg_pred.collect(prefix + ".reg_pred", out);
}

// ---- detector ----

Detector::Detector(const DetectorConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng backbone_rng = Rng::stream(seed, "backbone_init");
    backbone_ = BackboneFPN(cfg_, backbone_rng);
    Rng head_rng = Rng::stream(seed, "head_init");
    if (cfg_.family == "dense") {
        dense_ = std::make_unique<DenseHead>(cfg_, head_rng);
    } else if (cfg_.family == "point") {
        point_ = std::make_unique<PointHead>(cfg_, head_rng);
    } else {
        rpn_ = std::make_unique<Rpn>(cfg_, head_rng);
        rcnn_ = std::make_unique<RcnnHead>(cfg_, head_rng);
    }
}

nn::ParamMap Detector::params() const {
    nn::ParamMap out;
    backbone_.collect("backbone", out);
    if (dense_) dense_->collect("head", out);
    if (point_) point_->collect("head", out);
    if (rpn_) rpn_->collect("rpn", out);
    if (rcnn_) rcnn_->collect("rcnn", out);
    return out;
}

LossReport Detector::gt_loss(Var image, const Targets& t) const {
    FeaturePyramid pyr = backbone_.forward(image);
    const real img_h = static_cast<real>(image.size(1));
    const real img_w = static_cast<real>(image.size(2));
    if (cfg_.family == "dense") {
        return dense_gt_loss(*dense_, dense_->forward(pyr), t, cfg_, pyr);
    }
    if (cfg_.family == "point") {
        return point_gt_loss(*point_, point_->forward(pyr), t, cfg_, pyr);
    }
    RpnOut rpn_out = rpn_->forward(pyr);
    LossReport report = rpn_gt_loss(rpn_out, t, cfg_, pyr);

    std::map<int, bridge::LevelDense> levels;
    for (const auto& [l, fm] : pyr.levels) {
        levels[l] = bridge::LevelDense{rpn_out.obj.at(l), rpn_out.reg.at(l),
                                       make_anchors(fm.height(), fm.width(), fm.stride,
                                                    cfg_.anchors),
                                       cfg_.anchors.slots()};
    }
    RoISet rois = bridge::propose_rois(levels, img_w, img_h, cfg_.proposals);
    // appended GT boxes guarantee foreground examples for the second stage;
    // this internal set never feeds distillation, so provenance is dropped
    rois.source.reset();
    for (int64_t i = 0; i < t.size(); ++i) {
        const Box& b = t.boxes[static_cast<size_t>(i)];
        if (b.w() <= 0 || b.h() <= 0) continue;
        rois.boxes.push_back(b);
        rois.scores.push_back(1);
        rois.level.push_back(bridge::assign_fpn_level(b, cfg_.min_level, cfg_.max_level));
    }
    Var pooled = bridge::roi_align_pyramid(pyr, rois, cfg_.roi_align_size);
    RcnnOut rcnn_out = rcnn_->forward(pooled);
    report.merge(rcnn_gt_loss(rcnn_out, rois, t, cfg_));
    return report;
}

Detections Detector::infer(Var image, const InferenceConfig& icfg) const {
    NoGradGuard ng;
    FeaturePyramid pyr = backbone_.forward(image);
    const real img_h = static_cast<real>(image.size(1));
    const real img_w = static_cast<real>(image.size(2));
    if (cfg_.family == "dense") {
        return infer_dense(*dense_, dense_->forward(pyr), img_w, img_h, icfg, pyr);
    }
    if (cfg_.family == "point") {
        return infer_point(*point_, point_->forward(pyr), img_w, img_h, icfg, pyr);
    }
    return infer_two_stage(*rpn_, *rcnn_, pyr, img_w, img_h, cfg_, icfg);
}

bool heads_homogeneous(const DetectorConfig& a, const DetectorConfig& b) {
    if (a.family != b.family || a.num_classes != b.num_classes ||
        a.min_level != b.min_level || a.max_level != b.max_level) {
        return false;
    }
    if (a.family == "two_stage") {
        return a.channels == b.channels && a.rcnn_width == b.rcnn_width &&
               a.roi_align_size == b.roi_align_size;
    }
    const bool towers_match = a.channels == b.channels && a.num_convs == b.num_convs;
    if (a.family == "dense") {
        return towers_match && a.anchors.base == b.anchors.base &&
               a.anchors.scales == b.anchors.scales;
    }
    return towers_match;
}

}  // namespace headkd::toydet
