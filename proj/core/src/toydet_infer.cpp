#include "headkd/toydet.hpp"

#include <algorithm>
#include <cmath>

namespace headkd::toydet {

namespace {

real stable_sigmoid(real x) {
    if (x >= 0) return 1 / (1 + std::exp(-x));
    real e = std::exp(x);
    return e / (1 + e);
}

struct Cand {
    real score = 0;
    int level = 0;
    int64_t y = 0, x = 0;
    int slot = 0;
    int cls = 0;
    Box box;
};

bool cand_before(const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.level != b.level) return a.level < b.level;
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    if (a.slot != b.slot) return a.slot < b.slot;
    return a.cls < b.cls;
}

Detections nms_per_class_and_collect(std::vector<Cand> cands, real nms_iou, int64_t max_dets) {
    std::sort(cands.begin(), cands.end(), cand_before);
    std::vector<Cand> kept;
    for (const Cand& c : cands) {
        bool suppressed = false;
        for (const Cand& k : kept) {
            if (k.cls == c.cls && box_iou(k.box, c.box) > nms_iou) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            kept.push_back(c);
            if (static_cast<int64_t>(kept.size()) >= max_dets) break;
        }
    }
    Detections out;
    for (const Cand& c : kept) {
        out.boxes.push_back(c.box);
        out.labels.push_back(c.cls);
        out.scores.push_back(c.score);
    }
    out.finalize();
    return out;
}

void keep_topk(std::vector<Cand>& cands, int64_t topk) {
    std::sort(cands.begin(), cands.end(), cand_before);
    if (static_cast<int64_t>(cands.size()) > topk) cands.resize(static_cast<size_t>(topk));
}

}  // namespace

Detections infer_dense(const DenseHead& head, const DenseOut& out, real img_w, real img_h,
                       const InferenceConfig& icfg, const FeaturePyramid& pyr) {
    const int64_t a = head.anchors.slots();
    const int64_t k = head.num_classes;
    std::vector<Cand> all;
    for (const auto& [l, fm] : pyr.levels) {
        const Tensor& cls = out.cls.at(l).val();
        const Tensor& reg = out.reg.at(l).val();
        const int64_t h = fm.height(), w = fm.width();
        const std::vector<Box> anchors = make_anchors(h, w, fm.stride, head.anchors);
        std::vector<Cand> lvl;
        for (int64_t s = 0; s < a; ++s) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    for (int64_t c = 0; c < k; ++c) {
                        const real p = stable_sigmoid(cls.at(s * k + c, y, x));
                        if (p <= icfg.score_thresh) continue;
                        const Box& anchor = anchors[static_cast<size_t>((s * h + y) * w + x)];
                        Box b = bridge::decode_box(anchor, reg.at(s * 4 + 0, y, x),
                                                   reg.at(s * 4 + 1, y, x), reg.at(s * 4 + 2, y, x),
                                                   reg.at(s * 4 + 3, y, x))
                                    .clipped(img_w, img_h);
                        if (b.w() <= 0 || b.h() <= 0) continue;
                        lvl.push_back({p, l, y, x, static_cast<int>(s), static_cast<int>(c), b});
                    }
                }
            }
        }
        keep_topk(lvl, icfg.topk_per_level);
        all.insert(all.end(), lvl.begin(), lvl.end());
    }
    return nms_per_class_and_collect(std::move(all), icfg.nms_iou, icfg.max_dets);
}

Detections infer_point(const PointHead& head, const PointOut& out, real img_w, real img_h,
                       const InferenceConfig& icfg, const FeaturePyramid& pyr) {
    const int64_t k = head.num_classes;
    std::vector<Cand> all;
    for (const auto& [l, fm] : pyr.levels) {
        const Tensor& cls = out.cls.at(l).val();
        const Tensor& ctr = out.ctr.at(l).val();
        const Tensor& reg = out.reg.at(l).val();
        const int64_t h = fm.height(), w = fm.width();
        const real stride = static_cast<real>(fm.stride);
        std::vector<Cand> lvl;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const real pc = stable_sigmoid(ctr.at(0, y, x));
                const real px = (static_cast<real>(x) + real(0.5)) * stride;
                const real py = (static_cast<real>(y) + real(0.5)) * stride;
                for (int64_t c = 0; c < k; ++c) {
                    const real p = std::sqrt(stable_sigmoid(cls.at(c, y, x)) * pc);
                    if (p <= icfg.score_thresh) continue;
                    Box b{px - reg.at(0, y, x), py - reg.at(1, y, x), px + reg.at(2, y, x),
                          py + reg.at(3, y, x)};
                    b = b.clipped(img_w, img_h);
                    if (b.w() <= 0 || b.h() <= 0) continue;
                    lvl.push_back({p, l, y, x, 0, static_cast<int>(c), b});
                }
            }
        }
        keep_topk(lvl, icfg.topk_per_level);
        all.insert(all.end(), lvl.begin(), lvl.end());
    }
    return nms_per_class_and_collect(std::move(all), icfg.nms_iou, icfg.max_dets);
}

Detections infer_two_stage(const Rpn& rpn, const RcnnHead& rcnn, const FeaturePyramid& pyr,
                           real img_w, real img_h, const DetectorConfig& cfg,
                           const InferenceConfig& icfg) {
    RpnOut rpn_out = rpn.forward(pyr);
    std::map<int, bridge::LevelDense> levels;
    for (const auto& [l, fm] : pyr.levels) {
        levels[l] = bridge::LevelDense{
            rpn_out.obj.at(l), rpn_out.reg.at(l),
            make_anchors(fm.height(), fm.width(), fm.stride, rpn.anchors), rpn.anchors.slots()};
    }
    RoISet rois = bridge::propose_rois(levels, img_w, img_h, cfg.proposals);
    if (rois.size() == 0) return Detections{};

    Var pooled = bridge::roi_align_pyramid(pyr, rois, cfg.roi_align_size);
    RcnnOut rc = rcnn.forward(pooled);
    const Tensor& logits = rc.cls.val();
    const Tensor& reg = rc.reg.val();
    const int64_t k = rcnn.num_classes;

    std::vector<Cand> all;
    for (int64_t i = 0; i < rois.size(); ++i) {
        real mx = logits.at(i, 0);
        for (int64_t c = 1; c <= k; ++c) mx = std::max(mx, logits.at(i, c));
        real denom = 0;
        for (int64_t c = 0; c <= k; ++c) denom += std::exp(logits.at(i, c) - mx);
        const Box decoded = bridge::decode_box(rois.boxes[static_cast<size_t>(i)], reg.at(i, 0),
                                               reg.at(i, 1), reg.at(i, 2), reg.at(i, 3))
                                .clipped(img_w, img_h);
        if (decoded.w() <= 0 || decoded.h() <= 0) continue;
        for (int64_t c = 0; c < k; ++c) {
            const real p = std::exp(logits.at(i, c) - mx) / denom;
            if (p <= icfg.score_thresh) continue;
            Cand cand;
            cand.score = p;
            cand.level = rois.level[static_cast<size_t>(i)];
            cand.y = i;  // proposal index keeps ordering deterministic
            cand.cls = static_cast<int>(c);
            cand.box = decoded;
            all.push_back(cand);
        }
    }
    return nms_per_class_and_collect(std::move(all), icfg.nms_iou, icfg.max_dets);
}

}  // namespace headkd::toydet
