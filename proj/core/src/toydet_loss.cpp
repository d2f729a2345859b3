#include "headkd/toydet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headkd::toydet {

namespace {

Var maximum(Var a, Var b) { return neg(minimum(neg(a), neg(b))); }

// (P,1) column j of a (P,4) matrix
Var column(Var m, int64_t j) {
    Tensor sel({4, 1});
    sel[j] = 1;
    return matmul(m, Var::constant(std::move(sel)));
}

Var column_const(const std::vector<real>& v) {
    Tensor t({static_cast<int64_t>(v.size()), 1});
    for (size_t i = 0; i < v.size(); ++i) t[static_cast<int64_t>(i)] = v[i];
    return Var::constant(std::move(t));
}

}  // namespace

DenseAssignment assign_by_iou(const std::vector<Box>& anchors, const Targets& t, real fg_iou,
                              real bg_iou) {
    const size_t n = anchors.size();
    DenseAssignment a;
    a.label.assign(n, -1);
    a.matched_gt.assign(n, -1);
    if (t.size() == 0) return a;

    std::vector<real> best_iou(n, 0);
    std::vector<int64_t> best_gt(n, -1);
    std::vector<real> gt_best(static_cast<size_t>(t.size()), 0);
    for (size_t i = 0; i < n; ++i) {
        for (int64_t g = 0; g < t.size(); ++g) {
            const real iou = box_iou(anchors[i], t.boxes[static_cast<size_t>(g)]);
            if (iou > best_iou[i]) {
                best_iou[i] = iou;
                best_gt[i] = g;
            }
            gt_best[static_cast<size_t>(g)] = std::max(gt_best[static_cast<size_t>(g)], iou);
        }
    }
    for (size_t i = 0; i < n; ++i) {
        if (best_iou[i] >= fg_iou) {
            a.label[i] = t.labels[static_cast<size_t>(best_gt[i])];
            a.matched_gt[i] = best_gt[i];
        } else if (best_iou[i] >= bg_iou) {
            a.label[i] = -2;
        }
    }
    // every GT keeps its best anchors even below the foreground threshold
    for (int64_t g = 0; g < t.size(); ++g) {
        const real top = gt_best[static_cast<size_t>(g)];
        if (top <= 0) continue;
        for (size_t i = 0; i < n; ++i) {
            if (best_gt[i] == g && best_iou[i] == top) {
                a.label[i] = t.labels[static_cast<size_t>(g)];
                a.matched_gt[i] = g;
            }
        }
    }
    return a;
}

PointAssignment assign_points(const std::vector<std::pair<real, real>>& centers, const Targets& t,
                              real range_lo, real range_hi) {
    const size_t n = centers.size();
    PointAssignment a;
    a.matched_gt.assign(n, -1);
    a.centerness.assign(n, 0);
    for (size_t i = 0; i < n; ++i) {
        const auto [px, py] = centers[i];
        real best_area = 0;
        for (int64_t g = 0; g < t.size(); ++g) {
            const Box& b = t.boxes[static_cast<size_t>(g)];
            const real dl = px - b.x1, dt = py - b.y1, dr = b.x2 - px, db = b.y2 - py;
            if (dl <= 0 || dt <= 0 || dr <= 0 || db <= 0) continue;
            const real maxd = std::max(std::max(dl, dr), std::max(dt, db));
            if (maxd <= range_lo || maxd > range_hi) continue;
            if (a.matched_gt[i] < 0 || b.area() < best_area) {
                a.matched_gt[i] = g;
                best_area = b.area();
                const real cx = std::min(dl, dr) / std::max(dl, dr);
                const real cy = std::min(dt, db) / std::max(dt, db);
                a.centerness[i] = std::sqrt(cx * cy);
            }
        }
    }
    return a;
}

LossReport dense_gt_loss(const DenseHead& head, const DenseOut& out, const Targets& t,
                         const DetectorConfig& cfg, const FeaturePyramid& pyr) {
    const int64_t a = head.anchors.slots();
    const int64_t k = head.num_classes;
    std::vector<Var> cls_terms, reg_terms;
    int64_t num_fg = 0;

    for (const auto& [l, fm] : pyr.levels) {
        const int64_t h = fm.height(), w = fm.width();
        const std::vector<Box> anchors = make_anchors(h, w, fm.stride, head.anchors);
        const DenseAssignment assign = assign_by_iou(anchors, t, cfg.dense_fg_iou, cfg.dense_bg_iou);

        Tensor cls_target({a * k, h, w});
        Tensor cls_mask = Tensor::full({a * k, h, w}, 1);
        Tensor reg_target({a * 4, h, w});
        Tensor reg_mask({a * 4, h, w});
        for (int64_t s = 0; s < a; ++s) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    const size_t ai = static_cast<size_t>((s * h + y) * w + x);
                    const int label = assign.label[ai];
                    if (label == -2) {
                        for (int64_t c = 0; c < k; ++c) cls_mask.at(s * k + c, y, x) = 0;
                    } else if (label >= 0) {
                        ++num_fg;
                        cls_target.at(s * k + label, y, x) = 1;
                        real deltas[4];
                        bridge::encode_box(anchors[ai],
                                           t.boxes[static_cast<size_t>(assign.matched_gt[ai])],
                                           deltas);
                        for (int64_t d = 0; d < 4; ++d) {
                            reg_target.at(s * 4 + d, y, x) = deltas[d];
                            reg_mask.at(s * 4 + d, y, x) = 1;
                        }
                    }
                }
            }
        }
        cls_terms.push_back(sigmoid_focal_loss_sum(out.cls.at(l), cls_target, cls_mask,
                                                   cfg.focal_alpha, cfg.focal_gamma));
        reg_terms.push_back(sum_all(
            mul(abs(sub(out.reg.at(l), Var::constant(reg_target))), Var::constant(reg_mask))));
    }
    const real norm = real(1) / static_cast<real>(std::max<int64_t>(1, num_fg));
    LossReport report;
    report.add("gt_cls", scale(add_n(cls_terms), norm), 1);
    report.add("gt_reg", scale(add_n(reg_terms), norm), 1);
    return report;
}

LossReport point_gt_loss(const PointHead& head, const PointOut& out, const Targets& t,
                         const DetectorConfig& cfg, const FeaturePyramid& pyr) {
    const int64_t k = head.num_classes;
    std::vector<Var> cls_terms, ctr_terms, reg_terms;
    int64_t num_pos = 0;

    int level_idx = 0;
    for (const auto& [l, fm] : pyr.levels) {
        const int64_t h = fm.height(), w = fm.width();
        const real stride = static_cast<real>(fm.stride);
        const real lo = level_idx == 0 ? real(0) : cfg.point_range_breaks[level_idx - 1];
        const real hi = level_idx < static_cast<int>(cfg.point_range_breaks.size())
                            ? cfg.point_range_breaks[level_idx]
                            : real(1e8);
        ++level_idx;

        std::vector<std::pair<real, real>> centers;
        centers.reserve(static_cast<size_t>(h * w));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                centers.emplace_back((static_cast<real>(x) + real(0.5)) * stride,
                                     (static_cast<real>(y) + real(0.5)) * stride);
            }
        }
        const PointAssignment assign = assign_points(centers, t, lo, hi);

        Tensor cls_target({k, h, w});
        Tensor cls_mask = Tensor::full({k, h, w}, 1);
        Tensor ctr_target({1, h, w});
        Tensor ctr_mask({1, h, w});
        std::vector<std::pair<int64_t, int64_t>> pos_yx;
        std::vector<real> px, py, gx1, gy1, gx2, gy2, garea;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const size_t ci = static_cast<size_t>(y * w + x);
                const int64_t g = assign.matched_gt[ci];
                if (g < 0) continue;
                ++num_pos;
                cls_target.at(t.labels[static_cast<size_t>(g)], y, x) = 1;
                ctr_target.at(0, y, x) = assign.centerness[ci];
                ctr_mask.at(0, y, x) = 1;
                pos_yx.emplace_back(y, x);
                px.push_back(centers[ci].first);
                py.push_back(centers[ci].second);
                const Box& b = t.boxes[static_cast<size_t>(g)];
                gx1.push_back(b.x1);
                gy1.push_back(b.y1);
                gx2.push_back(b.x2);
                gy2.push_back(b.y2);
                garea.push_back(b.area());
            }
        }
        cls_terms.push_back(sigmoid_focal_loss_sum(out.cls.at(l), cls_target, cls_mask,
                                                   cfg.focal_alpha, cfg.focal_gamma));
        ctr_terms.push_back(bce_with_logits_sum(out.ctr.at(l), ctr_target, ctr_mask));

        if (!pos_yx.empty()) {
            Var dists = gather_pixels(out.reg.at(l), pos_yx);  // (P,4): l,t,r,b
            Var dl = column(dists, 0), dt = column(dists, 1);
            Var dr = column(dists, 2), db = column(dists, 3);
            Var pxc = column_const(px), pyc = column_const(py);
            Var x1p = sub(pxc, dl), y1p = sub(pyc, dt);
            Var x2p = add(pxc, dr), y2p = add(pyc, db);
            Var iw = relu(sub(minimum(x2p, column_const(gx2)), maximum(x1p, column_const(gx1))));
            Var ih = relu(sub(minimum(y2p, column_const(gy2)), maximum(y1p, column_const(gy1))));
            Var inter = mul(iw, ih);
            Var area_p = mul(add(dl, dr), add(dt, db));
            Var uni = sub(add(area_p, column_const(garea)), inter);
            Var iou = div(inter, uni);
            reg_terms.push_back(sub(Var::constant(Tensor::scalar(static_cast<real>(px.size()))),
                                    sum_all(iou)));
        }
    }
    const real norm = real(1) / static_cast<real>(std::max<int64_t>(1, num_pos));
    LossReport report;
    report.add("gt_cls", scale(add_n(cls_terms), norm), 1);
    report.add("gt_ctr", scale(add_n(ctr_terms), norm), 1);
    Var reg = reg_terms.empty() ? Var::constant(Tensor::scalar(0)) : add_n(reg_terms);
    report.add("gt_reg", scale(reg, norm), 1);
    return report;
}

LossReport rpn_gt_loss(const RpnOut& out, const Targets& t, const DetectorConfig& cfg,
                       const FeaturePyramid& pyr) {
    std::vector<Var> obj_terms, reg_terms;
    int64_t num_fg = 0;
    const int64_t a = cfg.anchors.slots();
    for (const auto& [l, fm] : pyr.levels) {
        const int64_t h = fm.height(), w = fm.width();
        const std::vector<Box> anchors = make_anchors(h, w, fm.stride, cfg.anchors);
        const DenseAssignment assign = assign_by_iou(anchors, t, cfg.rpn_fg_iou, cfg.rpn_bg_iou);

        Tensor obj_target({a, h, w});
        Tensor obj_mask = Tensor::full({a, h, w}, 1);
        Tensor reg_target({a * 4, h, w});
        Tensor reg_mask({a * 4, h, w});
        for (int64_t s = 0; s < a; ++s) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    const size_t ai = static_cast<size_t>((s * h + y) * w + x);
                    const int label = assign.label[ai];
                    if (label == -2) {
                        obj_mask.at(s, y, x) = 0;
                    } else if (label >= 0) {
                        ++num_fg;
                        obj_target.at(s, y, x) = 1;
                        real deltas[4];
                        bridge::encode_box(anchors[ai],
                                           t.boxes[static_cast<size_t>(assign.matched_gt[ai])],
                                           deltas);
                        for (int64_t d = 0; d < 4; ++d) {
                            reg_target.at(s * 4 + d, y, x) = deltas[d];
                            reg_mask.at(s * 4 + d, y, x) = 1;
                        }
                    }
                }
            }
        }
        obj_terms.push_back(bce_with_logits_sum(out.obj.at(l), obj_target, obj_mask));
        reg_terms.push_back(sum_all(
            mul(abs(sub(out.reg.at(l), Var::constant(reg_target))), Var::constant(reg_mask))));
    }
    const real norm = real(1) / static_cast<real>(std::max<int64_t>(1, num_fg));
    LossReport report;
    report.add("gt_rpn_obj", scale(add_n(obj_terms), norm), 1);
    report.add("gt_rpn_reg", scale(add_n(reg_terms), norm), 1);
    return report;
}

LossReport rcnn_gt_loss(const RcnnOut& out, const RoISet& rois, const Targets& t,
                        const DetectorConfig& cfg, const std::string& prefix) {
    const int64_t n = rois.size();
    const int64_t k = cfg.num_classes;
    LossReport report;
    if (n == 0) {
        report.add(prefix + "cls", Var::constant(Tensor::scalar(0)), 1);
        report.add(prefix + "reg", Var::constant(Tensor::scalar(0)), 1);
        return report;
    }
    std::vector<int64_t> labels(static_cast<size_t>(n), k);  // background = K
    Tensor reg_target({n, 4});
    Tensor reg_mask({n, 4});
    int64_t num_fg = 0;
    for (int64_t i = 0; i < n; ++i) {
        const Box& rb = rois.boxes[static_cast<size_t>(i)];
        real best = 0;
        int64_t best_g = -1;
        for (int64_t g = 0; g < t.size(); ++g) {
            const real iou = box_iou(rb, t.boxes[static_cast<size_t>(g)]);
            if (iou > best) {
                best = iou;
                best_g = g;
            }
        }
        if (best_g >= 0 && best >= cfg.rcnn_fg_iou) {
            ++num_fg;
            labels[static_cast<size_t>(i)] = t.labels[static_cast<size_t>(best_g)];
            real deltas[4];
            bridge::encode_box(rb, t.boxes[static_cast<size_t>(best_g)], deltas);
            for (int64_t d = 0; d < 4; ++d) {
                reg_target.at(i, d) = deltas[d];
                reg_mask.at(i, d) = 1;
            }
        }
    }
    Var cls = scale(cross_entropy_sum(out.cls, labels), real(1) / static_cast<real>(n));
    Var reg = scale(sum_all(mul(abs(sub(out.reg, Var::constant(reg_target))),
                                Var::constant(reg_mask))),
                    real(1) / static_cast<real>(std::max<int64_t>(1, num_fg)));
    report.add(prefix + "cls", cls, 1);
    report.add(prefix + "reg", reg, 1);
    return report;
}

}  // namespace headkd::toydet
