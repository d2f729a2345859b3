#pragma once

#include "headkd/core.hpp"

#include <map>
#include <vector>

namespace headkd::bridge {

struct ProposalConfig {
    int64_t pre_nms_topk = 200;  // per level
    real nms_iou = 0.7;
    int64_t post_nms_n = 256;
    real min_box_size = 1e-3;

    void validate(int64_t num_levels) const;
};

// Per-level dense outputs feeding proposal generation. Channel layouts:
// objectness (A, H, W), deltas (A*4, H, W); anchors flattened as
// anchors[(slot*H + y)*W + x].
struct LevelDense {
    Var objectness;
    Var deltas;
    std::vector<Box> anchors;
    int64_t num_slots = 0;
};

// Class-agnostic objectness per anchor: max over the K class logits.
// cls (A*K, H, W) -> (A, H, W). Values only, no gradient path.
Tensor objectness_from_dense(const Tensor& cls_logits, int64_t num_classes);

// Standard delta decode: (dx, dy) shift the center by anchor extents,
// (dw, dh) scale extents through exp, clamped to avoid overflow.
Box decode_box(const Box& anchor, real dx, real dy, real dw, real dh);
// Inverse of decode_box.
void encode_box(const Box& anchor, const Box& target, real out[4]);

// Greedy NMS over (box, score) pairs already sorted by preference order.
// Returns indices of kept entries in that order.
std::vector<int64_t> greedy_nms(const std::vector<Box>& boxes, real iou_thresh);

RoISet propose_rois(const std::map<int, LevelDense>& levels, real img_w, real img_h,
                    const ProposalConfig& cfg);

// k = clamp(floor(k0 + log2(sqrt(area)/s0)), lo, hi), k0=4, s0=224.
int assign_fpn_level(const Box& box, int min_level, int max_level);

// Bilinear RoI pooling with the half-pixel (aligned) convention and a fixed
// 2x2 sampling grid per output cell. Differentiable w.r.t. fmap only.
Var roi_align(const FeatureMap& fmap, const std::vector<Box>& boxes, int64_t out_size);

// RoIAlign across a pyramid: each box pools from assign_fpn_level's pick,
// rows keep RoI order. Output (N, C*out*out).
Var roi_align_pyramid(const FeaturePyramid& pyr, const RoISet& rois, int64_t out_size);

// Row i = cls tap at provenance (level_i, y_i, x_i). Output (N, C), with
// gradients flowing into the taps. The anchor slot only identifies the
// proposal; the pixel feature is shared across slots.
Var trace_rois_to_anchor_features(const RoISet& rois, const std::map<int, Var>& cls_taps);

}  // namespace headkd::bridge
