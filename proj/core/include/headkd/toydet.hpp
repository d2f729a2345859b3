#pragma once

#include "headkd/bridge.hpp"
#include "headkd/core.hpp"
#include "headkd/nn.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace headkd::toydet {

struct AnchorConfig {
    real base = 4.0;  // anchor side = base * scale * stride
    std::vector<real> scales = {1.0, 1.26, 1.587};

    int64_t slots() const { return static_cast<int64_t>(scales.size()); }
};

struct Targets {
    std::vector<Box> boxes;
    std::vector<int> labels;

    int64_t size() const { return static_cast<int64_t>(boxes.size()); }
};

struct DetectorConfig {
    std::string family = "dense";  // dense | point | two_stage
    int64_t channels = 64;         // pyramid and tower width C
    int64_t rcnn_width = 256;      // R-CNN linear width C'
    int num_classes = 3;
    int min_level = 3;
    int max_level = 5;
    int num_convs = 2;  // tower depth per branch
    AnchorConfig anchors;
    int64_t roi_align_size = 7;
    bool backbone_bias = true;
    bool pad_indivisible = false;

    real focal_alpha = 0.25;
    real focal_gamma = 2.0;
    real dense_fg_iou = 0.5;
    real dense_bg_iou = 0.4;
    real rpn_fg_iou = 0.7;
    real rpn_bg_iou = 0.3;
    real rcnn_fg_iou = 0.5;
    std::vector<real> point_range_breaks = {32, 64};  // object-size bands per level

    bridge::ProposalConfig proposals;

    void validate() const;
    int64_t max_stride() const { return int64_t(1) << max_level; }
};

// Square anchors centered on feature cells, flattened slot-major:
// anchors[(slot*H + y)*W + x].
std::vector<Box> make_anchors(int64_t h, int64_t w, int64_t stride, const AnchorConfig& cfg);

struct BackboneFPN {
    int64_t channels = 0;
    int min_level = 3, max_level = 5;
    bool pad_indivisible = false;

    std::vector<nn::Conv2d> trunk;                // strided stages, stride 2 each
    std::vector<int> trunk_level;                 // pyramid level fed by each stage, or -1
    std::map<int, nn::Conv2d> lateral, smooth;

    BackboneFPN() = default;
    BackboneFPN(const DetectorConfig& cfg, Rng& rng);

    FeaturePyramid forward(Var image) const;  // image (3,H,W)
    void collect(const std::string& prefix, nn::ParamMap& out) const;
};

struct DenseOut {
    std::map<int, Var> cls;  // (A*K, H, W) logits
    std::map<int, Var> reg;  // (A*4, H, W) deltas
    HeadTaps taps;           // cls_l<k>, reg_l<k>: last tower feature (C,H,W)
};

class DenseHead {
  public:
    DenseHead() = default;
    DenseHead(const DetectorConfig& cfg, Rng& rng);

    DenseOut forward(const FeaturePyramid& pyr) const;
    void collect(const std::string& prefix, nn::ParamMap& out) const;

    int64_t channels = 0;
    int num_classes = 0;
    AnchorConfig anchors;
    std::vector<nn::Conv2d> cls_tower, reg_tower;
    nn::Conv2d cls_pred, reg_pred;
};

struct PointOut {
    std::map<int, Var> cls;   // (K, H, W) logits
    std::map<int, Var> ctr;   // (1, H, W) logits
    std::map<int, Var> reg;   // (4, H, W) distances, already exp-scaled by stride
    HeadTaps taps;            // cls_l<k>: last classification tower feature
};

class PointHead {
  public:
    PointHead() = default;
    PointHead(const DetectorConfig& cfg, Rng& rng);

    PointOut forward(const FeaturePyramid& pyr) const;
    void collect(const std::string& prefix, nn::ParamMap& out) const;

    int64_t channels = 0;
    int num_classes = 0;
    std::vector<nn::Conv2d> cls_tower, reg_tower;
    nn::Conv2d cls_pred, ctr_pred, reg_pred;
};

struct RpnOut {
    std::map<int, Var> obj;  // (A, H, W) logits
    std::map<int, Var> reg;  // (A*4, H, W)
};

class Rpn {
  public:
    Rpn() = default;
    Rpn(const DetectorConfig& cfg, Rng& rng);

    RpnOut forward(const FeaturePyramid& pyr) const;
    void collect(const std::string& prefix, nn::ParamMap& out) const;

    AnchorConfig anchors;
    nn::Conv2d conv, obj_pred, reg_pred;
};

struct RcnnOut {
    Var cls;       // (N, K+1), background = index K
    Var reg;       // (N, 4), class-agnostic deltas
    HeadTaps taps;  // fc1, fc2: (N, C') after activation
};

class RcnnHead {
  public:
    RcnnHead() = default;
    RcnnHead(const DetectorConfig& cfg, Rng& rng);

    RcnnOut forward(Var roi_feats) const;  // (N, C*s*s)
    void collect(const std::string& prefix, nn::ParamMap& out) const;

    int64_t in_dim = 0;
    int64_t width = 0;
    int num_classes = 0;
    nn::Linear fc1, fc2, cls_pred, reg_pred;
};

// ---- ground-truth losses ----

// Per-anchor assignment: -2 ignore, -1 background, >= 0 matched class.
struct DenseAssignment {
    std::vector<int> label;
    std::vector<int64_t> matched_gt;  // valid where label >= 0
};
DenseAssignment assign_by_iou(const std::vector<Box>& anchors, const Targets& t, real fg_iou,
                              real bg_iou);

// Per-location assignment for the point head: -1 background, else GT index.
struct PointAssignment {
    std::vector<int64_t> matched_gt;
    std::vector<real> centerness;  // valid where matched
};
PointAssignment assign_points(const std::vector<std::pair<real, real>>& centers, const Targets& t,
                              real range_lo, real range_hi);

LossReport dense_gt_loss(const DenseHead& head, const DenseOut& out, const Targets& t,
                         const DetectorConfig& cfg, const FeaturePyramid& pyr);
LossReport point_gt_loss(const PointHead& head, const PointOut& out, const Targets& t,
                         const DetectorConfig& cfg, const FeaturePyramid& pyr);
// R-CNN loss over a fixed RoI set (no sampling); used by both the two-stage
// detector and two-stage assistants fed with shared student RoIs.
LossReport rcnn_gt_loss(const RcnnOut& out, const RoISet& rois, const Targets& t,
                        const DetectorConfig& cfg, const std::string& prefix = "gt_rcnn_");
LossReport rpn_gt_loss(const RpnOut& out, const Targets& t, const DetectorConfig& cfg,
                       const FeaturePyramid& pyr);

// ---- inference ----

struct InferenceConfig {
    real score_thresh = 0.05;
    int64_t topk_per_level = 200;
    real nms_iou = 0.5;
    int64_t max_dets = 100;
};

// ---- full detector ----

class Detector {
  public:
    Detector() = default;
    Detector(const DetectorConfig& cfg, uint64_t seed);

    const DetectorConfig& config() const { return cfg_; }
    const std::string& family() const { return cfg_.family; }

    FeaturePyramid backbone_forward(Var image) const { return backbone_.forward(image); }

    // lossy accessors; null when the family does not carry that head
    DenseHead* dense() { return dense_ ? dense_.get() : nullptr; }
    PointHead* point() { return point_ ? point_.get() : nullptr; }
    Rpn* rpn() { return rpn_ ? rpn_.get() : nullptr; }
    RcnnHead* rcnn() { return rcnn_ ? rcnn_.get() : nullptr; }
    const DenseHead* dense() const { return dense_.get(); }
    const PointHead* point() const { return point_.get(); }
    const Rpn* rpn() const { return rpn_.get(); }
    const RcnnHead* rcnn() const { return rcnn_.get(); }
    BackboneFPN& backbone() { return backbone_; }
    const BackboneFPN& backbone() const { return backbone_; }

    // Full per-image training loss on ground truth.
    LossReport gt_loss(Var image, const Targets& t) const;

    Detections infer(Var image, const InferenceConfig& icfg) const;

    nn::ParamMap params() const;

  private:
    DetectorConfig cfg_;
    BackboneFPN backbone_;
    std::unique_ptr<DenseHead> dense_;
    std::unique_ptr<PointHead> point_;
    std::unique_ptr<Rpn> rpn_;
    std::unique_ptr<RcnnHead> rcnn_;
};

// Two heads are interchangeable for mimicking iff family and the
// hyperparameters shaping their taps agree.
bool heads_homogeneous(const DetectorConfig& a, const DetectorConfig& b);

Detections infer_dense(const DenseHead& head, const DenseOut& out, real img_w, real img_h,
                       const InferenceConfig& icfg, const FeaturePyramid& pyr);
Detections infer_point(const PointHead& head, const PointOut& out, real img_w, real img_h,
                       const InferenceConfig& icfg, const FeaturePyramid& pyr);
Detections infer_two_stage(const Rpn& rpn, const RcnnHead& rcnn, const FeaturePyramid& pyr,
                           real img_w, real img_h, const DetectorConfig& cfg,
                           const InferenceConfig& icfg);

}  // namespace headkd::toydet
