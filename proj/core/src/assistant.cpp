#include "headkd/assistant.hpp"

#include <stdexcept>

namespace headkd::assistant {

Assistant::Assistant(const AssistantSpec& spec, int64_t student_channels, uint64_t seed)
    : spec_(spec) {
    if (spec_.name.empty()) throw std::invalid_argument("Assistant: name required");
    if (spec_.init != "random" && spec_.init != "from_teacher") {
        throw std::invalid_argument("Assistant: unknown init " + spec_.init);
    }
    spec_.head.validate();
    if (spec_.head.channels != student_channels) {
        throw std::invalid_argument("Assistant " + spec_.name + ": head expects " +
                                    std::to_string(spec_.head.channels) +
                                    " channels, student pyramid has " +
                                    std::to_string(student_channels));
    }
    Rng rng = Rng::stream(seed, "assistant_init:" + spec_.name);
    if (spec_.head.family == "dense") {
        dense_ = std::make_unique<toydet::DenseHead>(spec_.head, rng);
    } else if (spec_.head.family == "point") {
        point_ = std::make_unique<toydet::PointHead>(spec_.head, rng);
    } else {
        rcnn_ = std::make_unique<toydet::RcnnHead>(spec_.head, rng);
    }
}

void Assistant::init_from_teacher(const toydet::Detector& teacher) {
    if (!toydet::heads_homogeneous(teacher.config(), spec_.head)) {
        throw std::invalid_argument("init_from_teacher: teacher head spec differs from assistant " +
                                    spec_.name);
    }
    nn::ParamMap theirs;
    if (rcnn_) {
        teacher.rcnn()->collect("rcnn", theirs);
    } else if (dense_) {
        teacher.dense()->collect("head", theirs);
    } else {
        teacher.point()->collect("head", theirs);
    }
    nn::ParamMap mine;
    collect("", mine);
    std::string bad;
    for (auto& [name, p] : mine) {
        auto it = theirs.find(name);
        if (it == theirs.end() || !it->second.val().same_shape(p.val())) {
            bad += bad.empty() ? name : ", " + name;
            continue;
        }
        p.val_mut() = it->second.val();
    }
    if (!bad.empty()) {
        throw std::invalid_argument("init_from_teacher: mismatched parameters: " + bad);
    }
}

Assistant::Forward Assistant::forward_with_gt(const FeaturePyramid& student_pyr,
                                              const RoISet& shared_rois,
                                              const toydet::Targets& targets) const {
    Forward fwd;
    if (dense_) {
        toydet::DenseOut out = dense_->forward(student_pyr);
        fwd.gt = toydet::dense_gt_loss(*dense_, out, targets, spec_.head, student_pyr);
        fwd.taps = out.taps;
        for (const auto& [l, fm] : student_pyr.levels) {
            fwd.cls_features[l] = out.taps.at("cls_l" + std::to_string(l));
        }
    } else if (point_) {
        toydet::PointOut out = point_->forward(student_pyr);
        fwd.gt = toydet::point_gt_loss(*point_, out, targets, spec_.head, student_pyr);
        fwd.taps = out.taps;
        for (const auto& [l, fm] : student_pyr.levels) {
            fwd.cls_features[l] = out.taps.at("cls_l" + std::to_string(l));
        }
    } else {
        Var pooled = bridge::roi_align_pyramid(student_pyr, shared_rois, spec_.head.roi_align_size);
        toydet::RcnnOut out = rcnn_->forward(pooled);
        fwd.gt = toydet::rcnn_gt_loss(out, shared_rois, targets, spec_.head);
        fwd.taps = out.taps;
        fwd.roi_features = out.taps.at("fc1");
    }
    return fwd;
}

void Assistant::collect(const std::string& prefix, nn::ParamMap& out) const {
    const std::string base = prefix.empty() ? (rcnn_ ? "rcnn" : "head")
                                            : prefix + (rcnn_ ? ".rcnn" : ".head");
    if (dense_) dense_->collect(base, out);
    if (point_) point_->collect(base, out);
    if (rcnn_) rcnn_->collect(base, out);
}

nn::ParamMap Assistant::params() const {
    nn::ParamMap out;
    collect("", out);
    return out;
}

}  // namespace headkd::assistant
