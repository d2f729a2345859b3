#pragma once

#include "headkd/core.hpp"
#include "headkd/nn.hpp"
#include "headkd/toydet.hpp"

#include <map>
#include <memory>
#include <string>

namespace headkd::assistant {

struct AssistantSpec {
    toydet::DetectorConfig head;
    std::string init = "random";  // random | from_teacher
    std::string name;
};

// An extra detection head attached to the student backbone at training time.
// Two-stage assistants are the R-CNN head alone; proposals always arrive
// from the shared student-derived RoI set.
class Assistant {
  public:
    Assistant() = default;
    Assistant(const AssistantSpec& spec, int64_t student_channels, uint64_t seed);

    const AssistantSpec& spec() const { return spec_; }
    const std::string& name() const { return spec_.name; }
    const std::string& family() const { return spec_.head.family; }
    bool two_stage() const { return spec_.head.family == "two_stage"; }

    // Copies head weights from a pretrained teacher of identical head spec.
    void init_from_teacher(const toydet::Detector& teacher);

    struct Forward {
        HeadTaps taps;
        LossReport gt;                    // unprefixed, unweighted
        std::map<int, Var> cls_features;  // one-stage heads: per-level CKD features
        Var roi_features;                 // two-stage heads: first linear tap (N, C')
    };
    Forward forward_with_gt(const FeaturePyramid& student_pyr, const RoISet& shared_rois,
                            const toydet::Targets& targets) const;

    void collect(const std::string& prefix, nn::ParamMap& out) const;
    nn::ParamMap params() const;

  private:
    AssistantSpec spec_;
    std::unique_ptr<toydet::DenseHead> dense_;
    std::unique_ptr<toydet::PointHead> point_;
    std::unique_ptr<toydet::RcnnHead> rcnn_;
};

}  // namespace headkd::assistant
