#pragma once

#include "headkd/core.hpp"
#include "headkd/nn.hpp"

#include <map>
#include <string>
#include <vector>

namespace headkd::distill {

struct DistillWeights {
    real lambda_A = 5;
    real lambda_C_same_stage = 1;  // both heads one-stage
    real lambda_C_cross = 2;       // any two-stage head in the pair
    // scales every assistant ground-truth term; at 0 the whole distillation
    // stack drops out and training matches the plain baseline
    real lambda_assistant_gt = 1;

    void validate() const;
};

// Dimension-matching layer in front of the mimicking loss: a linear map for
// (N, D) features, a 1x1 convolution for (C, H, W) features.
class Adapter {
  public:
    Adapter() = default;
    static Adapter linear(int64_t in, int64_t out, Rng& rng);
    static Adapter conv1x1(int64_t in, int64_t out, Rng& rng);
    // Kind and dimensions inferred from the pair the adapter will bridge.
    static Adapter for_pair(const Var& teacher_feat, const Var& student_feat, Rng& rng);

    bool defined() const { return !kind_.empty(); }
    const std::string& kind() const { return kind_; }
    Var forward(Var x) const;
    void collect(const std::string& prefix, nn::ParamMap& out) const;

  private:
    std::string kind_;
    nn::Linear lin_;
    nn::Conv2d conv_;
};

// Mean squared difference; the teacher operand is cut out of the graph, so
// no mimicking loss ever reaches teacher parameters.
Var mse(Var teacher, Var student);

// L^A: assistant ground-truth terms plus one mimic term per tap pair at
// weight lambda_A / L. Tap names, counts, and ranks must match.
LossReport akd_loss(const HeadTaps& teacher_taps, const HeadTaps& assistant_taps,
                    const std::map<std::string, Adapter>& adapters, const LossReport& gt,
                    const DistillWeights& w, const std::string& mimic_prefix = "mimic_");

// Cross-stage CKD: RoI features of the teacher-side head versus traced
// student anchor features through a linear adapter.
LossReport ckd_cross_stage(Var f_t1, Var f_s_rois, const Adapter& adapter,
                           const DistillWeights& w, const std::string& term_name = "C_cross");

// Same-stage CKD: per-level classification features through a 1x1 conv,
// averaged over levels.
LossReport ckd_same_stage(const std::map<int, Var>& f_t, const std::map<int, Var>& f_s,
                          const Adapter& adapter, const DistillWeights& w, bool both_one_stage,
                          const std::string& term_name = "C_same");

LossReport compose_head(const LossReport& student_gt, const LossReport& akd,
                        const LossReport& ckd);
LossReport compose_tf_head(const LossReport& student_gt,
                           const std::vector<std::pair<LossReport, LossReport>>& per_assistant);

}  // namespace headkd::distill
