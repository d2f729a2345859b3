#include "headkd/distill.hpp"

#include <stdexcept>

namespace headkd::distill {

void DistillWeights::validate() const {
    if (lambda_A < 0 || lambda_C_same_stage < 0 || lambda_C_cross < 0 || lambda_assistant_gt < 0) {
        throw std::invalid_argument("DistillWeights: weights must be nonnegative");
    }
}

Adapter Adapter::linear(int64_t in, int64_t out, Rng& rng) {
    Adapter a;
    a.kind_ = "linear";
    a.lin_ = nn::Linear(in, out, rng);
    return a;
}

Adapter Adapter::conv1x1(int64_t in, int64_t out, Rng& rng) {
    Adapter a;
    a.kind_ = "conv1x1";
    a.conv_ = nn::Conv2d(in, out, 1, 1, 0, rng);
    return a;
}

Adapter Adapter::for_pair(const Var& teacher_feat, const Var& student_feat, Rng& rng) {
    if (teacher_feat.rank() != student_feat.rank()) {
        throw std::invalid_argument("Adapter: rank mismatch between paired features");
    }
    if (teacher_feat.rank() == 2) {
        return linear(student_feat.size(1), teacher_feat.size(1), rng);
    }
    if (teacher_feat.rank() == 3) {
        return conv1x1(student_feat.size(0), teacher_feat.size(0), rng);
    }
    throw std::invalid_argument("Adapter: features must be rank 2 or 3");
}

Var Adapter::forward(Var x) const {
    if (kind_ == "linear") return lin_.forward(x);
    if (kind_ == "conv1x1") return conv_.forward(x);
    throw std::logic_error("Adapter: used before construction");
}

void Adapter::collect(const std::string& prefix, nn::ParamMap& out) const {
    if (kind_ == "linear") lin_.collect(prefix, out);
    if (kind_ == "conv1x1") conv_.collect(prefix, out);
}

Var mse(Var teacher, Var student) {
    if (!teacher.val().same_shape(student.val())) {
        throw std::invalid_argument("mse: shape mismatch " + shape_str(teacher.shape()) + " vs " +
                                    shape_str(student.shape()));
    }
    if (teacher.val().numel() == 0) return Var::constant(Tensor::scalar(0));
    Var d = sub(teacher.detached(), student);
    return mean_all(mul(d, d));
}

LossReport akd_loss(const HeadTaps& teacher_taps, const HeadTaps& assistant_taps,
                    const std::map<std::string, Adapter>& adapters, const LossReport& gt,
                    const DistillWeights& w, const std::string& mimic_prefix) {
    if (teacher_taps.names() != assistant_taps.names()) {
        throw std::invalid_argument("akd_loss: tap sets differ; heads are not homogeneous");
    }
    const int64_t l = teacher_taps.count();
    if (l == 0) throw std::invalid_argument("akd_loss: no taps");
    if (static_cast<int64_t>(adapters.size()) != l) {
        throw std::invalid_argument("akd_loss: need one adapter per tap");
    }
    LossReport report = gt;
    const real per_tap = w.lambda_A / static_cast<real>(l);
    for (const auto& [name, t_tap] : teacher_taps.named) {
        const Var& a_tap = assistant_taps.at(name);
        if (t_tap.rank() != a_tap.rank()) {
            throw std::invalid_argument("akd_loss: tap " + name + " rank mismatch");
        }
        report.add(mimic_prefix + name, mse(t_tap, adapters.at(name).forward(a_tap)), per_tap);
    }
    return report;
}

LossReport ckd_cross_stage(Var f_t1, Var f_s_rois, const Adapter& adapter,
                           const DistillWeights& w, const std::string& term_name) {
    if (f_t1.rank() != 2 || f_s_rois.rank() != 2 || f_t1.size(0) != f_s_rois.size(0)) {
        throw std::invalid_argument("ckd_cross_stage: expected matching (N,*) features");
    }
    LossReport report;
    if (f_t1.size(0) == 0) {
        report.add(term_name, Var::constant(Tensor::scalar(0)), w.lambda_C_cross);
        return report;
    }
    report.add(term_name, mse(f_t1, adapter.forward(f_s_rois)), w.lambda_C_cross);
    return report;
}

LossReport ckd_same_stage(const std::map<int, Var>& f_t, const std::map<int, Var>& f_s,
                          const Adapter& adapter, const DistillWeights& w, bool both_one_stage,
                          const std::string& term_name) {
    if (f_t.empty() || f_t.size() != f_s.size()) {
        throw std::invalid_argument("ckd_same_stage: level sets differ");
    }
    std::vector<Var> per_level;
    for (const auto& [lvl, t_feat] : f_t) {
        auto it = f_s.find(lvl);
        if (it == f_s.end()) {
            throw std::invalid_argument("ckd_same_stage: student lacks level " +
                                        std::to_string(lvl));
        }
        per_level.push_back(mse(t_feat, adapter.forward(it->second)));
    }
    Var mean = scale(add_n(per_level), real(1) / static_cast<real>(per_level.size()));
    LossReport report;
    report.add(term_name, mean, both_one_stage ? w.lambda_C_same_stage : w.lambda_C_cross);
    return report;
}

LossReport compose_head(const LossReport& student_gt, const LossReport& akd,
                        const LossReport& ckd) {
    LossReport out = student_gt;
    out.merge(akd);
    out.merge(ckd);
    return out;
}

LossReport compose_tf_head(const LossReport& student_gt,
                           const std::vector<std::pair<LossReport, LossReport>>& per_assistant) {
    LossReport out = student_gt;
    for (const auto& [gt_report, ckd_report] : per_assistant) {
        out.merge(gt_report);
        out.merge(ckd_report);
    }
    return out;
}

}  // namespace headkd::distill
