#pragma once

#include "headkd/autograd.hpp"
#include "headkd/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace headkd {

struct FeatureMap {
    Var data;         // (C, H, W)
    int64_t stride = 1;

    int64_t channels() const { return data.size(0); }
    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }
};

// Level index -> feature map; strides double per level, channels shared.
struct FeaturePyramid {
    std::map<int, FeatureMap> levels;

    void validate() const;
    int min_level() const { return levels.begin()->first; }
    int max_level() const { return levels.rbegin()->first; }
    int64_t channels() const { return levels.begin()->second.channels(); }
};

struct Box {
    real x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    real w() const { return x2 - x1; }
    real h() const { return y2 - y1; }
    real area() const { return w() * h(); }
    real cx() const { return (x1 + x2) / 2; }
    real cy() const { return (y1 + y2) / 2; }
    bool valid() const;
    Box clipped(real img_w, real img_h) const;
};

real box_iou(const Box& a, const Box& b);

// Which head output produced a proposal: level, pixel, anchor slot.
struct Provenance {
    int level = 0;
    int64_t y = 0;
    int64_t x = 0;
    int slot = 0;
};

struct RoISet {
    std::vector<Box> boxes;
    std::vector<real> scores;
    std::vector<int> level;
    std::optional<std::vector<Provenance>> source;

    int64_t size() const { return static_cast<int64_t>(boxes.size()); }
    void validate() const;
};

// Named intermediate features exposed for distillation. Rank-2 taps are
// (N, D) RoI features, rank-3 taps are (C, H, W) dense features.
struct HeadTaps {
    std::map<std::string, Var> named;

    int64_t count() const { return static_cast<int64_t>(named.size()); }
    const Var& at(const std::string& name) const;
    std::vector<std::string> names() const;
};

struct LossTerm {
    Var value;
    real weight = 1;
    bool enabled = true;
};

// Ordered collection of named loss terms. Weights stay explicit so that
// toggling a term is a mask flip rather than a recomputation.
class LossReport {
  public:
    void add(std::string name, Var value, real weight, bool enabled = true);
    void merge(const LossReport& other);

    bool has(const std::string& name) const;
    const LossTerm& term(const std::string& name) const;
    const std::vector<std::pair<std::string, LossTerm>>& terms() const { return terms_; }
    bool empty() const { return terms_.empty(); }

    void set_enabled_prefix(const std::string& prefix, bool enabled);

    // Copy with every term renamed to prefix+name.
    LossReport with_prefix(const std::string& prefix) const;
    // Copy with every term weight multiplied by factor.
    LossReport reweighted(real factor) const;

    // Weighted sum over enabled terms, as a plain number.
    real total() const;
    // Same sum as a graph node, for backprop. Constant zero if nothing is enabled.
    Var total_var() const;

  private:
    std::vector<std::pair<std::string, LossTerm>> terms_;
};

real loss_report_total(const LossReport& report);

// One JSON object per line: {"step":i,"terms":{...},"total":t} plus any
// extra numeric fields (epoch, lr) supplied by the caller.
std::string loss_report_json_line(const LossReport& report, int64_t step,
                                  const std::vector<std::pair<std::string, real>>& extra = {});

struct Detections {
    std::vector<Box> boxes;
    std::vector<int> labels;
    std::vector<real> scores;

    int64_t size() const { return static_cast<int64_t>(boxes.size()); }
    void validate() const;
    // Sort by descending score; ties by label then box coords for stability.
    void finalize();
};

}  // namespace headkd
