#pragma once

#include <map>
#include <string>
#include <vector>

#include "headkd/core.hpp"
#include "headkd/tensor.hpp"
#include "headkd/toydet.hpp"

namespace headkd::report {

/// Channel-mean of absolute values, min-max normalized: (C,H,W) -> (H,W) in
/// [0,1]. A constant input (e.g. all zeros) maps to an all-zero plane.
Tensor activation_map(const Tensor& features);

/// Backbone activation map of one pyramid level for a (3,H,W) image, at
/// feature resolution. The image is zero-padded to the detector stride first.
Tensor detector_activation_map(const toydet::Detector& det, const Tensor& image, int level);

/// Bilinear upsample of an (H,W) map in [0,1] plus a jet-style colormap,
/// giving a (3,out_h,out_w) image ready for PNG export.
Tensor colormap_image(const Tensor& map01, int64_t out_h, int64_t out_w);

/// Flattened cosine similarity; 0 when either operand is all zeros.
real cosine_similarity(const Tensor& a, const Tensor& b);

/// Converts a log.jsonl produced by training into a CSV with columns
/// step,epoch,lr,<term>,<term>_enabled,...,total. Term order follows the
/// first line; every line must carry the same term set.
void loss_curves_csv(const std::string& log_path, const std::string& out_csv);

/// Four-way detection error accounting at IoU 0.5. Denominator is GT + FP:
/// correct + false_negative covers the GT side, loc + background the FP side.
struct ErrorCounts {
    int64_t correct = 0;
    int64_t loc = 0;
    int64_t background = 0;
    int64_t false_negative = 0;

    int64_t gt() const { return correct + false_negative; }
    int64_t fp() const { return loc + background; }
    int64_t denom() const { return gt() + fp(); }
};

struct ErrorReport {
    ErrorCounts all;
    std::map<int, ErrorCounts> per_class;
};

ErrorReport error_analysis(const std::vector<Detections>& dets,
                           const std::vector<toydet::Targets>& gts);

/// JSON rendering with counts and fractions per class plus the all-class row.
std::string error_report_json(const ErrorReport& report);

}  // namespace headkd::report
