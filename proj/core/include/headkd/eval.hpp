#pragma once

#include <vector>

#include "headkd/core.hpp"
#include "headkd/toydet.hpp"

namespace headkd::eval {

/// COCO-style metrics. Entries are percentages in [0,100], or -1 when a
/// bucket has no ground truth at all (matching the usual tooling convention).
struct MapMetrics {
    real map = 0;
    real map50 = 0;
    real map75 = 0;
    real map_s = 0;
    real map_m = 0;
    real map_l = 0;
};

/// Average precision over IoU thresholds 0.50:0.05:0.95 with 101-point
/// interpolation. Detections and ground truth are aligned by index. Area
/// splits use the COCO pixel thresholds (32^2, 96^2) scaled by
/// (image_size/640)^2. No detections at all yields all-zero metrics.
MapMetrics evaluate_map(const std::vector<Detections>& dets,
                        const std::vector<toydet::Targets>& gts, real image_size = 128);

}  // namespace headkd::eval
