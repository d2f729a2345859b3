#include "headkd/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace headkd::eval {

namespace {

constexpr int kNumThresholds = 10;
constexpr int kNumRecallPoints = 101;

real iou_threshold(int t) { return real(0.5) + real(0.05) * t; }

struct ImageEval {
    // det index -> matched flag / ignore flag, one row per IoU threshold
    std::vector<std::array<bool, kNumThresholds>> det_matched;
    std::vector<std::array<bool, kNumThresholds>> det_ignored;
};

struct DetKey {
    real score;
    size_t img;
    size_t idx;  // rank within the image's class-filtered, score-sorted list
};

/// AP at each IoU threshold for one class and one area range, or -1 when the
/// range holds no ground truth. Mirrors the reference COCO accumulation:
/// greedy score-ordered matching with ignore semantics, then 101-point
/// precision interpolation.
std::array<real, kNumThresholds> class_area_ap(const std::vector<Detections>& dets,
                                               const std::vector<toydet::Targets>& gts, int cls,
                                               real area_lo, real area_hi) {
    const size_t n_img = gts.size();
    int64_t npig = 0;
    std::vector<ImageEval> evals(n_img);
    std::vector<DetKey> all_dets;

    for (size_t img = 0; img < n_img; ++img) {
        std::vector<Box> gt_boxes;
        std::vector<bool> gt_ignore;
        // non-ignored ground truth first, original order within each group
        for (int pass = 0; pass < 2; ++pass) {
            for (size_t g = 0; g < gts[img].boxes.size(); ++g) {
                if (gts[img].labels[g] != cls) continue;
                const real a = gts[img].boxes[g].area();
                const bool ign = a < area_lo || a > area_hi;
                if ((pass == 0) == ign) continue;
                gt_boxes.push_back(gts[img].boxes[g]);
                gt_ignore.push_back(ign);
                if (pass == 0) ++npig;
            }
        }

        std::vector<size_t> order;
        for (size_t d = 0; d < dets[img].boxes.size(); ++d) {
            if (dets[img].labels[d] == cls) order.push_back(d);
        }
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return dets[img].scores[a] > dets[img].scores[b];
        });

        ImageEval& ev = evals[img];
        ev.det_matched.resize(order.size());
        ev.det_ignored.resize(order.size());
        std::vector<std::vector<real>> iou(order.size(), std::vector<real>(gt_boxes.size()));
        for (size_t d = 0; d < order.size(); ++d) {
            for (size_t g = 0; g < gt_boxes.size(); ++g) {
                iou[d][g] = box_iou(dets[img].boxes[order[d]], gt_boxes[g]);
            }
        }

        for (int t = 0; t < kNumThresholds; ++t) {
            std::vector<bool> gt_matched(gt_boxes.size(), false);
            for (size_t d = 0; d < order.size(); ++d) {
                real best_iou = std::min(iou_threshold(t), real(1) - real(1e-10));
                int64_t best = -1;
                for (size_t g = 0; g < gt_boxes.size(); ++g) {
                    if (gt_matched[g]) continue;
                    if (best > -1 && !gt_ignore[static_cast<size_t>(best)] && gt_ignore[g]) break;
                    if (iou[d][g] < best_iou) continue;
                    best_iou = iou[d][g];
                    best = static_cast<int64_t>(g);
                }
                if (best > -1) {
                    gt_matched[static_cast<size_t>(best)] = true;
                    ev.det_matched[d][t] = true;
                    ev.det_ignored[d][t] = gt_ignore[static_cast<size_t>(best)];
                } else {
                    const real a = dets[img].boxes[order[d]].area();
                    ev.det_matched[d][t] = false;
                    ev.det_ignored[d][t] = a < area_lo || a > area_hi;
                }
            }
        }

        for (size_t d = 0; d < order.size(); ++d) {
            all_dets.push_back({dets[img].scores[order[d]], img, d});
        }
    }

    std::array<real, kNumThresholds> ap;
    if (npig == 0) {
        ap.fill(-1);
        return ap;
    }

    std::sort(all_dets.begin(), all_dets.end(), [](const DetKey& a, const DetKey& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.img != b.img) return a.img < b.img;
        return a.idx < b.idx;
    });

    for (int t = 0; t < kNumThresholds; ++t) {
        std::vector<real> precision, recall;
        int64_t tp = 0, fp = 0;
        for (const DetKey& dk : all_dets) {
            const ImageEval& ev = evals[dk.img];
            if (ev.det_ignored[dk.idx][t]) continue;
            if (ev.det_matched[dk.idx][t]) {
                ++tp;
            } else {
                ++fp;
            }
            recall.push_back(static_cast<real>(tp) / static_cast<real>(npig));
            precision.push_back(static_cast<real>(tp) / static_cast<real>(tp + fp));
        }
        for (size_t i = precision.size(); i > 1; --i) {
            precision[i - 2] = std::max(precision[i - 2], precision[i - 1]);
        }
        real q_sum = 0;
        for (int r = 0; r < kNumRecallPoints; ++r) {
            const real thr = static_cast<real>(r) / 100;
            const auto it = std::lower_bound(recall.begin(), recall.end(), thr);
            if (it != recall.end()) {
                q_sum += precision[static_cast<size_t>(it - recall.begin())];
            }
        }
        ap[t] = q_sum / kNumRecallPoints;
    }
    return ap;
}

real mean_valid(const std::vector<real>& values) {
    real sum = 0;
    int64_t n = 0;
    for (real v : values) {
        if (v > -1) {
            sum += v;
            ++n;
        }
    }
    return n == 0 ? real(-1) : sum / static_cast<real>(n) * 100;
}

}  // namespace

MapMetrics evaluate_map(const std::vector<Detections>& dets,
                        const std::vector<toydet::Targets>& gts, real image_size) {
    if (dets.size() != gts.size()) {
        throw std::invalid_argument("evaluate_map: detections/ground-truth image count mismatch");
    }
    if (image_size <= 0) throw std::invalid_argument("evaluate_map: image_size must be positive");

    int num_classes = 0;
    int64_t total_dets = 0;
    for (const auto& t : gts) {
        for (int l : t.labels) num_classes = std::max(num_classes, l + 1);
    }
    for (const auto& d : dets) {
        d.validate();
        total_dets += d.size();
        for (int l : d.labels) num_classes = std::max(num_classes, l + 1);
    }
    if (total_dets == 0) return MapMetrics{};

    const real scale = (image_size / 640) * (image_size / 640);
    const real small_max = 32 * 32 * scale;
    const real medium_max = 96 * 96 * scale;
    const real huge = real(1e10);
    const std::array<std::pair<real, real>, 4> ranges = {
        std::pair<real, real>{0, huge},
        {0, small_max},
        {small_max, medium_max},
        {medium_max, huge},
    };

    std::vector<real> all, all50, all75, small, medium, large;
    for (int cls = 0; cls < num_classes; ++cls) {
        for (size_t r = 0; r < ranges.size(); ++r) {
            const auto ap = class_area_ap(dets, gts, cls, ranges[r].first, ranges[r].second);
            for (int t = 0; t < kNumThresholds; ++t) {
                switch (r) {
                    case 0:
                        all.push_back(ap[t]);
                        if (t == 0) all50.push_back(ap[t]);
                        if (t == 5) all75.push_back(ap[t]);
                        break;
                    case 1:
                        small.push_back(ap[t]);
                        break;
                    case 2:
                        medium.push_back(ap[t]);
                        break;
                    case 3:
                        large.push_back(ap[t]);
                        break;
                }
            }
        }
    }

    MapMetrics m;
    m.map = mean_valid(all);
    m.map50 = mean_valid(all50);
    m.map75 = mean_valid(all75);
    m.map_s = mean_valid(small);
    m.map_m = mean_valid(medium);
    m.map_l = mean_valid(large);
    return m;
}

}  // namespace headkd::eval
