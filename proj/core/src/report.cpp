#include "headkd/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "headkd/data.hpp"

namespace headkd::report {

using nlohmann::json;
using nlohmann::ordered_json;

Tensor activation_map(const Tensor& features) {
    if (features.rank() != 3) throw std::invalid_argument("activation_map: expected (C,H,W)");
    const int64_t c = features.size(0), h = features.size(1), w = features.size(2);
    if (c == 0 || h == 0 || w == 0) throw std::invalid_argument("activation_map: empty input");
    Tensor map({h, w});
    real lo = 1e30, hi = -1e30;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            real sum = 0;
            for (int64_t ch = 0; ch < c; ++ch) sum += std::abs(features.at(ch, y, x));
            const real v = sum / static_cast<real>(c);
            map.at(y, x) = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    const real span = hi - lo;
    for (auto& v : map.vec()) v = span > 0 ? (v - lo) / span : real(0);
    return map;
}

Tensor detector_activation_map(const toydet::Detector& det, const Tensor& image, int level) {
    if (image.rank() != 3 || image.size(0) != 3) {
        throw std::invalid_argument("detector_activation_map: expected a (3,H,W) image");
    }
    data::Sample s;
    s.image = image;
    const data::Sample padded = data::pad_to_multiple(s, det.config().max_stride());
    NoGradGuard frozen;
    FeaturePyramid pyr = det.backbone_forward(Var::constant(padded.image));
    const auto it = pyr.levels.find(level);
    if (it == pyr.levels.end()) {
        throw std::invalid_argument("detector_activation_map: level " + std::to_string(level) +
                                    " not in the pyramid");
    }
    return activation_map(it->second.data.val());
}

namespace {

real jet_channel(real v, real center) {
    return std::clamp(real(1.5) - std::abs(4 * v - center), real(0), real(1));
}

}  // namespace

Tensor colormap_image(const Tensor& map01, int64_t out_h, int64_t out_w) {
    if (map01.rank() != 2) throw std::invalid_argument("colormap_image: expected (H,W)");
    Tensor up = data::resize_bilinear(map01.reshaped({1, map01.size(0), map01.size(1)}), out_h,
                                      out_w);
    Tensor img({3, out_h, out_w});
    for (int64_t y = 0; y < out_h; ++y) {
        for (int64_t x = 0; x < out_w; ++x) {
            const real v = std::clamp(up.at(0, y, x), real(0), real(1));
            img.at(0, y, x) = jet_channel(v, 3);  // red peaks high
            img.at(1, y, x) = jet_channel(v, 2);  // green peaks mid
            img.at(2, y, x) = jet_channel(v, 1);  // blue peaks low
        }
    }
    return img;
}

real cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw std::invalid_argument("cosine_similarity: size mismatch");
    }
    real dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

void loss_curves_csv(const std::string& log_path, const std::string& out_csv) {
    std::ifstream in(log_path);
    if (!in) throw std::runtime_error("loss_curves_csv: cannot open " + log_path);
    std::ofstream out(out_csv);
    if (!out) throw std::runtime_error("loss_curves_csv: cannot write " + out_csv);

    std::vector<std::string> term_names;
    std::string line;
    bool wrote_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error(log_path + ": bad log line: " + e.what());
        }
        const ordered_json& terms = j.at("terms");
        if (!wrote_header) {
            for (auto it = terms.begin(); it != terms.end(); ++it) {
                term_names.push_back(it.key());
            }
            out << "step,epoch,lr";
            for (const auto& n : term_names) out << "," << n << "," << n << "_enabled";
            out << ",total\n";
            wrote_header = true;
        }
        out << j.at("step").get<int64_t>() << "," << j.value("epoch", real(0)) << ","
            << j.value("lr", real(0));
        for (const auto& n : term_names) {
            if (!terms.contains(n)) {
                throw std::runtime_error("loss_curves_csv: term " + n + " missing from a row");
            }
            const ordered_json& t = terms.at(n);
            out << "," << t.at("value").get<real>() << ","
                << (t.at("enabled").get<bool>() ? 1 : 0);
        }
        out << "," << j.at("total").get<real>() << "\n";
    }
    if (!wrote_header) throw std::runtime_error("loss_curves_csv: empty log " + log_path);
}

ErrorReport error_analysis(const std::vector<Detections>& dets,
                           const std::vector<toydet::Targets>& gts) {
    if (dets.size() != gts.size()) {
        throw std::invalid_argument("error_analysis: image count mismatch");
    }
    ErrorReport rep;
    int num_classes = 0;
    for (const auto& t : gts) {
        for (int l : t.labels) num_classes = std::max(num_classes, l + 1);
    }
    for (const auto& d : dets) {
        d.validate();
        for (int l : d.labels) num_classes = std::max(num_classes, l + 1);
    }

    for (int cls = 0; cls < num_classes; ++cls) {
        ErrorCounts& c = rep.per_class[cls];
        for (size_t img = 0; img < gts.size(); ++img) {
            std::vector<size_t> gt_idx;
            for (size_t g = 0; g < gts[img].boxes.size(); ++g) {
                if (gts[img].labels[g] == cls) gt_idx.push_back(g);
            }
            std::vector<size_t> order;
            for (size_t d = 0; d < dets[img].boxes.size(); ++d) {
                if (dets[img].labels[d] == cls) order.push_back(d);
            }
            std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                return dets[img].scores[a] > dets[img].scores[b];
            });

            std::vector<bool> matched(gt_idx.size(), false);
            for (size_t d : order) {
                const Box& db = dets[img].boxes[d];
                real best_iou = 0;
                int64_t best = -1;
                real max_iou_any = 0;
                for (size_t g = 0; g < gt_idx.size(); ++g) {
                    const real iou = box_iou(db, gts[img].boxes[gt_idx[g]]);
                    max_iou_any = std::max(max_iou_any, iou);
                    if (matched[g] || iou < real(0.5)) continue;
                    if (iou > best_iou) {
                        best_iou = iou;
                        best = static_cast<int64_t>(g);
                    }
                }
                if (best >= 0) {
                    matched[static_cast<size_t>(best)] = true;
                    ++c.correct;
                } else if (max_iou_any >= real(0.1)) {
                    // localization errors, including duplicate hits on an
                    // already matched object
                    ++c.loc;
                } else {
                    ++c.background;
                }
            }
            for (bool m : matched) {
                if (!m) ++c.false_negative;
            }
        }
        rep.all.correct += c.correct;
        rep.all.loc += c.loc;
        rep.all.background += c.background;
        rep.all.false_negative += c.false_negative;
    }
    return rep;
}

namespace {

ordered_json counts_json(const ErrorCounts& c) {
    const real denom = static_cast<real>(c.denom());
    auto frac = [denom](int64_t n) { return denom > 0 ? static_cast<real>(n) / denom : real(0); };
    ordered_json j;
    j["counts"] = {{"correct", c.correct},
                   {"loc", c.loc},
                   {"background", c.background},
                   {"false_negative", c.false_negative},
                   {"gt", c.gt()},
                   {"fp", c.fp()}};
    j["fractions"] = {{"correct", frac(c.correct)},
                      {"loc", frac(c.loc)},
                      {"background", frac(c.background)},
                      {"false_negative", frac(c.false_negative)}};
    return j;
}

}  // namespace

std::string error_report_json(const ErrorReport& report) {
    ordered_json j;
    j["all"] = counts_json(report.all);
    ordered_json per = ordered_json::object();
    for (const auto& [cls, counts] : report.per_class) {
        const std::string name = cls < data::kMaxShapeClasses
                                     ? data::shape_class_name(cls)
                                     : "class_" + std::to_string(cls);
        per[name] = counts_json(counts);
    }
    j["per_class"] = std::move(per);
    return j.dump(1);
}

}  // namespace headkd::report
