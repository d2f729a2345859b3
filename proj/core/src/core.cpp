#include "headkd/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headkd {

void FeaturePyramid::validate() const {
    if (levels.empty()) throw std::invalid_argument("FeaturePyramid: no levels");
    int64_t c = -1;
    int64_t prev_stride = 0;
    for (const auto& [lvl, fm] : levels) {
        if (!fm.data.defined() || fm.data.rank() != 3) {
            throw std::invalid_argument("FeaturePyramid: level " + std::to_string(lvl) +
                                        " is not a rank-3 map");
        }
        if (fm.stride <= 0 || (fm.stride & (fm.stride - 1)) != 0) {
            throw std::invalid_argument("FeaturePyramid: stride must be a positive power of two");
        }
        if (c < 0) c = fm.channels();
        if (fm.channels() != c) {
            throw std::invalid_argument("FeaturePyramid: channel count differs across levels");
        }
        if (prev_stride != 0 && fm.stride != 2 * prev_stride) {
            throw std::invalid_argument("FeaturePyramid: stride must double per level");
        }
        prev_stride = fm.stride;
    }
}

bool Box::valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x1 <= x2 && y1 <= y2;
}

Box Box::clipped(real img_w, real img_h) const {
    auto clamp = [](real v, real lo, real hi) { return std::min(std::max(v, lo), hi); };
    Box b;
    b.x1 = clamp(x1, 0, img_w);
    b.y1 = clamp(y1, 0, img_h);
    b.x2 = clamp(x2, 0, img_w);
    b.y2 = clamp(y2, 0, img_h);
    return b;
}

real box_iou(const Box& a, const Box& b) {
    const real ix = std::max(real(0), std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const real iy = std::max(real(0), std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const real inter = ix * iy;
    const real uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0;
}

void RoISet::validate() const {
    const size_t n = boxes.size();
    if (scores.size() != n || level.size() != n || (source && source->size() != n)) {
        throw std::invalid_argument("RoISet: field lengths differ");
    }
    for (const Box& b : boxes) {
        if (!b.valid()) throw std::invalid_argument("RoISet: invalid box");
    }
}

const Var& HeadTaps::at(const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) throw std::out_of_range("HeadTaps: no tap named " + name);
    return it->second;
}

std::vector<std::string> HeadTaps::names() const {
    std::vector<std::string> out;
    out.reserve(named.size());
    for (const auto& [k, v] : named) out.push_back(k);
    return out;
}

void LossReport::add(std::string name, Var value, real weight, bool enabled) {
    if (!value.defined() || value.val().numel() != 1) {
        throw std::invalid_argument("LossReport: term " + name + " must be scalar");
    }
    if (has(name)) throw std::invalid_argument("LossReport: duplicate term " + name);
    terms_.emplace_back(std::move(name), LossTerm{std::move(value), weight, enabled});
}

void LossReport::merge(const LossReport& other) {
    for (const auto& [name, t] : other.terms_) add(name, t.value, t.weight, t.enabled);
}

bool LossReport::has(const std::string& name) const {
    for (const auto& [n, t] : terms_) {
        if (n == name) return true;
    }
    return false;
}

const LossTerm& LossReport::term(const std::string& name) const {
    for (const auto& [n, t] : terms_) {
        if (n == name) return t;
    }
    throw std::out_of_range("LossReport: no term named " + name);
}

void LossReport::set_enabled_prefix(const std::string& prefix, bool enabled) {
    for (auto& [n, t] : terms_) {
        if (n.rfind(prefix, 0) == 0) t.enabled = enabled;
    }
}

LossReport LossReport::with_prefix(const std::string& prefix) const {
    LossReport out;
    for (const auto& [name, t] : terms_) out.add(prefix + name, t.value, t.weight, t.enabled);
    return out;
}

LossReport LossReport::reweighted(real factor) const {
    LossReport out;
    for (const auto& [name, t] : terms_) out.add(name, t.value, t.weight * factor, t.enabled);
    return out;
}

real LossReport::total() const {
    real sum = 0;
    for (const auto& [name, t] : terms_) {
        const real v = t.value.val().item();
        if (!std::isfinite(v)) throw std::runtime_error("LossReport: non-finite term " + name);
        if (t.enabled) sum += t.weight * v;
    }
    return sum;
}

Var LossReport::total_var() const {
    Var acc;
    for (const auto& [name, t] : terms_) {
        if (!t.enabled) continue;
        Var w = scale(t.value, t.weight);
        acc = acc.defined() ? headkd::add(acc, w) : w;
    }
    if (!acc.defined()) return Var::constant(Tensor::scalar(0));
    return acc;
}

real loss_report_total(const LossReport& report) {
    if (report.empty()) throw std::invalid_argument("loss_report_total: empty report");
    return report.total();
}

std::string loss_report_json_line(const LossReport& report, int64_t step,
                                  const std::vector<std::pair<std::string, real>>& extra) {
    nlohmann::ordered_json j;
    j["step"] = step;
    for (const auto& [k, v] : extra) j[k] = v;
    nlohmann::ordered_json terms = nlohmann::ordered_json::object();
    for (const auto& [name, t] : report.terms()) {
        terms[name] = {{"value", t.value.val().item()}, {"weight", t.weight}, {"enabled", t.enabled}};
    }
    j["terms"] = std::move(terms);
    j["total"] = report.total();
    return j.dump();
}

void Detections::validate() const {
    const int64_t n = size();
    if (static_cast<int64_t>(labels.size()) != n || static_cast<int64_t>(scores.size()) != n) {
        throw std::invalid_argument("Detections: field lengths differ");
    }
}

void Detections::finalize() {
    validate();
    const int64_t n = size();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::sort(idx.begin(), idx.end(), [this](int64_t a, int64_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        if (labels[a] != labels[b]) return labels[a] < labels[b];
        if (boxes[a].y1 != boxes[b].y1) return boxes[a].y1 < boxes[b].y1;
        return boxes[a].x1 < boxes[b].x1;
    });
    Detections out;
    out.boxes.reserve(boxes.size());
    out.labels.reserve(labels.size());
    out.scores.reserve(scores.size());
    for (int64_t i : idx) {
        out.boxes.push_back(boxes[static_cast<size_t>(i)]);
        out.labels.push_back(labels[static_cast<size_t>(i)]);
        out.scores.push_back(scores[static_cast<size_t>(i)]);
    }
    *this = std::move(out);
}

}  // namespace headkd
