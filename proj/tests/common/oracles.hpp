#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "headkd/bridge.hpp"
#include "headkd/core.hpp"
#include "headkd/distill.hpp"
#include "headkd/nn.hpp"
#include "headkd/tensor.hpp"

// Reference implementations written directly from the definitions, kept
// deliberately naive (elementwise loops, O(n^2) scans) so they share no code
// paths with the library versions they validate.
namespace oracle {

using headkd::Box;
using headkd::real;
using headkd::Tensor;

inline real mse_ref(const Tensor& t, const Tensor& s) {
    real acc = 0;
    for (int64_t i = 0; i < t.numel(); ++i) {
        const real d = t[i] - s[i];
        acc += d * d;
    }
    return acc / static_cast<real>(t.numel());
}

// y[n,m] = sum_k x[n,k] w[m,k] + b[m]
inline Tensor linear_ref(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int64_t n = x.size(0), k = x.size(1), m = w.size(0);
    Tensor y({n, m});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            real acc = b[j];
            for (int64_t q = 0; q < k; ++q) acc += x.at(i, q) * w.at(j, q);
            y.at(i, j) = acc;
        }
    }
    return y;
}

// y[o,y,x] = sum_i x[i,y,x] w[o,i,0,0] + b[o]
inline Tensor conv1x1_ref(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int64_t ci = x.size(0), h = x.size(1), wd = x.size(2), co = w.size(0);
    Tensor y({co, h, wd});
    for (int64_t o = 0; o < co; ++o) {
        for (int64_t r = 0; r < h; ++r) {
            for (int64_t c = 0; c < wd; ++c) {
                real acc = b[o];
                for (int64_t i = 0; i < ci; ++i) acc += x.at(i, r, c) * w.at(o, i, 0, 0);
                y.at(o, r, c) = acc;
            }
        }
    }
    return y;
}

// Full direct convolution, any stride / zero padding, square kernel.
inline Tensor conv2d_ref(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                         int64_t pad) {
    const int64_t ci = x.size(0), h = x.size(1), wd = x.size(2);
    const int64_t co = w.size(0), k = w.size(2);
    const int64_t oh = (h + 2 * pad - k) / stride + 1;
    const int64_t ow = (wd + 2 * pad - k) / stride + 1;
    Tensor y({co, oh, ow});
    for (int64_t o = 0; o < co; ++o) {
        for (int64_t r = 0; r < oh; ++r) {
            for (int64_t c = 0; c < ow; ++c) {
                real acc = b.numel() ? b[o] : 0;
                for (int64_t i = 0; i < ci; ++i) {
                    for (int64_t dy = 0; dy < k; ++dy) {
                        for (int64_t dx = 0; dx < k; ++dx) {
                            const int64_t sy = r * stride + dy - pad;
                            const int64_t sx = c * stride + dx - pad;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                            acc += x.at(i, sy, sx) * w.at(o, i, dy, dx);
                        }
                    }
                }
                y.at(o, r, c) = acc;
            }
        }
    }
    return y;
}

// Applies an adapter from its exported parameters; pr is the collect prefix.
inline Tensor adapter_ref(const headkd::distill::Adapter& ad, const Tensor& x) {
    headkd::nn::ParamMap params;
    ad.collect("a", params);
    const Tensor& w = params.at("a.w").val();
    const Tensor& b = params.at("a.b").val();
    return ad.kind() == "linear" ? linear_ref(x, w, b) : conv1x1_ref(x, w, b);
}

inline real iou_ref(const Box& a, const Box& b) {
    const real ix = std::max(real(0), std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const real iy = std::max(real(0), std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const real inter = ix * iy;
    const real uni = a.area() + b.area() - inter;
    return uni <= 0 ? 0 : inter / uni;
}

// Quadratic greedy suppression over preference-ordered boxes.
inline std::vector<int64_t> nms_ref(const std::vector<Box>& boxes, real thresh) {
    std::vector<int64_t> kept;
    std::vector<bool> dead(boxes.size(), false);
    for (size_t i = 0; i < boxes.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(static_cast<int64_t>(i));
        for (size_t j = i + 1; j < boxes.size(); ++j) {
            if (!dead[j] && iou_ref(boxes[i], boxes[j]) > thresh) dead[j] = true;
        }
    }
    return kept;
}

struct ProposalKey {
    int level;
    int64_t y, x;
    int slot;

    bool operator<(const ProposalKey& o) const {
        if (level != o.level) return level < o.level;
        if (y != o.y) return y < o.y;
        if (x != o.x) return x < o.x;
        return slot < o.slot;
    }
    bool operator==(const ProposalKey& o) const {
        return level == o.level && y == o.y && x == o.x && slot == o.slot;
    }
};

// Re-derivation of the proposal pipeline: decode, clip, size filter,
// per-level top-k, global score order, greedy NMS, global top-k. Returns the
// kept provenance keys in preference order.
inline std::vector<ProposalKey> propose_rois_ref(
    const std::map<int, headkd::bridge::LevelDense>& levels, real img_w, real img_h,
    const headkd::bridge::ProposalConfig& cfg) {
    struct Cand {
        real score;
        ProposalKey key;
        Box box;
    };
    auto before = [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.key < b.key;
    };
    std::vector<Cand> pool;
    for (const auto& [lvl, ld] : levels) {
        std::vector<Cand> cands;
        const Tensor& obj = ld.objectness.val();
        const Tensor& deltas = ld.deltas.val();
        const int64_t h = obj.size(1), w = obj.size(2);
        for (int64_t s = 0; s < ld.num_slots; ++s) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    const Box& a = ld.anchors[static_cast<size_t>((s * h + y) * w + x)];
                    const real dx = deltas.at(s * 4 + 0, y, x), dy = deltas.at(s * 4 + 1, y, x);
                    const real dw = deltas.at(s * 4 + 2, y, x), dh = deltas.at(s * 4 + 3, y, x);
                    const real clamp = 4.135;
                    const real cx = a.cx() + dx * a.w(), cy = a.cy() + dy * a.h();
                    const real bw = a.w() * std::exp(std::min(dw, clamp));
                    const real bh = a.h() * std::exp(std::min(dh, clamp));
                    Box b{cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2};
                    b.x1 = std::clamp(b.x1, real(0), img_w);
                    b.x2 = std::clamp(b.x2, real(0), img_w);
                    b.y1 = std::clamp(b.y1, real(0), img_h);
                    b.y2 = std::clamp(b.y2, real(0), img_h);
                    if (b.w() < cfg.min_box_size || b.h() < cfg.min_box_size) continue;
                    cands.push_back({obj.at(s, y, x), {lvl, y, x, static_cast<int>(s)}, b});
                }
            }
        }
        std::sort(cands.begin(), cands.end(), before);
        if (static_cast<int64_t>(cands.size()) > cfg.pre_nms_topk) {
            cands.resize(static_cast<size_t>(cfg.pre_nms_topk));
        }
        pool.insert(pool.end(), cands.begin(), cands.end());
    }
    std::sort(pool.begin(), pool.end(), before);
    std::vector<Box> boxes;
    for (const Cand& c : pool) boxes.push_back(c.box);
    std::vector<int64_t> kept = nms_ref(boxes, cfg.nms_iou);
    if (static_cast<int64_t>(kept.size()) > cfg.post_nms_n) {
        kept.resize(static_cast<size_t>(cfg.post_nms_n));
    }
    std::vector<ProposalKey> out;
    for (int64_t k : kept) out.push_back(pool[static_cast<size_t>(k)].key);
    return out;
}

}  // namespace oracle
