#include "headkd/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headkd::bridge {

namespace {

// keeps exp(dw) from blowing past ~62x the anchor extent
constexpr real kDeltaClamp = 4.135;

struct Candidate {
    real score = 0;  // logit
    int level = 0;
    int64_t y = 0, x = 0;
    int slot = 0;
    Box box;
};

bool candidate_before(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.level != b.level) return a.level < b.level;
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    return a.slot < b.slot;
}

real stable_sigmoid(real x) {
    if (x >= 0) return 1 / (1 + std::exp(-x));
    real e = std::exp(x);
    return e / (1 + e);
}

}  // namespace

void ProposalConfig::validate(int64_t num_levels) const {
    if (pre_nms_topk <= 0 || post_nms_n <= 0 || nms_iou <= 0 || min_box_size <= 0) {
        throw std::invalid_argument("ProposalConfig: fields must be positive");
    }
    if (post_nms_n > pre_nms_topk * num_levels) {
        throw std::invalid_argument("ProposalConfig: post_nms_n exceeds candidate budget");
    }
}

Tensor objectness_from_dense(const Tensor& cls_logits, int64_t num_classes) {
    if (num_classes <= 0) throw std::invalid_argument("objectness_from_dense: K must be positive");
    if (cls_logits.rank() != 3 || cls_logits.size(0) % num_classes != 0) {
        throw std::invalid_argument("objectness_from_dense: channels not divisible by K");
    }
    const int64_t a = cls_logits.size(0) / num_classes;
    const int64_t h = cls_logits.size(1), w = cls_logits.size(2);
    Tensor out({a, h, w});
    for (int64_t s = 0; s < a; ++s) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                real m = cls_logits.at(s * num_classes, y, x);
                for (int64_t k = 1; k < num_classes; ++k) {
                    m = std::max(m, cls_logits.at(s * num_classes + k, y, x));
                }
                out.at(s, y, x) = m;
            }
        }
    }
    return out;
}

Box decode_box(const Box& anchor, real dx, real dy, real dw, real dh) {
    const real aw = anchor.w(), ah = anchor.h();
    const real cx = anchor.cx() + dx * aw;
    const real cy = anchor.cy() + dy * ah;
    const real w = aw * std::exp(std::min(dw, kDeltaClamp));
    const real h = ah * std::exp(std::min(dh, kDeltaClamp));
    return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

void encode_box(const Box& anchor, const Box& target, real out[4]) {
    const real aw = std::max(anchor.w(), real(1e-6));
    const real ah = std::max(anchor.h(), real(1e-6));
    out[0] = (target.cx() - anchor.cx()) / aw;
    out[1] = (target.cy() - anchor.cy()) / ah;
    out[2] = std::log(std::max(target.w(), real(1e-6)) / aw);
    out[3] = std::log(std::max(target.h(), real(1e-6)) / ah);
}

std::vector<int64_t> greedy_nms(const std::vector<Box>& boxes, real iou_thresh) {
    std::vector<int64_t> kept;
    for (int64_t i = 0; i < static_cast<int64_t>(boxes.size()); ++i) {
        bool suppressed = false;
        for (int64_t k : kept) {
            if (box_iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(k)]) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(i);
    }
    return kept;
}

RoISet propose_rois(const std::map<int, LevelDense>& levels, real img_w, real img_h,
                    const ProposalConfig& cfg) {
    cfg.validate(static_cast<int64_t>(levels.size()));
    std::vector<Candidate> pool;
    for (const auto& [lvl, ld] : levels) {
        const Tensor& obj = ld.objectness.val();
        const Tensor& deltas = ld.deltas.val();
        const int64_t a = ld.num_slots, h = obj.size(1), w = obj.size(2);
        if (obj.size(0) != a || deltas.size(0) != a * 4 || deltas.size(1) != h ||
            deltas.size(2) != w || static_cast<int64_t>(ld.anchors.size()) != a * h * w) {
            throw std::invalid_argument("propose_rois: inconsistent level shapes at level " +
                                        std::to_string(lvl));
        }
        std::vector<Candidate> level_cands;
        level_cands.reserve(static_cast<size_t>(a * h * w));
        for (int64_t s = 0; s < a; ++s) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t x = 0; x < w; ++x) {
                    const Box& anchor = ld.anchors[static_cast<size_t>((s * h + y) * w + x)];
                    Box b = decode_box(anchor, deltas.at(s * 4 + 0, y, x), deltas.at(s * 4 + 1, y, x),
                                       deltas.at(s * 4 + 2, y, x), deltas.at(s * 4 + 3, y, x))
                                .clipped(img_w, img_h);
                    if (b.w() < cfg.min_box_size || b.h() < cfg.min_box_size) continue;
                    level_cands.push_back(
                        {obj.at(s, y, x), lvl, y, x, static_cast<int>(s), b});
                }
            }
        }
        std::sort(level_cands.begin(), level_cands.end(), candidate_before);
        if (static_cast<int64_t>(level_cands.size()) > cfg.pre_nms_topk) {
            level_cands.resize(static_cast<size_t>(cfg.pre_nms_topk));
        }
        pool.insert(pool.end(), level_cands.begin(), level_cands.end());
    }
    std::sort(pool.begin(), pool.end(), candidate_before);

    std::vector<Box> pool_boxes;
    pool_boxes.reserve(pool.size());
    for (const Candidate& c : pool) pool_boxes.push_back(c.box);
    std::vector<int64_t> kept = greedy_nms(pool_boxes, cfg.nms_iou);
    if (static_cast<int64_t>(kept.size()) > cfg.post_nms_n) {
        kept.resize(static_cast<size_t>(cfg.post_nms_n));
    }

    RoISet out;
    out.source.emplace();
    for (int64_t k : kept) {
        const Candidate& c = pool[static_cast<size_t>(k)];
        out.boxes.push_back(c.box);
        out.scores.push_back(stable_sigmoid(c.score));
        out.level.push_back(c.level);
        out.source->push_back({c.level, c.y, c.x, c.slot});
    }
    return out;
}

int assign_fpn_level(const Box& box, int min_level, int max_level) {
    const real area = box.area();
    if (area <= 0) return min_level;
    const real k = std::floor(4 + std::log2(std::sqrt(area) / 224));
    if (k < min_level) return min_level;
    if (k > max_level) return max_level;
    return static_cast<int>(k);
}

namespace {

struct BilinearSample {
    int64_t idx[4] = {0, 0, 0, 0};  // spatial offsets into an (H*W) plane
    real w[4] = {0, 0, 0, 0};
};

BilinearSample bilinear_at(real y, real x, int64_t h, int64_t w) {
    BilinearSample s;
    if (y < -1 || y > static_cast<real>(h) || x < -1 || x > static_cast<real>(w)) return s;
    y = std::max(y, real(0));
    x = std::max(x, real(0));
    int64_t y0 = static_cast<int64_t>(y);
    int64_t x0 = static_cast<int64_t>(x);
    int64_t y1, x1;
    if (y0 >= h - 1) {
        y0 = y1 = h - 1;
        y = static_cast<real>(y0);
    } else {
        y1 = y0 + 1;
    }
    if (x0 >= w - 1) {
        x0 = x1 = w - 1;
        x = static_cast<real>(x0);
    } else {
        x1 = x0 + 1;
    }
    const real ly = y - static_cast<real>(y0), lx = x - static_cast<real>(x0);
    const real hy = 1 - ly, hx = 1 - lx;
    s.idx[0] = y0 * w + x0;
    s.idx[1] = y0 * w + x1;
    s.idx[2] = y1 * w + x0;
    s.idx[3] = y1 * w + x1;
    s.w[0] = hy * hx;
    s.w[1] = hy * lx;
    s.w[2] = ly * hx;
    s.w[3] = ly * lx;
    return s;
}

}  // namespace

Var roi_align(const FeatureMap& fmap, const std::vector<Box>& boxes, int64_t out_size) {
    const int64_t n = static_cast<int64_t>(boxes.size());
    const int64_t c = fmap.channels(), h = fmap.height(), w = fmap.width();
    const real scale = real(1) / static_cast<real>(fmap.stride);
    constexpr int64_t kSamples = 2;  // per bin axis

    // sampling geometry is channel-independent; precompute once and share
    // between the forward fill and the backward scatter
    auto samples = std::make_shared<std::vector<BilinearSample>>();
    samples->reserve(static_cast<size_t>(n * out_size * out_size * kSamples * kSamples));
    for (int64_t i = 0; i < n; ++i) {
        const Box& b = boxes[static_cast<size_t>(i)];
        const real y_start = b.y1 * scale - real(0.5);
        const real x_start = b.x1 * scale - real(0.5);
        const real bin_h = (b.y2 - b.y1) * scale / static_cast<real>(out_size);
        const real bin_w = (b.x2 - b.x1) * scale / static_cast<real>(out_size);
        for (int64_t oy = 0; oy < out_size; ++oy) {
            for (int64_t ox = 0; ox < out_size; ++ox) {
                for (int64_t sy = 0; sy < kSamples; ++sy) {
                    for (int64_t sx = 0; sx < kSamples; ++sx) {
                        const real py = y_start + (static_cast<real>(oy) +
                                                   (static_cast<real>(sy) + real(0.5)) / kSamples) *
                                                      bin_h;
                        const real px = x_start + (static_cast<real>(ox) +
                                                   (static_cast<real>(sx) + real(0.5)) / kSamples) *
                                                      bin_w;
                        samples->push_back(bilinear_at(py, px, h, w));
                    }
                }
            }
        }
    }

    Var src = fmap.data;
    Tensor out({n, c, out_size, out_size});
    const real* fd = src.val().data();
    const real inv_count = real(1) / (kSamples * kSamples);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const real* plane = fd + ch * h * w;
            for (int64_t cell = 0; cell < out_size * out_size; ++cell) {
                const size_t base =
                    static_cast<size_t>((i * out_size * out_size + cell) * kSamples * kSamples);
                real acc = 0;
                for (int64_t sp = 0; sp < kSamples * kSamples; ++sp) {
                    const BilinearSample& bs = (*samples)[base + static_cast<size_t>(sp)];
                    acc += bs.w[0] * plane[bs.idx[0]] + bs.w[1] * plane[bs.idx[1]] +
                           bs.w[2] * plane[bs.idx[2]] + bs.w[3] * plane[bs.idx[3]];
                }
                out[((i * c + ch) * out_size * out_size) + cell] = acc * inv_count;
            }
        }
    }
    return make_op(std::move(out), {src},
                   [src, samples, n, c, h, w, out_size, inv_count](Node& self) mutable {
                       if (!src.requires_grad()) return;
                       real* gd = src.grad().data();
                       for (int64_t i = 0; i < n; ++i) {
                           for (int64_t ch = 0; ch < c; ++ch) {
                               real* plane = gd + ch * h * w;
                               for (int64_t cell = 0; cell < out_size * out_size; ++cell) {
                                   const real g =
                                       self.grad[((i * c + ch) * out_size * out_size) + cell] *
                                       inv_count;
                                   const size_t base = static_cast<size_t>(
                                       (i * out_size * out_size + cell) * kSamples * kSamples);
                                   for (int64_t sp = 0; sp < kSamples * kSamples; ++sp) {
                                       const BilinearSample& bs =
                                           (*samples)[base + static_cast<size_t>(sp)];
                                       plane[bs.idx[0]] += g * bs.w[0];
                                       plane[bs.idx[1]] += g * bs.w[1];
                                       plane[bs.idx[2]] += g * bs.w[2];
                                       plane[bs.idx[3]] += g * bs.w[3];
                                   }
                               }
                           }
                       }
                   });
}

Var roi_align_pyramid(const FeaturePyramid& pyr, const RoISet& rois, int64_t out_size) {
    const int64_t n = rois.size();
    const int64_t c = pyr.channels();
    const int64_t d = c * out_size * out_size;
    if (n == 0) return Var::constant(Tensor({0, d}));

    std::map<int, std::vector<int64_t>> by_level;
    for (int64_t i = 0; i < n; ++i) {
        const int lvl = assign_fpn_level(rois.boxes[static_cast<size_t>(i)], pyr.min_level(),
                                         pyr.max_level());
        by_level[lvl].push_back(i);
    }
    std::vector<Var> pieces;
    for (const auto& [lvl, idxs] : by_level) {
        std::vector<Box> boxes;
        boxes.reserve(idxs.size());
        for (int64_t i : idxs) boxes.push_back(rois.boxes[static_cast<size_t>(i)]);
        Var pooled = roi_align(pyr.levels.at(lvl), boxes, out_size);
        Var flat = reshape(pooled, {static_cast<int64_t>(idxs.size()), d});
        pieces.push_back(scatter_rows(flat, idxs, n));
    }
    return add_n(pieces);
}

Var trace_rois_to_anchor_features(const RoISet& rois, const std::map<int, Var>& cls_taps) {
    if (!rois.source) {
        throw std::invalid_argument("trace_rois_to_anchor_features: RoIs lack provenance");
    }
    const int64_t n = rois.size();
    if (n == 0) {
        const int64_t c = cls_taps.empty() ? 0 : cls_taps.begin()->second.size(0);
        return Var::constant(Tensor({0, c}));
    }
    std::map<int, std::vector<int64_t>> by_level;
    for (int64_t i = 0; i < n; ++i) {
        by_level[(*rois.source)[static_cast<size_t>(i)].level].push_back(i);
    }
    std::vector<Var> pieces;
    for (const auto& [lvl, idxs] : by_level) {
        auto tap = cls_taps.find(lvl);
        if (tap == cls_taps.end()) {
            throw std::invalid_argument("trace_rois_to_anchor_features: no tap for level " +
                                        std::to_string(lvl));
        }
        std::vector<std::pair<int64_t, int64_t>> yx;
        yx.reserve(idxs.size());
        for (int64_t i : idxs) {
            const Provenance& p = (*rois.source)[static_cast<size_t>(i)];
            yx.emplace_back(p.y, p.x);
        }
        pieces.push_back(scatter_rows(gather_pixels(tap->second, yx), idxs, n));
    }
    return add_n(pieces);
}

}  // namespace headkd::bridge
