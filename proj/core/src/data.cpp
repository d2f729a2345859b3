#include "headkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "headkd/core.hpp"

namespace headkd::data {

namespace {

constexpr real kMargin = 2.0;

struct ShapeInstance {
    int cls = 0;
    real cx = 0, cy = 0;
    real size = 0;   // footprint diameter / side length
    real theta = 0;  // triangle rotation
    real color[3] = {0, 0, 0};
    Box box;
};

const real kPalette[kMaxShapeClasses][3] = {
    {0.85, 0.30, 0.30},  // circle
    {0.30, 0.85, 0.30},  // square
    {0.35, 0.45, 0.90},  // triangle
    {0.85, 0.80, 0.30},  // diamond
    {0.80, 0.35, 0.80},  // cross
};

Box shape_box(const ShapeInstance& s) {
    const real h = s.size / 2;
    switch (s.cls) {
        case 0:  // circle
        case 1:  // square
        case 3:  // diamond
        case 4:  // cross
            return {s.cx - h, s.cy - h, s.cx + h, s.cy + h};
        case 2: {  // rotated equilateral triangle: extents are at the vertices
            real x1 = 1e30, y1 = 1e30, x2 = -1e30, y2 = -1e30;
            for (int k = 0; k < 3; ++k) {
                const real a = s.theta + k * (2 * M_PI / 3);
                const real vx = s.cx + h * std::cos(a);
                const real vy = s.cy + h * std::sin(a);
                x1 = std::min(x1, vx);
                y1 = std::min(y1, vy);
                x2 = std::max(x2, vx);
                y2 = std::max(y2, vy);
            }
            return {x1, y1, x2, y2};
        }
        default:
            throw std::logic_error("shape_box: bad class");
    }
}

bool point_inside(const ShapeInstance& s, real x, real y) {
    const real dx = x - s.cx, dy = y - s.cy;
    const real h = s.size / 2;
    switch (s.cls) {
        case 0:
            return dx * dx + dy * dy <= h * h;
        case 1:
            return std::abs(dx) <= h && std::abs(dy) <= h;
        case 2: {
            real vx[3], vy[3];
            for (int k = 0; k < 3; ++k) {
                const real a = s.theta + k * (2 * M_PI / 3);
                vx[k] = s.cx + h * std::cos(a);
                vy[k] = s.cy + h * std::sin(a);
            }
            bool neg = false, pos = false;
            for (int k = 0; k < 3; ++k) {
                const int j = (k + 1) % 3;
                const real cross =
                    (vx[j] - vx[k]) * (y - vy[k]) - (vy[j] - vy[k]) * (x - vx[k]);
                neg = neg || cross < 0;
                pos = pos || cross > 0;
            }
            return !(neg && pos);
        }
        case 3:
            return std::abs(dx) + std::abs(dy) <= h;
        case 4: {
            const real t = s.size / 6;  // half arm thickness
            return (std::abs(dx) <= h && std::abs(dy) <= t) ||
                   (std::abs(dx) <= t && std::abs(dy) <= h);
        }
        default:
            throw std::logic_error("point_inside: bad class");
    }
}

void render(Tensor& img, const ShapeInstance& s) {
    const int64_t size_y = img.size(1), size_x = img.size(2);
    const int64_t x_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(s.box.x1)) - 1);
    const int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(s.box.y1)) - 1);
    const int64_t x_hi = std::min(size_x - 1, static_cast<int64_t>(std::ceil(s.box.x2)) + 1);
    const int64_t y_hi = std::min(size_y - 1, static_cast<int64_t>(std::ceil(s.box.y2)) + 1);
    constexpr int kSub = 4;
    for (int64_t y = y_lo; y <= y_hi; ++y) {
        for (int64_t x = x_lo; x <= x_hi; ++x) {
            int hit = 0;
            for (int sy = 0; sy < kSub; ++sy) {
                for (int sx = 0; sx < kSub; ++sx) {
                    const real px = static_cast<real>(x) + (sx + real(0.5)) / kSub;
                    const real py = static_cast<real>(y) + (sy + real(0.5)) / kSub;
                    if (point_inside(s, px, py)) ++hit;
                }
            }
            if (hit == 0) continue;
            const real alpha = static_cast<real>(hit) / (kSub * kSub);
            for (int64_t c = 0; c < 3; ++c) {
                img.at(c, y, x) += alpha * (s.color[c] - img.at(c, y, x));
            }
        }
    }
}

}  // namespace

void ShapesSpec::validate() const {
    if (num_images < 0) throw std::invalid_argument("ShapesSpec: num_images < 0");
    if (val_quota() > num_images) throw std::invalid_argument("ShapesSpec: val_images > num_images");
    if (image_size < 16) throw std::invalid_argument("ShapesSpec: image_size too small");
    if (num_classes < 1 || num_classes > kMaxShapeClasses) {
        throw std::invalid_argument("ShapesSpec: num_classes must be in [1,5]");
    }
    if (min_objects < 0 || max_objects < min_objects) {
        throw std::invalid_argument("ShapesSpec: bad objects-per-image range");
    }
    if (min_size < 4 || max_size < min_size) {
        throw std::invalid_argument("ShapesSpec: bad size range");
    }
    if (max_size + 2 * kMargin >= static_cast<real>(image_size)) {
        throw std::invalid_argument("ShapesSpec: max_size does not fit in image_size");
    }
    if (max_overlap_iou < 0 || max_overlap_iou > 1 || color_jitter < 0 || noise_sigma < 0) {
        throw std::invalid_argument("ShapesSpec: bad jitter/overlap/noise value");
    }
}

const char* shape_class_name(int cls) {
    static const char* names[kMaxShapeClasses] = {"circle", "square", "triangle", "diamond",
                                                  "cross"};
    if (cls < 0 || cls >= kMaxShapeClasses) throw std::out_of_range("shape_class_name");
    return names[cls];
}

Sample generate_shape_sample(const ShapesSpec& spec, const std::string& id) {
    spec.validate();
    Rng rng = Rng::stream(spec.seed, "image:" + id);
    const int64_t sz = spec.image_size;

    Tensor img({3, sz, sz});
    real bg[3];
    for (auto& c : bg) c = rng.uniform(0.08, 0.20);
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < sz; ++y) {
            for (int64_t x = 0; x < sz; ++x) img.at(c, y, x) = bg[c];
        }
    }

    const int64_t want = rng.uniform_int(spec.min_objects, spec.max_objects);
    std::vector<ShapeInstance> placed;
    Sample out;
    out.id = id;
    for (int64_t i = 0; i < want; ++i) {
        ShapeInstance s;
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            s.cls = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
            s.size = rng.uniform(spec.min_size, spec.max_size);
            const real lo = s.size / 2 + kMargin;
            const real hi = static_cast<real>(sz) - s.size / 2 - kMargin;
            s.cx = rng.uniform(lo, hi);
            s.cy = rng.uniform(lo, hi);
            s.theta = rng.uniform(0, 2 * M_PI);
            s.box = shape_box(s);
            ok = true;
            for (const auto& p : placed) {
                if (box_iou(s.box, p.box) > spec.max_overlap_iou) {
                    ok = false;
                    break;
                }
            }
        }
        if (!ok) continue;
        for (int c = 0; c < 3; ++c) {
            s.color[c] = std::clamp(
                kPalette[s.cls][c] + rng.uniform(-spec.color_jitter, spec.color_jitter), real(0),
                real(1));
        }
        render(img, s);
        placed.push_back(s);
        out.targets.boxes.push_back(s.box);
        out.targets.labels.push_back(s.cls);
    }

    if (spec.noise_sigma > 0) {
        for (auto& v : img.vec()) {
            v = std::clamp(v + rng.normal(0, spec.noise_sigma), real(0), real(1));
        }
    }
    out.image = std::move(img);
    return out;
}

Dataset generate_shapes(const ShapesSpec& spec) {
    spec.validate();
    Dataset ds;
    const int64_t val_quota = spec.val_quota();
    const int64_t train_quota = spec.num_images - val_quota;
    for (int64_t i = 0; i < spec.num_images; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "shapes_%06lld", static_cast<long long>(i));
        const std::string id(buf);
        const bool hash_val = fnv1a_str(id) % 10 == 0;
        const int64_t val_n = static_cast<int64_t>(ds.val.size());
        const int64_t train_n = static_cast<int64_t>(ds.train.size());
        bool to_val;
        if (hash_val) {
            to_val = val_n < val_quota;
        } else {
            to_val = train_n >= train_quota;
        }
        auto& split = to_val ? ds.val : ds.train;
        split.push_back(generate_shape_sample(spec, id));
    }
    return ds;
}

Tensor resize_bilinear(const Tensor& chw, int64_t out_h, int64_t out_w) {
    if (chw.rank() != 3) throw std::invalid_argument("resize_bilinear: expected (C,H,W)");
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: bad output size");
    const int64_t ch = chw.size(0), in_h = chw.size(1), in_w = chw.size(2);
    if (in_h <= 0 || in_w <= 0) throw std::invalid_argument("resize_bilinear: empty input");
    Tensor out({ch, out_h, out_w});
    const real sy = static_cast<real>(in_h) / static_cast<real>(out_h);
    const real sx = static_cast<real>(in_w) / static_cast<real>(out_w);
    for (int64_t y = 0; y < out_h; ++y) {
        real fy = (static_cast<real>(y) + real(0.5)) * sy - real(0.5);
        fy = std::clamp(fy, real(0), static_cast<real>(in_h - 1));
        const int64_t y0 = static_cast<int64_t>(fy);
        const int64_t y1 = std::min(y0 + 1, in_h - 1);
        const real wy = fy - static_cast<real>(y0);
        for (int64_t x = 0; x < out_w; ++x) {
            real fx = (static_cast<real>(x) + real(0.5)) * sx - real(0.5);
            fx = std::clamp(fx, real(0), static_cast<real>(in_w - 1));
            const int64_t x0 = static_cast<int64_t>(fx);
            const int64_t x1 = std::min(x0 + 1, in_w - 1);
            const real wx = fx - static_cast<real>(x0);
            for (int64_t c = 0; c < ch; ++c) {
                const real top = chw.at(c, y0, x0) * (1 - wx) + chw.at(c, y0, x1) * wx;
                const real bot = chw.at(c, y1, x0) * (1 - wx) + chw.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Sample resize_sample(const Sample& s, std::pair<int, int> short_range, int long_max, Rng& rng) {
    if (short_range.first <= 0 || short_range.second < short_range.first || long_max <= 0) {
        throw std::invalid_argument("resize_sample: bad size arguments");
    }
    const int64_t h = s.height(), w = s.width();
    if (h <= 0 || w <= 0) throw std::invalid_argument("resize_sample: empty image");
    const int64_t target_short = rng.uniform_int(short_range.first, short_range.second);
    const real short_side = static_cast<real>(std::min(h, w));
    const real long_side = static_cast<real>(std::max(h, w));
    real f = static_cast<real>(target_short) / short_side;
    f = std::min(f, static_cast<real>(long_max) / long_side);
    const int64_t nh = std::max<int64_t>(1, std::llround(static_cast<real>(h) * f));
    const int64_t nw = std::max<int64_t>(1, std::llround(static_cast<real>(w) * f));
    const real fy = static_cast<real>(nh) / static_cast<real>(h);
    const real fx = static_cast<real>(nw) / static_cast<real>(w);

    Sample out;
    out.id = s.id;
    out.image = resize_bilinear(s.image, nh, nw);
    out.targets.labels = s.targets.labels;
    out.targets.boxes.reserve(s.targets.boxes.size());
    for (const auto& b : s.targets.boxes) {
        Box nb{b.x1 * fx, b.y1 * fy, b.x2 * fx, b.y2 * fy};
        out.targets.boxes.push_back(nb.clipped(static_cast<real>(nw), static_cast<real>(nh)));
    }
    return out;
}

Sample pad_to_multiple(const Sample& s, int64_t multiple) {
    if (multiple <= 0) throw std::invalid_argument("pad_to_multiple: multiple must be positive");
    const int64_t h = s.height(), w = s.width();
    const int64_t ph = (h + multiple - 1) / multiple * multiple;
    const int64_t pw = (w + multiple - 1) / multiple * multiple;
    if (ph == h && pw == w) return s;
    Sample out;
    out.id = s.id;
    out.targets = s.targets;
    out.image = Tensor({3, ph, pw});
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, x);
        }
    }
    return out;
}

Sample hflip_sample(const Sample& s) {
    const int64_t h = s.height(), w = s.width();
    Sample out;
    out.id = s.id;
    out.image = Tensor({3, h, w});
    for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
        }
    }
    out.targets.labels = s.targets.labels;
    out.targets.boxes.reserve(s.targets.boxes.size());
    const real rw = static_cast<real>(w);
    for (const auto& b : s.targets.boxes) {
        out.targets.boxes.push_back({rw - b.x2, b.y1, rw - b.x1, b.y2});
    }
    return out;
}

}  // namespace headkd::data
