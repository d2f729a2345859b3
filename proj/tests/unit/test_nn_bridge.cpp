#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "headkd/bridge.hpp"
#include "headkd/nn.hpp"
#include "headkd/toydet.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace headkd;
using testutil::uniform_tensor;

TEST_SUITE_BEGIN("nn");

TEST_CASE("sgd follows the momentum + weight decay recurrence") {
    const real momentum = 0.9, wd = 1e-2, lr = 0.1;
    Var p = Var::leaf(Tensor({2}, {1.0, -2.0}), true);
    nn::ParamMap params{{"p", p}};
    nn::Sgd opt(momentum, wd);

    std::vector<real> w{1.0, -2.0};
    std::vector<real> v{0.0, 0.0};
    std::vector<real> grads{0.5, -1.0};

    for (int step = 0; step < 4; ++step) {
        p.zero_grad();
        for (int i = 0; i < 2; ++i) p.grad()[i] = grads[static_cast<size_t>(i)] * (step + 1);
        opt.step(params, lr);
        for (int i = 0; i < 2; ++i) {
            const real g = grads[static_cast<size_t>(i)] * (step + 1) + wd * w[static_cast<size_t>(i)];
            v[static_cast<size_t>(i)] = momentum * v[static_cast<size_t>(i)] + g;
            w[static_cast<size_t>(i)] -= lr * v[static_cast<size_t>(i)];
            CHECK(p.val()[i] == doctest::Approx(w[static_cast<size_t>(i)]).epsilon(1e-14));
        }
    }
}

TEST_CASE("sgd skips frozen parameters") {
    Var p = Var::leaf(Tensor::scalar(1.0), true);
    p.grad()[0] = 1.0;
    p.set_requires_grad(false);
    nn::ParamMap params{{"p", p}};
    nn::Sgd opt(0.9, 0.0);
    opt.step(params, 0.1);
    CHECK(p.val().item() == 1.0);
}

TEST_CASE("param checksum reacts to any bit flip") {
    Rng rng(1);
    Var a = Var::leaf(uniform_tensor({3, 3}, rng), true);
    Var b = Var::leaf(uniform_tensor({4}, rng), true);
    nn::ParamMap params{{"a", a}, {"b", b}};
    const uint64_t before = nn::param_checksum(params);
    CHECK(before == nn::param_checksum(params));
    a.val_mut()[4] = std::nextafter(a.val()[4], real(2));
    CHECK(before != nn::param_checksum(params));
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("bridge");

TEST_CASE("box delta encode/decode round-trips") {
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
        Box anchor;
        anchor.x1 = rng.uniform(0, 80);
        anchor.y1 = rng.uniform(0, 80);
        anchor.x2 = anchor.x1 + rng.uniform(4, 40);
        anchor.y2 = anchor.y1 + rng.uniform(4, 40);
        Box target;
        target.x1 = rng.uniform(0, 80);
        target.y1 = rng.uniform(0, 80);
        target.x2 = target.x1 + rng.uniform(2, 50);
        target.y2 = target.y1 + rng.uniform(2, 50);
        real d[4];
        bridge::encode_box(anchor, target, d);
        Box back = bridge::decode_box(anchor, d[0], d[1], d[2], d[3]);
        CHECK(back.x1 == doctest::Approx(target.x1).epsilon(1e-9));
        CHECK(back.y1 == doctest::Approx(target.y1).epsilon(1e-9));
        CHECK(back.x2 == doctest::Approx(target.x2).epsilon(1e-9));
        CHECK(back.y2 == doctest::Approx(target.y2).epsilon(1e-9));
    }
}

TEST_CASE("objectness is the class-wise max per slot") {
    Rng rng(3);
    const int64_t slots = 2, k = 3, h = 4, w = 5;
    Tensor cls = uniform_tensor({slots * k, h, w}, rng, -3, 3);
    Tensor obj = bridge::objectness_from_dense(cls, k);
    REQUIRE(obj.shape() == Shape{slots, h, w});
    for (int64_t s = 0; s < slots; ++s) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                real m = cls.at(s * k, y, x);
                for (int64_t c = 1; c < k; ++c) m = std::max(m, cls.at(s * k + c, y, x));
                CHECK(obj.at(s, y, x) == m);
            }
        }
    }
}

TEST_CASE("greedy nms equals the quadratic reference") {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Box> boxes;
        const int n = static_cast<int>(rng.uniform_int(1, 60));
        for (int i = 0; i < n; ++i) {
            Box b;
            b.x1 = rng.uniform(0, 90);
            b.y1 = rng.uniform(0, 90);
            b.x2 = b.x1 + rng.uniform(2, 30);
            b.y2 = b.y1 + rng.uniform(2, 30);
            boxes.push_back(b);
        }
        const real thresh = rng.uniform(0.2, 0.8);
        CHECK(bridge::greedy_nms(boxes, thresh) == oracle::nms_ref(boxes, thresh));
    }
}

namespace {

std::map<int, bridge::LevelDense> random_levels(Rng& rng, int min_level, int max_level,
                                                int64_t slots, int64_t base_hw) {
    std::map<int, bridge::LevelDense> levels;
    toydet::AnchorConfig acfg;
    acfg.base = 2.0;
    acfg.scales.resize(static_cast<size_t>(slots), 1.0);
    for (int64_t s = 0; s < slots; ++s) acfg.scales[static_cast<size_t>(s)] = 1.0 + 0.3 * static_cast<real>(s);
    for (int l = min_level; l <= max_level; ++l) {
        const int64_t stride = int64_t(1) << l;
        const int64_t h = std::max<int64_t>(2, base_hw >> (l - min_level));
        const int64_t w = h + 1;
        bridge::LevelDense ld;
        ld.num_slots = slots;
        ld.objectness = Var::constant(uniform_tensor({slots, h, w}, rng, -4, 4));
        ld.deltas = Var::constant(uniform_tensor({slots * 4, h, w}, rng, -0.7, 0.7));
        ld.anchors = toydet::make_anchors(h, w, stride, acfg);
        levels[l] = std::move(ld);
    }
    return levels;
}

}  // namespace

TEST_CASE("propose_rois matches the re-derived pipeline") {
    Rng rng(5);
    bridge::ProposalConfig cfg;
    cfg.pre_nms_topk = 40;
    cfg.post_nms_n = 48;
    cfg.nms_iou = 0.7;
    for (int trial = 0; trial < 25; ++trial) {
        auto levels = random_levels(rng, 3, 5, 3, 8);
        const real img_w = 8 * 8, img_h = 8 * 8;
        RoISet got = bridge::propose_rois(levels, img_w, img_h, cfg);
        auto want = oracle::propose_rois_ref(levels, img_w, img_h, cfg);
        REQUIRE(got.source.has_value());
        REQUIRE(got.size() == static_cast<int64_t>(want.size()));
        for (size_t i = 0; i < want.size(); ++i) {
            const Provenance& p = (*got.source)[i];
            CHECK(oracle::ProposalKey{p.level, p.y, p.x, p.slot} == want[i]);
        }
        // scores decode to sigmoid(objectness) in preference order
        for (size_t i = 1; i < want.size(); ++i) CHECK(got.scores[i] <= got.scores[i - 1]);
    }
}

TEST_CASE("assign_fpn_level follows the k0 + log2 rule with clamping") {
    auto box_of_side = [](real side) { return Box{0, 0, side, side}; };
    CHECK(bridge::assign_fpn_level(box_of_side(224), 2, 6) == 4);
    CHECK(bridge::assign_fpn_level(box_of_side(448), 2, 6) == 5);
    CHECK(bridge::assign_fpn_level(box_of_side(112), 2, 6) == 3);
    CHECK(bridge::assign_fpn_level(box_of_side(1e5), 2, 6) == 6);
    CHECK(bridge::assign_fpn_level(box_of_side(1), 2, 6) == 2);
    CHECK(bridge::assign_fpn_level(Box{3, 3, 3, 3}, 2, 6) == 2);
}

TEST_CASE("roi_align on a constant map returns the constant") {
    FeatureMap fmap{Var::constant(Tensor::full({3, 10, 12}, 2.5)), 8};
    std::vector<Box> boxes{{8, 8, 40, 56}, {0, 0, 96, 80}};
    Tensor out = bridge::roi_align(fmap, boxes, 4).val();
    REQUIRE(out.shape() == Shape{2, 3, 4, 4});
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("roi_align reproduces a linear ramp exactly") {
    // Bilinear interpolation is exact on affine functions, so pooling a ramp
    // must return the ramp value at each sample-point average.
    const int64_t h = 16, w = 16, stride = 4;
    Tensor ramp({1, h, w});
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) ramp.at(0, y, x) = 3.0 * static_cast<real>(x) + 0.5 * static_cast<real>(y);
    }
    FeatureMap fmap{Var::constant(ramp), stride};
    // interior box so no samples need edge clamping
    Box roi{8, 8, 40, 48};
    const int64_t out_size = 2;
    Tensor out = bridge::roi_align(fmap, {roi}, out_size).val();

    const real cell_w = roi.w() / static_cast<real>(out_size) / stride;
    const real cell_h = roi.h() / static_cast<real>(out_size) / stride;
    const real x0 = roi.x1 / stride - 0.5, y0 = roi.y1 / stride - 0.5;
    for (int64_t cy = 0; cy < out_size; ++cy) {
        for (int64_t cx = 0; cx < out_size; ++cx) {
            // 2x2 sample grid at quarter offsets inside the cell
            real acc = 0;
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    const real fy = y0 + (static_cast<real>(cy) + (sy + 0.5) / 2) * cell_h;
                    const real fx = x0 + (static_cast<real>(cx) + (sx + 0.5) / 2) * cell_w;
                    acc += 3.0 * fx + 0.5 * fy;
                }
            }
            CHECK(out.at(0, 0, cy, cx) == doctest::Approx(acc / 4).epsilon(1e-9));
        }
    }
}

TEST_CASE("roi_align gradients reach the feature map") {
    Rng rng(6);
    Var feats = Var::leaf(uniform_tensor({4, 8, 8}, rng), true);
    FeatureMap fmap{feats, 8};
    std::vector<Box> boxes{{4, 4, 36, 30}, {10, 20, 60, 62}};
    Tensor coeffs = uniform_tensor({2, 4, 3, 3}, rng);
    auto res = testutil::check_gradient(
        [&] { return sum_all(mul(bridge::roi_align(fmap, boxes, 3), Var::constant(coeffs))); },
        feats, 12, rng);
    CHECK_MESSAGE(res.ok(), res.detail);
}

TEST_CASE("roi_align_pyramid routes each box to its assigned level") {
    Rng rng(7);
    FeaturePyramid pyr;
    std::map<int, Tensor> planes;
    for (int l = 3; l <= 5; ++l) {
        Tensor t = Tensor::full({2, 8, 8}, static_cast<real>(l));
        planes[l] = t;
        pyr.levels[l] = {Var::constant(t), int64_t(1) << l};
    }
    RoISet rois;
    rois.boxes = {{0, 0, 20, 20}, {0, 0, 300, 300}};  // clamp to min and max levels
    rois.scores = {0.9, 0.8};
    rois.level = {3, 5};
    Tensor out = bridge::roi_align_pyramid(pyr, rois, 2).val();
    const int la = bridge::assign_fpn_level(rois.boxes[0], 3, 5);
    const int lb = bridge::assign_fpn_level(rois.boxes[1], 3, 5);
    CHECK(out.at(0, 0) == doctest::Approx(static_cast<real>(la)));
    CHECK(out.at(1, 0) == doctest::Approx(static_cast<real>(lb)));
}

TEST_CASE("trace_rois_to_anchor_features gathers provenance pixels bitwise") {
    Rng rng(8);
    std::map<int, Var> taps;
    const int64_t c = 5;
    for (int l = 3; l <= 5; ++l) {
        taps[l] = Var::leaf(uniform_tensor({c, 6, 7}, rng), true);
    }
    RoISet rois;
    rois.source.emplace();
    for (int i = 0; i < 50; ++i) {
        const int level = static_cast<int>(rng.uniform_int(3, 5));
        Provenance p;
        p.level = level;
        p.y = rng.uniform_int(0, 5);
        p.x = rng.uniform_int(0, 6);
        p.slot = static_cast<int>(rng.uniform_int(0, 2));
        rois.source->push_back(p);
        rois.boxes.push_back({0, 0, 10, 10});
        rois.scores.push_back(rng.uniform(0, 1));
        rois.level.push_back(level);
    }
    Var traced = bridge::trace_rois_to_anchor_features(rois, taps);
    REQUIRE(traced.shape() == Shape{50, c});
    for (int64_t n = 0; n < 50; ++n) {
        const Provenance& p = (*rois.source)[static_cast<size_t>(n)];
        for (int64_t ch = 0; ch < c; ++ch) {
            CHECK(traced.val().at(n, ch) == taps.at(p.level).val().at(ch, p.y, p.x));
        }
    }

    // gradient flows back into the right pixels only
    Var loss = mean_all(mul(traced, traced));
    backward(loss);
    for (int l = 3; l <= 5; ++l) {
        const Tensor& g = taps.at(l).grad();
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t y = 0; y < 6; ++y) {
                for (int64_t x = 0; x < 7; ++x) {
                    bool touched = false;
                    for (const Provenance& p : *rois.source) {
                        if (p.level == l && p.y == y && p.x == x) touched = true;
                    }
                    if (!touched) CHECK(g.at(ch, y, x) == 0);
                }
            }
        }
    }
}

TEST_CASE("trace refuses RoIs without provenance") {
    std::map<int, Var> taps{{3, Var::constant(Tensor::zeros({2, 4, 4}))}};
    RoISet rois;
    rois.boxes = {{0, 0, 5, 5}};
    rois.scores = {0.5};
    rois.level = {3};
    CHECK_THROWS_AS(bridge::trace_rois_to_anchor_features(rois, taps), std::invalid_argument);
}

TEST_SUITE_END();
