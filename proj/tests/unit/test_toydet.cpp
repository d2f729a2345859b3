#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "headkd/checkpoint.hpp"
#include "headkd/toydet.hpp"
#include "test_util.hpp"

using namespace headkd;
using namespace headkd::toydet;
using testutil::uniform_tensor;

namespace {

DetectorConfig small_config(const std::string& family) {
    DetectorConfig cfg;
    cfg.family = family;
    cfg.channels = 16;
    cfg.rcnn_width = 32;
    cfg.num_classes = 3;
    cfg.min_level = 3;
    cfg.max_level = 4;
    cfg.num_convs = 1;
    cfg.anchors.base = 2.0;
    cfg.point_range_breaks = {32};
    cfg.roi_align_size = 3;
    cfg.proposals.pre_nms_topk = 50;
    cfg.proposals.post_nms_n = 32;
    return cfg;
}

Targets two_boxes() {
    Targets t;
    t.boxes = {{8, 8, 28, 30}, {34, 20, 58, 44}};
    t.labels = {0, 2};
    return t;
}

}  // namespace

TEST_SUITE_BEGIN("toydet");

TEST_CASE("make_anchors places squares at half-pixel cell centers") {
    AnchorConfig cfg;
    cfg.base = 2.0;
    cfg.scales = {1.0, 2.0};
    const int64_t h = 3, w = 4, stride = 8;
    auto anchors = make_anchors(h, w, stride, cfg);
    REQUIRE(anchors.size() == static_cast<size_t>(2 * h * w));
    for (int64_t s = 0; s < 2; ++s) {
        const real side = cfg.base * cfg.scales[static_cast<size_t>(s)] * stride;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const Box& a = anchors[static_cast<size_t>((s * h + y) * w + x)];
                CHECK(a.cx() == doctest::Approx((static_cast<real>(x) + 0.5) * stride));
                CHECK(a.cy() == doctest::Approx((static_cast<real>(y) + 0.5) * stride));
                CHECK(a.w() == doctest::Approx(side));
                CHECK(a.h() == doctest::Approx(side));
            }
        }
    }
}

TEST_CASE("assign_by_iou thresholds and best-anchor rescue") {
    Targets t;
    t.boxes = {{0, 0, 10, 10}};
    t.labels = {1};
    // exact IoUs: 1.0 (fg), 10*6/(100+100-60)=0.428 (ignore band), tiny (bg)
    std::vector<Box> anchors = {{0, 0, 10, 10}, {0, 4, 10, 14}, {40, 40, 50, 50}};
    auto a = assign_by_iou(anchors, t, 0.5, 0.4);
    CHECK(a.label[0] == 1);
    CHECK(a.matched_gt[0] == 0);
    CHECK(a.label[1] == -2);
    CHECK(a.label[2] == -1);

    SUBCASE("gt below fg threshold still claims its best anchor") {
        Targets small;
        small.boxes = {{0, 0, 4, 4}};
        small.labels = {2};
        auto b = assign_by_iou(anchors, small, 0.5, 0.4);
        CHECK(b.label[0] == 2);  // best anchor despite IoU 0.16
        CHECK(b.matched_gt[0] == 0);
    }

    SUBCASE("empty targets give all background") {
        auto c = assign_by_iou(anchors, Targets{}, 0.5, 0.4);
        for (int v : c.label) CHECK(v == -1);
    }
}

TEST_CASE("assign_points uses containment, range bands, and min-area ties") {
    Targets t;
    t.boxes = {{0, 0, 40, 40}, {10, 10, 26, 26}};
    t.labels = {0, 1};
    std::vector<std::pair<real, real>> centers = {
        {18, 18},   // inside both; smaller box wins
        {4, 4},     // inside outer box only; max distance 36 exceeds hi=32
        {100, 100}  // outside everything
    };
    auto a = assign_points(centers, t, 0, 32);
    CHECK(a.matched_gt[0] == 1);
    CHECK(a.matched_gt[1] == -1);
    CHECK(a.matched_gt[2] == -1);
    // centerness at (18,18) in box 1: l=8 r=8 t=8 b=8 -> 1.0
    CHECK(a.centerness[0] == doctest::Approx(1.0));

    // the same point lands in the outer box once the band admits distance 36
    auto b = assign_points({{4, 4}}, t, 32, 128);
    CHECK(b.matched_gt[0] == 0);
    // inside the outer box only, max distance 30 stays in the low band
    auto c = assign_points({{30, 20}}, t, 0, 32);
    CHECK(c.matched_gt[0] == 0);
}

TEST_CASE("detector families expose the right heads and parameters") {
    Detector dense(small_config("dense"), 7);
    CHECK(dense.dense() != nullptr);
    CHECK(dense.point() == nullptr);
    CHECK(dense.rpn() == nullptr);
    CHECK(dense.rcnn() == nullptr);

    Detector point(small_config("point"), 7);
    CHECK(point.point() != nullptr);
    CHECK(point.dense() == nullptr);

    Detector two(small_config("two_stage"), 7);
    CHECK(two.rpn() != nullptr);
    CHECK(two.rcnn() != nullptr);

    auto names = nn::param_names(dense.params());
    CHECK(!names.empty());
    bool has_backbone = false, has_head = false;
    for (const auto& n : names) {
        if (n.rfind("backbone.", 0) == 0) has_backbone = true;
        if (n.rfind("head.", 0) == 0) has_head = true;
    }
    CHECK(has_backbone);
    CHECK(has_head);

    CHECK_THROWS_AS(Detector(small_config("cascade"), 7), std::exception);
}

TEST_CASE("same seed gives identical parameters, different seed differs") {
    auto cfg = small_config("dense");
    Detector a(cfg, 11), b(cfg, 11), c(cfg, 12);
    CHECK(nn::param_checksum(a.params()) == nn::param_checksum(b.params()));
    CHECK(nn::param_checksum(a.params()) != nn::param_checksum(c.params()));
}

TEST_CASE("gt_loss terms per family, finite and deterministic") {
    Rng rng(21);
    Tensor image = uniform_tensor({3, 64, 64}, rng, 0, 1);
    Targets t = two_boxes();

    struct Case {
        const char* family;
        std::vector<std::string> terms;
    };
    for (const auto& c : {Case{"dense", {"gt_cls", "gt_reg"}},
                          Case{"point", {"gt_cls", "gt_ctr", "gt_reg"}},
                          Case{"two_stage",
                               {"gt_rpn_obj", "gt_rpn_reg", "gt_rcnn_cls", "gt_rcnn_reg"}}}) {
        CAPTURE(c.family);
        Detector det(small_config(c.family), 3);
        LossReport r1 = det.gt_loss(Var::constant(image), t);
        LossReport r2 = det.gt_loss(Var::constant(image), t);
        REQUIRE(r1.terms().size() == c.terms.size());
        for (const auto& name : c.terms) {
            CAPTURE(name);
            REQUIRE(r1.has(name));
            const real v = r1.term(name).value.val().item();
            CHECK(std::isfinite(v));
            CHECK(v >= 0);
            CHECK(r2.term(name).value.val().item() == v);
        }
    }
}

TEST_CASE("gt_loss backward moves every trainable parameter family") {
    Rng rng(22);
    Tensor image = uniform_tensor({3, 64, 64}, rng, 0, 1);
    Targets t = two_boxes();
    for (const char* family : {"dense", "point", "two_stage"}) {
        CAPTURE(family);
        Detector det(small_config(family), 5);
        LossReport rep = det.gt_loss(Var::constant(image), t);
        backward(rep.total_var());
        int with_grad = 0, total = 0;
        for (auto& [name, p] : det.params()) {
            ++total;
            if (p.has_grad()) {
                real mag = 0;
                for (int64_t i = 0; i < p.grad().numel(); ++i) mag += std::abs(p.grad()[i]);
                if (mag > 0) ++with_grad;
            }
        }
        // prediction layers whose branch saw no positives may stay silent;
        // the overwhelming majority of parameters must receive gradient
        CHECK(with_grad >= total * 3 / 4);
        for (auto& [name, p] : det.params()) p.zero_grad();
    }
}

TEST_CASE("gt_loss gradient spot checks by finite differences") {
    Rng rng(23);
    Tensor image = uniform_tensor({3, 32, 32}, rng, 0, 1);
    Targets t;
    t.boxes = {{6, 6, 22, 24}};
    t.labels = {1};
    for (const char* family : {"dense", "point", "two_stage"}) {
        CAPTURE(family);
        auto cfg = small_config(family);
        cfg.max_level = 3;  // single level keeps the probe cheap
        cfg.point_range_breaks = {};
        cfg.proposals.post_nms_n = 8;
        cfg.proposals.pre_nms_topk = 16;
        Detector det(cfg, 9);
        auto params = det.params();
        // Dense and point losses are differentiable end to end, so probe the
        // earliest backbone parameter. The two-stage loss treats decoded
        // proposal boxes as fixed (only features carry gradient through RoI
        // align), so finite differences on upstream weights would pick up the
        // deliberately untracked coordinate sensitivity; probe the RCNN head
        // instead, which sits entirely downstream of proposal selection.
        Var leaf = std::string(family) == "two_stage" ? params.at("rcnn.fc1.w")
                                                      : params.begin()->second;
        auto res = testutil::check_gradient(
            [&] { return det.gt_loss(Var::constant(image), t).total_var(); }, leaf, 5, rng, 1e-5,
            5e-3);
        CHECK_MESSAGE(res.ok(), std::string(family), ": ", res.detail);
    }
}

TEST_CASE("heads_homogeneous compares family and tap-shaping fields") {
    auto a = small_config("two_stage");
    auto b = small_config("two_stage");
    CHECK(heads_homogeneous(a, b));
    b.rcnn_width = 64;
    CHECK_FALSE(heads_homogeneous(a, b));
    b = a;
    b.family = "dense";
    CHECK_FALSE(heads_homogeneous(a, b));
    auto c = small_config("dense");
    auto d = small_config("dense");
    d.channels = 32;
    CHECK_FALSE(heads_homogeneous(c, d));
    d = c;
    d.num_classes = 5;
    CHECK_FALSE(heads_homogeneous(c, d));
}

TEST_CASE("detector checkpoint round-trip is bitwise") {
    const std::string dir = (std::filesystem::temp_directory_path() / "hk_ckpt_rt").string();
    std::filesystem::remove_all(dir);
    Detector det(small_config("two_stage"), 31);
    save_detector(det, dir);
    Detector back = load_detector(dir);
    CHECK(back.family() == "two_stage");
    CHECK(nn::param_checksum(back.params()) == nn::param_checksum(det.params()));
    CHECK(config_to_json(back.config()) == config_to_json(det.config()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("load_params is strict about names and shapes") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "hk_params_strict.bin").string();
    Rng rng(41);
    nn::ParamMap saved{{"w", Var::leaf(uniform_tensor({3, 3}, rng), true)},
                       {"b", Var::leaf(uniform_tensor({3}, rng), true)}};
    save_params(saved, path);

    nn::ParamMap wrong_shape{{"w", Var::leaf(Tensor::zeros({3, 4}), true)},
                             {"b", Var::leaf(Tensor::zeros({3}), true)}};
    CHECK_THROWS(load_params(wrong_shape, path));

    nn::ParamMap missing{{"w", Var::leaf(Tensor::zeros({3, 3}), true)}};
    CHECK_THROWS(load_params(missing, path));

    nn::ParamMap extra{{"w", Var::leaf(Tensor::zeros({3, 3}), true)},
                       {"b", Var::leaf(Tensor::zeros({3}), true)},
                       {"c", Var::leaf(Tensor::zeros({1}), true)}};
    CHECK_THROWS(load_params(extra, path));
    std::filesystem::remove(path);
}

TEST_CASE("inference yields clipped, sorted, capped detections") {
    Rng rng(51);
    Tensor image = uniform_tensor({3, 64, 64}, rng, 0, 1);
    InferenceConfig icfg;
    icfg.score_thresh = 0.0;
    icfg.max_dets = 20;
    for (const char* family : {"dense", "point", "two_stage"}) {
        CAPTURE(family);
        Detector det(small_config(family), 13);
        Detections d = det.infer(Var::constant(image), icfg);
        d.validate();
        CHECK(d.size() <= icfg.max_dets);
        for (int64_t i = 0; i < d.size(); ++i) {
            const Box& b = d.boxes[static_cast<size_t>(i)];
            CHECK(b.valid());
            CHECK(b.x1 >= 0);
            CHECK(b.y1 >= 0);
            CHECK(b.x2 <= 64);
            CHECK(b.y2 <= 64);
            CHECK(d.labels[static_cast<size_t>(i)] >= 0);
            CHECK(d.labels[static_cast<size_t>(i)] < 3);
            if (i > 0) CHECK(d.scores[static_cast<size_t>(i)] <= d.scores[static_cast<size_t>(i - 1)]);
            CHECK(d.scores[static_cast<size_t>(i)] >= icfg.score_thresh);
        }
    }
}

TEST_CASE("config json round-trip and validation") {
    auto cfg = small_config("two_stage");
    cfg.point_range_breaks = {24};
    auto back = config_from_json(config_to_json(cfg));
    CHECK(config_to_json(back) == config_to_json(cfg));

    CHECK_THROWS(config_from_json("{\"family\":\"dense\"}"));  // missing required fields
    auto bad = small_config("dense");
    bad.min_level = 5;
    bad.max_level = 3;
    CHECK_THROWS(bad.validate());
}

TEST_SUITE_END();
