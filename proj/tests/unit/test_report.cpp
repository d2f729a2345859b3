#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headkd/report.hpp"
#include "headkd/toydet.hpp"
#include "test_util.hpp"

using namespace headkd;
using namespace headkd::report;

TEST_CASE("activation map is the normalized channel-mean of magnitudes") {
    Tensor f({2, 2, 2});
    // channel means of |.|: [[1.5, 0.5], [2.5, 4.5]]
    f.at(0, 0, 0) = 1;
    f.at(1, 0, 0) = -2;
    f.at(0, 0, 1) = 0.5;
    f.at(1, 0, 1) = 0.5;
    f.at(0, 1, 0) = -3;
    f.at(1, 1, 0) = 2;
    f.at(0, 1, 1) = 4;
    f.at(1, 1, 1) = 5;
    Tensor m = activation_map(f);
    REQUIRE(m.rank() == 2);
    CHECK(m.at(0, 0) == doctest::Approx((1.5 - 0.5) / 4.0));
    CHECK(m.at(0, 1) == doctest::Approx(0.0));
    CHECK(m.at(1, 0) == doctest::Approx(0.5));
    CHECK(m.at(1, 1) == doctest::Approx(1.0));

    SUBCASE("constant input maps to zeros") {
        Tensor flat({3, 4, 4});
        for (auto& v : flat.vec()) v = 0.7;
        Tensor z = activation_map(flat);
        for (int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0);
    }
    SUBCASE("bad ranks throw") {
        CHECK_THROWS_AS(activation_map(Tensor({4, 4})), std::invalid_argument);
        CHECK_THROWS_AS(activation_map(Tensor({0, 4, 4})), std::invalid_argument);
    }
}

TEST_CASE("detector activation maps come out at feature resolution") {
    toydet::DetectorConfig cfg;
    cfg.family = "dense";
    cfg.channels = 16;
    cfg.num_classes = 3;
    cfg.min_level = 3;
    cfg.max_level = 4;
    cfg.num_convs = 1;
    cfg.point_range_breaks = {32};
    toydet::Detector det(cfg, 3);
    Rng rng(71);
    Tensor img = testutil::uniform_tensor({3, 50, 70}, rng);
    // image pads up to the max stride (16): 64 x 80
    Tensor m3 = detector_activation_map(det, img, 3);
    CHECK(m3.size(0) == 8);
    CHECK(m3.size(1) == 10);
    Tensor m4 = detector_activation_map(det, img, 4);
    CHECK(m4.size(0) == 4);
    CHECK(m4.size(1) == 5);
    for (int64_t i = 0; i < m3.numel(); ++i) {
        CHECK(m3[i] >= 0);
        CHECK(m3[i] <= 1);
    }
    // deterministic for a fixed detector and image
    Tensor again = detector_activation_map(det, img, 3);
    for (int64_t i = 0; i < m3.numel(); ++i) CHECK(again[i] == m3[i]);

    CHECK_THROWS_AS(detector_activation_map(det, img, 9), std::invalid_argument);
    CHECK_THROWS_AS(detector_activation_map(det, Tensor({1, 8, 8}), 3), std::invalid_argument);
}

TEST_CASE("colormap output is an rgb image sized as requested") {
    Tensor map01({4, 4});
    for (int64_t y = 0; y < 4; ++y) {
        for (int64_t x = 0; x < 4; ++x) map01.at(y, x) = (y * 4 + x) / 15.0;
    }
    Tensor img = colormap_image(map01, 32, 48);
    REQUIRE(img.rank() == 3);
    CHECK(img.size(0) == 3);
    CHECK(img.size(1) == 32);
    CHECK(img.size(2) == 48);
    for (int64_t i = 0; i < img.numel(); ++i) {
        CHECK(img[i] >= 0);
        CHECK(img[i] <= 1);
    }
    // jet-style ends: low values lean blue, high values lean red
    CHECK(img.at(2, 0, 0) > img.at(0, 0, 0));
    CHECK(img.at(0, 31, 47) > img.at(2, 31, 47));
    CHECK_THROWS_AS(colormap_image(Tensor({2, 4, 4}), 8, 8), std::invalid_argument);
}

TEST_CASE("cosine similarity basics") {
    Tensor a({4});
    Tensor b({4});
    for (int64_t i = 0; i < 4; ++i) {
        a[i] = i + 1.0;
        b[i] = (i + 1.0) * 2.5;
    }
    CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
    CHECK(cosine_similarity(a, b) == doctest::Approx(1.0));
    Tensor neg = b;
    for (auto& v : neg.vec()) v = -v;
    CHECK(cosine_similarity(a, neg) == doctest::Approx(-1.0));

    Tensor x({2}), y({2});
    x[0] = 1;
    x[1] = 0;
    y[0] = 0;
    y[1] = 1;
    CHECK(cosine_similarity(x, y) == doctest::Approx(0.0));

    Tensor z({2});  // zeros
    CHECK(cosine_similarity(x, z) == 0);
    Tensor longer({3});
    CHECK_THROWS_AS(cosine_similarity(x, longer), std::invalid_argument);
}

TEST_CASE("loss curve csv export mirrors the training log") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "hk_csv").string();
    fs::create_directories(dir);
    const std::string log = dir + "/log.jsonl";
    {
        std::ofstream out(log);
        for (int step = 0; step < 3; ++step) {
            LossReport rep;
            rep.add("gt_cls", Var::constant(Tensor::scalar(1.0 + step)), 1.0);
            rep.add("C_x", Var::constant(Tensor::scalar(0.5)), 2.0, step < 2);
            out << loss_report_json_line(rep, step,
                                         {{"epoch", step / 2.0}, {"lr", 0.01}})
                << "\n";
        }
    }
    const std::string csv = dir + "/curves.csv";
    loss_curves_csv(log, csv);

    std::ifstream in(csv);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "step,epoch,lr,gt_cls,gt_cls_enabled,C_x,C_x_enabled,total");
    // row 2 still has the masked term enabled; row 3 shows it disabled and
    // dropped from the total
    {
        std::stringstream ss(lines[3]);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 8);
        CHECK(cells[0] == "2");
        CHECK(std::stod(cells[3]) == doctest::Approx(3.0));
        CHECK(cells[4] == "1");
        CHECK(cells[6] == "0");
        CHECK(std::stod(cells[7]) == doctest::Approx(3.0));
    }
    {
        std::stringstream ss(lines[1]);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        CHECK(cells[6] == "1");
        CHECK(std::stod(cells[7]) == doctest::Approx(1.0 + 2.0 * 0.5));
    }

    SUBCASE("rows missing a term are an error") {
        std::ofstream out(log, std::ios::app);
        LossReport rep;
        rep.add("other", Var::constant(Tensor::scalar(1.0)), 1.0);
        out << loss_report_json_line(rep, 3) << "\n";
        out.close();
        CHECK_THROWS(loss_curves_csv(log, csv));
    }
    SUBCASE("missing or empty logs are an error") {
        CHECK_THROWS(loss_curves_csv(dir + "/absent.jsonl", csv));
        std::ofstream(dir + "/empty.jsonl").close();
        CHECK_THROWS(loss_curves_csv(dir + "/empty.jsonl", csv));
    }
    fs::remove_all(dir);
}

TEST_CASE("error analysis walks the four buckets on a hand-worked scene") {
    toydet::Targets gt;
    gt.boxes = {{10, 10, 30, 30}, {50, 50, 70, 70}, {90, 90, 110, 110}};
    gt.labels = {0, 0, 1};

    Detections det;
    // correct hit on the first object
    det.boxes.push_back({11, 11, 31, 31});
    det.labels.push_back(0);
    det.scores.push_back(0.9);
    // localization error near the second object (iou in (0.1, 0.5))
    det.boxes.push_back({58, 58, 78, 78});
    det.labels.push_back(0);
    det.scores.push_back(0.8);
    // pure background box
    det.boxes.push_back({200, 200, 220, 220});
    det.labels.push_back(0);
    det.scores.push_back(0.7);
    // exact box on the class-1 object, labeled 1: a correct hit for class 1
    det.boxes.push_back({90, 90, 110, 110});
    det.labels.push_back(1);
    det.scores.push_back(0.95);
    // duplicate hit on the first object counts as a localization error
    det.boxes.push_back({9, 9, 29, 29});
    det.labels.push_back(0);
    det.scores.push_back(0.6);

    ErrorReport rep = error_analysis({det}, {gt});
    const ErrorCounts& c0 = rep.per_class.at(0);
    CHECK(c0.correct == 1);
    CHECK(c0.loc == 2);
    CHECK(c0.background == 1);
    CHECK(c0.false_negative == 1);
    const ErrorCounts& c1 = rep.per_class.at(1);
    CHECK(c1.correct == 1);
    CHECK(c1.loc == 0);
    CHECK(c1.background == 0);
    CHECK(c1.false_negative == 0);
    CHECK(rep.all.correct == 2);
    CHECK(rep.all.loc == 2);
    CHECK(rep.all.background == 1);
    CHECK(rep.all.false_negative == 1);
    CHECK(rep.all.gt() == 3);
    CHECK(rep.all.fp() == 3);
    CHECK(rep.all.denom() == 6);

    SUBCASE("json rendering carries counts and fractions") {
        auto j = nlohmann::json::parse(error_report_json(rep));
        CHECK(j.at("all").at("counts").at("correct").get<int64_t>() == 2);
        CHECK(j.at("all").at("fractions").at("loc").get<double>() ==
              doctest::Approx(2.0 / 6.0));
        CHECK(j.at("per_class").contains("circle"));
        CHECK(j.at("per_class").contains("square"));
        CHECK(j.at("per_class").at("square").at("counts").at("correct").get<int64_t>() == 1);
    }
}

TEST_CASE("error analysis edge cases") {
    SUBCASE("image count mismatch throws") {
        CHECK_THROWS_AS(error_analysis({Detections{}}, {}), std::invalid_argument);
    }
    SUBCASE("perfect detections give zero error buckets") {
        toydet::Targets gt;
        gt.boxes = {{10, 10, 30, 30}};
        gt.labels = {0};
        Detections det;
        det.boxes.push_back({10, 10, 30, 30});
        det.labels.push_back(0);
        det.scores.push_back(1.0);
        ErrorReport rep = error_analysis({det}, {gt});
        CHECK(rep.all.correct == 1);
        CHECK(rep.all.denom() == 1);
    }
    SUBCASE("no detections means every object is a false negative") {
        toydet::Targets gt;
        gt.boxes = {{10, 10, 30, 30}, {40, 40, 60, 60}};
        gt.labels = {0, 2};
        ErrorReport rep = error_analysis({Detections{}}, {gt});
        CHECK(rep.all.false_negative == 2);
        CHECK(rep.all.correct == 0);
        CHECK(rep.all.denom() == 2);
    }
    SUBCASE("empty scene yields an empty report") {
        ErrorReport rep = error_analysis({Detections{}}, {toydet::Targets{}});
        CHECK(rep.all.denom() == 0);
        auto j = nlohmann::json::parse(error_report_json(rep));
        CHECK(j.at("all").at("fractions").at("correct").get<double>() == 0.0);
    }
}
