#include <benchmark/benchmark.h>

#include <map>
#include <vector>

#include "headkd/autograd.hpp"
#include "headkd/bridge.hpp"
#include "headkd/data.hpp"
#include "headkd/tensor.hpp"
#include "headkd/train.hpp"

namespace {

using namespace headkd;

Tensor random_tensor(Shape s, uint64_t seed) {
    Rng rng(seed);
    return rng.normal_tensor(std::move(s));
}

void bm_conv2d_forward(benchmark::State& state) {
    const int64_t c = state.range(0);
    Var x = Var::constant(random_tensor({c, 64, 64}, 1));
    Var w = Var::leaf(random_tensor({c, c, 3, 3}, 2), true);
    Var b = Var::leaf(random_tensor({c}, 3), true);
    for (auto _ : state) {
        NoGradGuard off;
        benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1).val().data());
    }
}
BENCHMARK(bm_conv2d_forward)->Arg(16)->Arg(64);

void bm_conv2d_backward(benchmark::State& state) {
    const int64_t c = state.range(0);
    Var w = Var::leaf(random_tensor({c, c, 3, 3}, 2), true);
    Var b = Var::leaf(random_tensor({c}, 3), true);
    Tensor img = random_tensor({c, 64, 64}, 1);
    for (auto _ : state) {
        Var x = Var::constant(img);
        Var loss = mean_all(conv2d(x, w, b, 1, 1));
        backward(loss);
        w.zero_grad();
        b.zero_grad();
    }
}
BENCHMARK(bm_conv2d_backward)->Arg(16)->Arg(64);

void bm_roi_align(benchmark::State& state) {
    FeatureMap fmap{Var::constant(random_tensor({64, 32, 32}, 4)), 8};
    Rng rng(7);
    std::vector<Box> boxes;
    for (int i = 0; i < 64; ++i) {
        real x1 = rng.uniform(0, 200), y1 = rng.uniform(0, 200);
        boxes.push_back({x1, y1, x1 + rng.uniform(8, 56), y1 + rng.uniform(8, 56)});
    }
    for (auto _ : state) {
        NoGradGuard off;
        benchmark::DoNotOptimize(bridge::roi_align(fmap, boxes, 7).val().data());
    }
}
BENCHMARK(bm_roi_align);

void bm_nms(benchmark::State& state) {
    Rng rng(11);
    std::vector<Box> boxes;
    for (int64_t i = 0; i < state.range(0); ++i) {
        real x1 = rng.uniform(0, 500), y1 = rng.uniform(0, 500);
        boxes.push_back({x1, y1, x1 + rng.uniform(4, 80), y1 + rng.uniform(4, 80)});
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(bridge::greedy_nms(boxes, 0.5));
    }
}
BENCHMARK(bm_nms)->Arg(256)->Arg(1024);

void bm_focal_loss(benchmark::State& state) {
    Var logits = Var::leaf(random_tensor({9, 64, 64}, 5), true);
    Rng rng(6);
    Tensor targets({9, 64, 64});
    Tensor mask = Tensor::full({9, 64, 64}, 1);
    for (int64_t i = 0; i < targets.numel(); ++i) targets[i] = rng.uniform(0, 1) < 0.01 ? 1 : 0;
    for (auto _ : state) {
        Var loss = sigmoid_focal_loss_sum(logits, targets, mask, 0.25, 2.0);
        backward(loss);
        logits.zero_grad();
    }
}
BENCHMARK(bm_focal_loss);

train::DistillPlan tiny_plan() {
    train::DistillPlan plan;
    plan.mode = "tf_head";
    plan.student.family = "dense";
    plan.student.channels = 32;
    plan.student.num_classes = 3;
    assistant::AssistantSpec point;
    point.name = "point";
    point.head = plan.student;
    point.head.family = "point";
    assistant::AssistantSpec rcnn;
    rcnn.name = "rcnn";
    rcnn.head = plan.student;
    rcnn.head.family = "two_stage";
    rcnn.head.rcnn_width = 128;
    plan.assistants = {point, rcnn};
    plan.data.shapes.num_images = 8;
    plan.data.shapes.val_images = 2;
    plan.data.shapes.image_size = 64;
    plan.data.shapes.min_size = 10;
    plan.data.shapes.max_size = 24;
    plan.normalize();
    return plan;
}

void bm_distill_step(benchmark::State& state) {
    auto plan = tiny_plan();
    auto models = train::build_models(plan);
    nn::Sgd opt(plan.schedule.momentum, plan.schedule.weight_decay);
    auto sample = data::generate_shape_sample(plan.data.shapes, "bench_0");
    std::vector<const data::Sample*> batch{&sample};
    for (auto _ : state) {
        benchmark::DoNotOptimize(train::distill_step(plan, batch, models, opt, 0));
    }
}
BENCHMARK(bm_distill_step)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
