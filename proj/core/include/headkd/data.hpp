#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "headkd/tensor.hpp"
#include "headkd/toydet.hpp"

namespace headkd::data {

/// One detection sample: a (3,H,W) image in [0,1] plus ground-truth targets.
/// The image tensor may be empty (3,0,0) when a dataset is loaded
/// annotations-only (e.g. for offline error analysis).
struct Sample {
    Tensor image;
    toydet::Targets targets;
    std::string id;

    int64_t height() const { return image.size(1); }
    int64_t width() const { return image.size(2); }
};

/// Recipe for the synthetic shapes dataset. Class identity is geometry
/// (circle, square, triangle, diamond, cross); each class has a fixed base
/// color that is jittered per object. Generation is deterministic: every
/// image is drawn from its own RNG stream keyed by (seed, id), so the pixel
/// content of "shapes_000017" never depends on how many images surround it.
struct ShapesSpec {
    int64_t num_images = 2200;
    /// Images routed to the validation split. Ids whose FNV-1a hash lands in
    /// the val bucket (hash % 10 == 0) go first; the quota keeps the split
    /// sizes exact. Defaults to num_images / 10 when negative.
    int64_t val_images = -1;
    int64_t image_size = 128;
    int num_classes = 3;
    int min_objects = 1;
    int max_objects = 6;
    real min_size = 14;
    real max_size = 48;
    /// Candidate boxes overlapping an already placed box by more than this
    /// IoU are rejected (a few retries, then the object is dropped).
    real max_overlap_iou = 0.3;
    real color_jitter = 0.15;
    real noise_sigma = 0.02;
    uint64_t seed = 0;

    int64_t val_quota() const { return val_images >= 0 ? val_images : num_images / 10; }
    void validate() const;
};

static constexpr int kMaxShapeClasses = 5;

const char* shape_class_name(int cls);

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

/// Renders a single image deterministically from (spec.seed, id).
Sample generate_shape_sample(const ShapesSpec& spec, const std::string& id);

/// Generates spec.num_images samples with ids shapes_000000.. and splits them
/// into train/val by id hash (val quota exact, see ShapesSpec::val_images).
Dataset generate_shapes(const ShapesSpec& spec);

/// Bilinear resize of a (C,H,W) tensor with half-pixel sampling.
Tensor resize_bilinear(const Tensor& chw, int64_t out_h, int64_t out_w);

/// Scales the sample so the shorter side lands on a value drawn uniformly
/// from short_range (inclusive), capping the factor so the longer side stays
/// within long_max. Boxes follow the same similarity transform.
Sample resize_sample(const Sample& s, std::pair<int, int> short_range, int long_max, Rng& rng);

/// Zero-pads right/bottom so both sides are divisible by `multiple`.
Sample pad_to_multiple(const Sample& s, int64_t multiple);

/// Mirrors the image and boxes horizontally.
Sample hflip_sample(const Sample& s);

}  // namespace headkd::data
