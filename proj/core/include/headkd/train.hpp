#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "headkd/assistant.hpp"
#include "headkd/coco.hpp"
#include "headkd/data.hpp"
#include "headkd/distill.hpp"
#include "headkd/eval.hpp"
#include "headkd/nn.hpp"
#include "headkd/toydet.hpp"

namespace headkd::train {

/// A problem with the run configuration itself (bad plan file, invalid field
/// combination, missing teacher checkpoint), as opposed to a runtime failure.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Schedule {
    int total_epochs = 12;
    std::vector<int> lr_drop_epochs;  // empty = derive from total_epochs
    real base_lr = 0.01;
    real drop_factor = 0.1;
    real momentum = 0.9;
    real weight_decay = 1e-4;

    /// Drops at 2/3 and 11/12 of the run, the 12-epoch geometry scaled.
    static std::vector<int> default_drops(int total_epochs);
    void validate() const;
};

real lr_at(const Schedule& s, int epoch);

struct EarlyStopPolicy {
    bool enabled = true;
    int stop_epoch = -1;  // negative = resolve to the first lr drop

    void validate(const Schedule& s) const;
};

/// False iff the policy is enabled and the epoch has reached the stop.
/// Gates C-type terms only; A-type and gt terms are never affected.
bool ckd_enabled(const EarlyStopPolicy& p, int epoch);

struct DataConfig {
    data::ShapesSpec shapes;       // used when coco_annotations is empty
    std::string coco_annotations;  // external dataset instead of shapes
    std::string coco_image_root;
    int resize_short_lo = 96;
    int resize_short_hi = 128;
    int resize_long_max = 160;
    bool hflip = true;
    int batch_size = 8;

    void validate() const;
};

struct DistillPlan {
    std::string mode = "baseline";  // baseline | head | tf_head
    toydet::DetectorConfig student;
    std::string teacher_checkpoint;  // required iff mode == "head"
    std::vector<assistant::AssistantSpec> assistants;
    distill::DistillWeights weights;
    Schedule schedule;
    EarlyStopPolicy early_stop;
    DataConfig data;
    toydet::InferenceConfig infer;
    uint64_t seed = 1;

    /// Fills derived defaults: lr drops from total_epochs when empty,
    /// stop_epoch from the first drop when negative.
    void normalize();
    void validate() const;
};

DistillPlan plan_from_json_text(const std::string& text);
std::string plan_to_json_text(const DistillPlan& plan);
DistillPlan load_plan(const std::string& path);

/// Shapes generation or COCO ingestion per the config, split into train/val.
data::Dataset load_dataset(const DataConfig& dc);

/// Everything a distillation step touches. The teacher (head mode only) is
/// frozen at construction; the trainable set is student + assistants +
/// adapters, nothing else.
struct Models {
    std::unique_ptr<toydet::Detector> student;
    std::unique_ptr<toydet::Detector> teacher;
    std::vector<assistant::Assistant> assistants;
    // AKD: one adapter per mimicked tap, keyed [assistant][tap].
    std::map<std::string, std::map<std::string, distill::Adapter>> akd_adapters;
    // CKD: one adapter per pair, keyed "teacher" (head) or assistant name.
    std::map<std::string, distill::Adapter> ckd_adapters;

    nn::ParamMap trainable() const;
};

Models build_models(const DistillPlan& plan);

/// One optimizer step over a batch: per-image forward/backward with 1/B
/// scaling, then SGD at lr_at(plan.schedule, epoch). Returns the batch-mean
/// LossReport (values averaged numerically; CKD terms carry enabled=false
/// once the early-stop epoch is reached).
LossReport distill_step(const DistillPlan& plan, const std::vector<const data::Sample*>& batch,
                        Models& models, nn::Sgd& opt, int epoch);

eval::MapMetrics evaluate_detector(const toydet::Detector& det,
                                   const std::vector<data::Sample>& samples,
                                   const toydet::InferenceConfig& icfg,
                                   data::NamedDetections* out_dets = nullptr);

struct TrainResult {
    eval::MapMetrics metrics;
    std::string final_checkpoint;  // student checkpoint directory
};

/// Runs the full plan. Writes plan.json, log.jsonl, ckpt/epoch_<n>/ at every
/// lr drop and at the end (plus ckpt/final), and metrics.json. With resume,
/// picks up from the newest epoch checkpoint in out_dir.
TrainResult train(const DistillPlan& plan, const std::string& out_dir, bool resume = false);

}  // namespace headkd::train
