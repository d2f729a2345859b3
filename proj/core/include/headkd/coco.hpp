#pragma once

#include <string>
#include <utility>
#include <vector>

#include "headkd/core.hpp"
#include "headkd/data.hpp"

namespace headkd::data {

/// Writes samples as <dir>/<id>.png plus <dir>/annotations.json in the COCO
/// subset schema (images, annotations, categories). Category ids are
/// 1-based; names come from shape_class_name for the first num_classes.
void save_dataset_coco(const std::string& dir, const std::vector<Sample>& samples,
                       int num_classes);

/// Loads a COCO annotation file. Boxes convert from (x,y,w,h) to corner form,
/// crowd annotations are skipped, category ids map to contiguous labels by
/// sorted id order. Pass image_root = "" to skip decoding pixels (samples then
/// carry empty images). Malformed JSON raises with a line number.
std::vector<Sample> load_coco(const std::string& annotation_path, const std::string& image_root);

/// Per-image detections keyed by sample id.
using NamedDetections = std::vector<std::pair<std::string, Detections>>;

void save_detections_json(const std::string& path, const NamedDetections& dets);
NamedDetections load_detections_json(const std::string& path);

}  // namespace headkd::data
