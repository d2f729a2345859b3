#pragma once

#include "headkd/nn.hpp"
#include "headkd/toydet.hpp"

#include <string>

namespace headkd::toydet {

std::string config_to_json(const DetectorConfig& cfg);
DetectorConfig config_from_json(const std::string& text);

// Named-tensor blob, little-endian f64. Loading is strict: the file must
// cover exactly the map's names with matching shapes.
void save_params(const nn::ParamMap& params, const std::string& path);
void load_params(nn::ParamMap& params, const std::string& path);

// Directory checkpoint: spec.json + weights.
void save_detector(const Detector& det, const std::string& dir);
Detector load_detector(const std::string& dir);

}  // namespace headkd::toydet
