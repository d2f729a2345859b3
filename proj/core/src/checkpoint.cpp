#include "headkd/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace headkd::toydet {

namespace {

using nlohmann::json;

json proposals_to_json(const bridge::ProposalConfig& p) {
    return json{{"pre_nms_topk", p.pre_nms_topk},
                {"nms_iou", p.nms_iou},
                {"post_nms_n", p.post_nms_n},
                {"min_box_size", p.min_box_size}};
}

bridge::ProposalConfig proposals_from_json(const json& j) {
    bridge::ProposalConfig p;
    p.pre_nms_topk = j.value("pre_nms_topk", p.pre_nms_topk);
    p.nms_iou = j.value("nms_iou", p.nms_iou);
    p.post_nms_n = j.value("post_nms_n", p.post_nms_n);
    p.min_box_size = j.value("min_box_size", p.min_box_size);
    return p;
}

}  // namespace

std::string config_to_json(const DetectorConfig& cfg) {
    json levels = json::array();
    for (int l = cfg.min_level; l <= cfg.max_level; ++l) levels.push_back(l);
    json j{{"family", cfg.family},
           {"channels", cfg.channels},
           {"classes", cfg.num_classes},
           {"levels", levels},
           {"rcnn_width", cfg.rcnn_width},
           {"num_convs", cfg.num_convs},
           {"anchor_base", cfg.anchors.base},
           {"anchor_scales", cfg.anchors.scales},
           {"roi_align_size", cfg.roi_align_size},
           {"backbone_bias", cfg.backbone_bias},
           {"pad_indivisible", cfg.pad_indivisible},
           {"focal_alpha", cfg.focal_alpha},
           {"focal_gamma", cfg.focal_gamma},
           {"dense_fg_iou", cfg.dense_fg_iou},
           {"dense_bg_iou", cfg.dense_bg_iou},
           {"rpn_fg_iou", cfg.rpn_fg_iou},
           {"rpn_bg_iou", cfg.rpn_bg_iou},
           {"rcnn_fg_iou", cfg.rcnn_fg_iou},
           {"point_range_breaks", cfg.point_range_breaks},
           {"proposals", proposals_to_json(cfg.proposals)}};
    return j.dump(2);
}

DetectorConfig config_from_json(const std::string& text) {
    json j = json::parse(text);
    DetectorConfig cfg;
    cfg.family = j.at("family").get<std::string>();
    cfg.channels = j.at("channels").get<int64_t>();
    cfg.num_classes = j.at("classes").get<int>();
    const auto levels = j.at("levels").get<std::vector<int>>();
    if (levels.empty()) throw std::invalid_argument("config: empty levels");
    cfg.min_level = levels.front();
    cfg.max_level = levels.back();
    cfg.rcnn_width = j.value("rcnn_width", cfg.rcnn_width);
    cfg.num_convs = j.value("num_convs", cfg.num_convs);
    cfg.anchors.base = j.value("anchor_base", cfg.anchors.base);
    if (j.contains("anchor_scales")) {
        cfg.anchors.scales = j.at("anchor_scales").get<std::vector<real>>();
    }
    cfg.roi_align_size = j.value("roi_align_size", cfg.roi_align_size);
    cfg.backbone_bias = j.value("backbone_bias", cfg.backbone_bias);
    cfg.pad_indivisible = j.value("pad_indivisible", cfg.pad_indivisible);
    cfg.focal_alpha = j.value("focal_alpha", cfg.focal_alpha);
    cfg.focal_gamma = j.value("focal_gamma", cfg.focal_gamma);
    cfg.dense_fg_iou = j.value("dense_fg_iou", cfg.dense_fg_iou);
    cfg.dense_bg_iou = j.value("dense_bg_iou", cfg.dense_bg_iou);
    cfg.rpn_fg_iou = j.value("rpn_fg_iou", cfg.rpn_fg_iou);
    cfg.rpn_bg_iou = j.value("rpn_bg_iou", cfg.rpn_bg_iou);
    cfg.rcnn_fg_iou = j.value("rcnn_fg_iou", cfg.rcnn_fg_iou);
    if (j.contains("point_range_breaks")) {
        cfg.point_range_breaks = j.at("point_range_breaks").get<std::vector<real>>();
    }
    if (j.contains("proposals")) cfg.proposals = proposals_from_json(j.at("proposals"));
    cfg.validate();
    return cfg;
}

namespace {

constexpr char kMagic[4] = {'H', 'K', 'D', 'W'};

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw std::runtime_error("weights blob: truncated file");
    return v;
}

}  // namespace

void save_params(const nn::ParamMap& params, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_params: cannot open " + path);
    f.write(kMagic, 4);
    write_pod<uint32_t>(f, 1);
    write_pod<uint64_t>(f, params.size());
    for (const auto& [name, p] : params) {
        write_pod<uint32_t>(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Tensor& t = p.val();
        write_pod<uint32_t>(f, static_cast<uint32_t>(t.rank()));
        for (int64_t d = 0; d < t.rank(); ++d) write_pod<int64_t>(f, t.size(d));
        // stored as f64 regardless of the compiled precision
        for (int64_t i = 0; i < t.numel(); ++i) write_pod<double>(f, static_cast<double>(t[i]));
    }
    if (!f) throw std::runtime_error("save_params: write failed for " + path);
}

void load_params(nn::ParamMap& params, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_params: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("load_params: bad magic in " + path);
    }
    if (read_pod<uint32_t>(f) != 1) throw std::runtime_error("load_params: unknown version");
    const uint64_t count = read_pod<uint64_t>(f);
    if (count != params.size()) {
        throw std::runtime_error("load_params: file has " + std::to_string(count) +
                                 " tensors, model expects " + std::to_string(params.size()));
    }
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_pod<uint32_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        auto it = params.find(name);
        if (it == params.end()) {
            throw std::runtime_error("load_params: unexpected tensor " + name);
        }
        const uint32_t rank = read_pod<uint32_t>(f);
        Shape shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = read_pod<int64_t>(f);
        Tensor& dst = it->second.val_mut();
        if (shape != dst.shape()) {
            throw std::runtime_error("load_params: shape mismatch for " + name + ": file " +
                                     shape_str(shape) + ", model " + shape_str(dst.shape()));
        }
        for (int64_t k = 0; k < dst.numel(); ++k) {
            dst[k] = static_cast<real>(read_pod<double>(f));
        }
    }
}

void save_detector(const Detector& det, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream spec(dir + "/spec.json", std::ios::trunc);
    if (!spec) throw std::runtime_error("save_detector: cannot write spec.json in " + dir);
    spec << config_to_json(det.config()) << "\n";
    nn::ParamMap params = det.params();
    save_params(params, dir + "/weights");
}

Detector load_detector(const std::string& dir) {
    std::ifstream spec(dir + "/spec.json");
    if (!spec) throw std::runtime_error("load_detector: missing spec.json in " + dir);
    std::string text((std::istreambuf_iterator<char>(spec)), std::istreambuf_iterator<char>());
    Detector det(config_from_json(text), 0);
    nn::ParamMap params = det.params();
    load_params(params, dir + "/weights");
    return det;
}

}  // namespace headkd::toydet
