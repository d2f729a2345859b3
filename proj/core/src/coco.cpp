#include "headkd/coco.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "headkd/png_io.hpp"

namespace headkd::data {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

json parse_with_line_context(const std::string& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        size_t line = 1;
        const size_t upto = std::min(e.byte, text.size());
        for (size_t i = 0; i < upto; ++i) {
            if (text[i] == '\n') ++line;
        }
        throw std::runtime_error(path + ":" + std::to_string(line) + ": " + e.what());
    }
}

std::string stem_of(const std::string& file_name) {
    return fs::path(file_name).stem().string();
}

}  // namespace

void save_dataset_coco(const std::string& dir, const std::vector<Sample>& samples,
                       int num_classes) {
    fs::create_directories(dir);
    ordered_json images = json::array();
    ordered_json annotations = json::array();
    ordered_json categories = json::array();
    for (int c = 0; c < num_classes; ++c) {
        categories.push_back({{"id", c + 1}, {"name", shape_class_name(c)}});
    }
    int64_t ann_id = 1;
    for (size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        const std::string file_name = s.id + ".png";
        write_png_rgb((fs::path(dir) / file_name).string(), s.image);
        images.push_back({{"id", static_cast<int64_t>(i) + 1},
                          {"file_name", file_name},
                          {"width", s.width()},
                          {"height", s.height()}});
        for (size_t k = 0; k < s.targets.boxes.size(); ++k) {
            const Box& b = s.targets.boxes[k];
            annotations.push_back({{"id", ann_id++},
                                   {"image_id", static_cast<int64_t>(i) + 1},
                                   {"category_id", s.targets.labels[k] + 1},
                                   {"bbox", {b.x1, b.y1, b.w(), b.h()}},
                                   {"area", b.area()},
                                   {"iscrowd", 0}});
        }
    }
    ordered_json root;
    root["images"] = std::move(images);
    root["annotations"] = std::move(annotations);
    root["categories"] = std::move(categories);
    std::ofstream out(fs::path(dir) / "annotations.json");
    if (!out) throw std::runtime_error("cannot write annotations in " + dir);
    out << root.dump(1) << "\n";
}

std::vector<Sample> load_coco(const std::string& annotation_path, const std::string& image_root) {
    const json root = parse_with_line_context(annotation_path);
    if (!root.contains("images") || !root.contains("annotations") ||
        !root.contains("categories")) {
        throw std::runtime_error(annotation_path + ": missing images/annotations/categories");
    }

    std::vector<int64_t> cat_ids;
    for (const auto& c : root["categories"]) cat_ids.push_back(c.at("id").get<int64_t>());
    std::sort(cat_ids.begin(), cat_ids.end());
    std::map<int64_t, int> cat_to_label;
    for (size_t i = 0; i < cat_ids.size(); ++i) {
        cat_to_label[cat_ids[i]] = static_cast<int>(i);
    }

    std::vector<Sample> samples;
    std::map<int64_t, size_t> image_index;
    for (const auto& im : root["images"]) {
        Sample s;
        const std::string file_name = im.at("file_name").get<std::string>();
        s.id = stem_of(file_name);
        if (!image_root.empty()) {
            s.image = read_png_rgb((fs::path(image_root) / file_name).string());
        } else {
            s.image = Tensor({3, 0, 0});
        }
        image_index[im.at("id").get<int64_t>()] = samples.size();
        samples.push_back(std::move(s));
    }

    for (const auto& ann : root["annotations"]) {
        if (ann.value("iscrowd", 0) != 0) continue;
        const auto it = image_index.find(ann.at("image_id").get<int64_t>());
        if (it == image_index.end()) {
            throw std::runtime_error(annotation_path + ": annotation references unknown image");
        }
        const auto& bb = ann.at("bbox");
        if (!bb.is_array() || bb.size() != 4) {
            throw std::runtime_error(annotation_path + ": bbox must be [x,y,w,h]");
        }
        const real x = bb[0].get<real>(), y = bb[1].get<real>();
        const real w = bb[2].get<real>(), h = bb[3].get<real>();
        const auto lab = cat_to_label.find(ann.at("category_id").get<int64_t>());
        if (lab == cat_to_label.end()) {
            throw std::runtime_error(annotation_path + ": annotation references unknown category");
        }
        Sample& s = samples[it->second];
        s.targets.boxes.push_back({x, y, x + w, y + h});
        s.targets.labels.push_back(lab->second);
    }
    return samples;
}

void save_detections_json(const std::string& path, const NamedDetections& dets) {
    ordered_json arr = json::array();
    for (const auto& [id, d] : dets) {
        ordered_json boxes = json::array();
        for (const auto& b : d.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
        arr.push_back({{"image_id", id},
                       {"boxes", std::move(boxes)},
                       {"labels", d.labels},
                       {"scores", d.scores}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << arr.dump(1) << "\n";
}

NamedDetections load_detections_json(const std::string& path) {
    const json arr = parse_with_line_context(path);
    if (!arr.is_array()) throw std::runtime_error(path + ": expected a JSON array");
    NamedDetections out;
    for (const auto& e : arr) {
        Detections d;
        for (const auto& b : e.at("boxes")) {
            if (!b.is_array() || b.size() != 4) {
                throw std::runtime_error(path + ": boxes must be [x1,y1,x2,y2]");
            }
            d.boxes.push_back({b[0].get<real>(), b[1].get<real>(), b[2].get<real>(),
                               b[3].get<real>()});
        }
        d.labels = e.at("labels").get<std::vector<int>>();
        d.scores = e.at("scores").get<std::vector<real>>();
        if (d.labels.size() != d.boxes.size() || d.scores.size() != d.boxes.size()) {
            throw std::runtime_error(path + ": boxes/labels/scores length mismatch");
        }
        out.emplace_back(e.at("image_id").get<std::string>(), std::move(d));
    }
    return out;
}

}  // namespace headkd::data
