#include "dit/coco.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace dit {

using nlohmann::json;

namespace {

json box_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

Box box_from(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::runtime_error("bbox must be [x,y,w,h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

json load_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void save_json(const std::filesystem::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(1) << '\n';
}

}  // namespace

void write_annotations(const std::filesystem::path& path, const CocoDataset& ds) {
  json j;
  j["images"] = json::array();
  for (const auto& im : ds.images) {
    j["images"].push_back(
        {{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}, {"class_id", im.class_id}});
  }
  j["annotations"] = json::array();
  for (const auto& a : ds.annotations) {
    j["annotations"].push_back(
        {{"id", a.id}, {"image_id", a.image_id}, {"category_id", a.category_id}, {"bbox", box_json(a.bbox)}});
  }
  j["categories"] = json::array();
  for (const auto& [id, name] : ds.categories) j["categories"].push_back({{"id", id}, {"name", name}});
  save_json(path, j);
}

CocoDataset read_annotations(const std::filesystem::path& path) {
  const json j = load_json(path);
  CocoDataset ds;
  try {
    for (const auto& im : j.at("images")) {
      ds.images.push_back({im.at("id").get<int>(), im.at("file_name").get<std::string>(),
                           im.at("width").get<std::size_t>(), im.at("height").get<std::size_t>(),
                           im.value("class_id", 0)});
    }
    for (const auto& a : j.at("annotations")) {
      ds.annotations.push_back({a.at("id").get<int>(), a.at("image_id").get<int>(), a.at("category_id").get<int>(),
                                box_from(a.at("bbox"))});
    }
    if (j.contains("categories")) {
      for (const auto& c : j.at("categories")) ds.categories.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed annotations " + path.string() + ": " + e.what());
  }
  return ds;
}

void write_predictions(const std::filesystem::path& path, const std::vector<Detection>& dets) {
  json j = json::array();
  for (const auto& d : dets) {
    j.push_back({{"image_id", d.image_id}, {"category_id", d.category_id}, {"bbox", box_json(d.bbox)}, {"score", d.score}});
  }
  save_json(path, j);
}

std::vector<Detection> read_predictions(const std::filesystem::path& path) {
  const json j = load_json(path);
  if (!j.is_array()) throw std::runtime_error("predictions file must be a JSON array: " + path.string());
  std::vector<Detection> out;
  try {
    for (const auto& d : j) {
      out.push_back({d.at("image_id").get<int>(), d.at("category_id").get<int>(), box_from(d.at("bbox")),
                     d.at("score").get<double>()});
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed predictions " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace dit
