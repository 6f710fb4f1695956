#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dit/box.hpp"

namespace dit {

struct CocoImage {
  int id = 0;
  std::string file_name;
  std::size_t width = 0;
  std::size_t height = 0;
  int class_id = 0;
};

struct CocoAnnotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  Box bbox;
};

/// Subset of the COCO detection schema: images carry a document class id.
struct CocoDataset {
  std::vector<CocoImage> images;
  std::vector<CocoAnnotation> annotations;
  std::vector<std::pair<int, std::string>> categories;
};

/// A scored, class-labelled box. Serialised in COCO results form.
struct Detection {
  int image_id = 0;
  int category_id = 0;
  Box bbox;
  double score = 0.0;
};

void write_annotations(const std::filesystem::path& path, const CocoDataset& ds);
CocoDataset read_annotations(const std::filesystem::path& path);

void write_predictions(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> read_predictions(const std::filesystem::path& path);

}  // namespace dit
