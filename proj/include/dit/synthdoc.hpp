#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dit/box.hpp"
#include "dit/imaging.hpp"
#include "dit/rng.hpp"

namespace dit {

enum class Category : int { text = 0, title, list, table, figure, word };

inline constexpr int kNumCategories = 6;
inline constexpr int kNumTemplates = 16;

const char* category_name(Category c);
/// COCO category id (1-based) for a category.
inline int category_id(Category c) { return static_cast<int>(c) + 1; }

struct LayoutElement {
  Category category = Category::text;
  Box bbox;
};

struct SynthDocument {
  Image image;  // grayscale, background 255
  std::vector<LayoutElement> elements;
  int class_id = 0;
};

class LayoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DocSpec {
  int template_id = 0;
  std::size_t width = 448;
  std::size_t height = 448;
};

/// Renders one document. Text is drawn as dark bars, tables as line grids,
/// figures as bordered filled or hatched rectangles. Bounding boxes are the
/// exact extents of the drawn ink.
SynthDocument generate_document(Rng& rng, const DocSpec& spec);

/// Categories the template can emit; used to pick detection corpora.
std::vector<Category> template_categories(int template_id);

struct CorpusSpec {
  std::size_t width = 448;
  std::size_t height = 448;
  std::array<double, kNumTemplates> weights{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1};

  static CorpusSpec single(int template_id, std::size_t w, std::size_t h);
};

/// Document `index` of a corpus, generated from seed XOR index alone.
SynthDocument generate_corpus_document(std::size_t index, std::uint64_t seed, const CorpusSpec& spec);

struct ManifestEntry {
  std::string file_name;
  int class_id = 0;
  std::size_t element_count = 0;
};

/// Writes n PNGs plus annotations.json into out_dir.
std::vector<ManifestEntry> generate_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                           const CorpusSpec& spec, std::size_t workers = 1);

std::string corpus_file_name(std::size_t index);

/// Loads a corpus directory written by generate_corpus (or any directory with
/// a compatible annotations.json). Images load in parallel across `workers`
/// threads; the result is in annotation order.
std::vector<SynthDocument> load_corpus(const std::filesystem::path& dir, std::size_t workers = 1);

}  // namespace dit
