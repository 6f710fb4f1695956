#include "dit/synthdoc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <thread>

#include "dit/coco.hpp"
#include "dit/parallel.hpp"

namespace dit {

const char* category_name(Category c) {
  switch (c) {
    case Category::text: return "text";
    case Category::title: return "title";
    case Category::list: return "list";
    case Category::table: return "table";
    case Category::figure: return "figure";
    case Category::word: return "word";
  }
  return "unknown";
}

namespace {

constexpr float kBackground = 255.0f;

enum class Kind { text, title, list, table, figure, words };

struct BlockSpec {
  Kind kind;
  bool mandatory = false;
  double size = 1.0;  // relative extent hint
  bool centered = false;
};

struct Section {
  int columns = 1;
  std::vector<BlockSpec> blocks;
};

using Template = std::vector<Section>;

BlockSpec M(Kind k, double size = 1.0, bool centered = false) { return {k, true, size, centered}; }
BlockSpec O(Kind k, double size = 1.0, bool centered = false) { return {k, false, size, centered}; }

const std::vector<Template>& templates() {
  using K = Kind;
  static const std::vector<Template> t = {
      /* 0 letter        */ {{1, {M(K::title, 0.6), M(K::text), O(K::text), O(K::text), O(K::text)}}},
      /* 1 form          */ {{1, {M(K::title, 0.5), M(K::words), O(K::words), O(K::words)}}},
      /* 2 email         */ {{1, {M(K::text, 0.4), M(K::text, 0.4), O(K::text, 0.4), O(K::text, 0.4), O(K::text, 0.4)}}},
      /* 3 handwritten   */ {{1, {M(K::list, 1.2), O(K::list, 1.2), O(K::list)}}},
      /* 4 advertisement */ {{1, {M(K::title, 1.0, true), M(K::figure, 1.4), O(K::text, 0.5)}}},
      /* 5 sci. report   */ {{1, {M(K::title, 0.8)}}, {2, {M(K::text), M(K::text), O(K::text), O(K::text)}}},
      /* 6 sci. paper    */ {{1, {M(K::title, 0.8)}}, {2, {M(K::text, 0.7), M(K::figure), O(K::table), O(K::text)}}},
      /* 7 specification */ {{1, {M(K::table), M(K::figure), O(K::table), O(K::figure)}}},
      /* 8 file folder   */ {{1, {M(K::figure, 2.0), O(K::title, 0.4, true)}}},
      /* 9 news article  */ {{1, {M(K::title, 1.0, true)}}, {2, {M(K::figure, 0.8), M(K::text), O(K::text), O(K::text)}}},
      /* 10 budget       */ {{1, {M(K::title, 0.5), M(K::table, 2.0)}}},
      /* 11 invoice      */ {{1, {M(K::words, 0.5), M(K::table), O(K::words, 0.5)}}},
      /* 12 presentation */ {{1, {M(K::title, 1.2, true), M(K::list, 1.5)}}},
      /* 13 questionnaire*/ {{1, {M(K::list, 0.6), M(K::words, 0.6), O(K::list, 0.6), O(K::words, 0.6)}}},
      /* 14 resume       */ {{1, {M(K::title, 0.6), M(K::list, 0.7), O(K::text, 0.6), O(K::list, 0.7)}}},
      /* 15 memo         */ {{1, {M(K::words, 0.4), M(K::text, 1.2), O(K::text, 1.2)}}},
  };
  return t;
}

struct Metrics {
  long line;    // bar thickness
  long gap;     // gap between lines
  long block;   // gap between blocks
  long margin;
  double u;
};

Metrics metrics_for(std::size_t w, std::size_t h) {
  const double u = static_cast<double>(std::min(w, h)) / 112.0;
  auto r = [&](double v, long lo) { return std::max(lo, std::lround(v * u)); };
  return {r(2.0, 2), r(2.0, 2), r(4.0, 3), r(6.0, 3), u};
}

struct Region {
  long x, y, w, h;
};

class Renderer {
 public:
  Renderer(Rng& rng, Image& img, std::vector<LayoutElement>& out, Metrics m) : rng_(rng), img_(img), out_(out), m_(m) {}

  // Draws the block at the top of `r` if it fits; returns the height used.
  std::optional<long> place(const BlockSpec& b, Region r) {
    switch (b.kind) {
      case Kind::text: return text(b, r);
      case Kind::title: return title(b, r);
      case Kind::list: return list(b, r);
      case Kind::table: return table(b, r);
      case Kind::figure: return figure(b, r);
      case Kind::words: return words(b, r);
    }
    return std::nullopt;
  }

 private:
  float ink() { return static_cast<float>(rng_.randint(10, 60)); }

  long ri(long lo, long hi) { return hi <= lo ? lo : static_cast<long>(rng_.randint(lo, hi)); }

  void fill(long x, long y, long w, long h, float v) {
    for (long yy = y; yy < y + h; ++yy)
      for (long xx = x; xx < x + w; ++xx) img_.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy)) = v;
  }

  void emit(Category c, long x, long y, long w, long h) {
    out_.push_back({c, Box{static_cast<double>(x), static_cast<double>(y), static_cast<double>(w), static_cast<double>(h)}});
  }

  // Lines that fit in `avail` height with pitch line+gap.
  long fit_lines(long wanted, long avail, long pitch, long thickness) const {
    if (avail < thickness) return 0;
    return std::min(wanted, (avail - thickness) / pitch + 1);
  }

  std::optional<long> text(const BlockSpec& b, Region r) {
    const long pitch = m_.line + m_.gap;
    const long wanted = std::max(1L, std::lround(b.size * static_cast<double>(ri(3, 6))));
    const long n = fit_lines(wanted, r.h, pitch, m_.line);
    const long bw = std::max(4L, std::lround(static_cast<double>(r.w) * rng_.uniform(0.85, 1.0)));
    if (n < 1 || bw > r.w) return std::nullopt;
    const float v = ink();
    for (long i = 0; i < n; ++i) {
      long len = bw;
      if (i > 0) len = std::lround(static_cast<double>(bw) * (i == n - 1 ? rng_.uniform(0.3, 0.8) : rng_.uniform(0.55, 1.0)));
      fill(r.x, r.y + i * pitch, std::max(2L, len), m_.line, v);
    }
    const long h = n * pitch - m_.gap;
    emit(Category::text, r.x, r.y, bw, h);
    return h;
  }

  std::optional<long> title(const BlockSpec& b, Region r) {
    const long th = std::max(3L, std::lround((3.0 + 2.0 * b.size) * m_.u));
    const long tw = std::lround(static_cast<double>(r.w) * std::min(1.0, rng_.uniform(0.35, 0.65) * (0.6 + 0.4 * b.size)));
    if (th > r.h || tw < 4) return std::nullopt;
    const long x = b.centered ? r.x + (r.w - tw) / 2 : r.x;
    fill(x, r.y, tw, th, ink());
    emit(Category::title, x, r.y, tw, th);
    return th;
  }

  std::optional<long> list(const BlockSpec& b, Region r) {
    const long pitch = m_.line + 2 * m_.gap;
    const long wanted = std::max(2L, std::lround(b.size * static_cast<double>(ri(3, 5))));
    const long n = fit_lines(wanted, r.h, pitch, m_.line);
    const long indent = 2 * m_.line + m_.gap;
    const long avail = r.w - indent;
    if (n < 2 || avail < 6) return std::nullopt;
    const long maxlen = std::lround(static_cast<double>(avail) * rng_.uniform(0.7, 1.0));
    const float v = ink();
    for (long i = 0; i < n; ++i) {
      const long y = r.y + i * pitch;
      fill(r.x, y, m_.line, m_.line, v);
      const long len = i == 0 ? maxlen : std::max(2L, std::lround(static_cast<double>(maxlen) * rng_.uniform(0.35, 1.0)));
      fill(r.x + indent, y, len, m_.line, v);
    }
    const long h = n * pitch - 2 * m_.gap;
    emit(Category::list, r.x, r.y, indent + maxlen, h);
    return h;
  }

  std::optional<long> table(const BlockSpec& b, Region r) {
    const long rh = m_.line + 2 * m_.gap + 1;
    const long wanted = std::max(2L, std::lround(b.size * static_cast<double>(ri(3, 5))));
    const long rows = std::min(wanted, (r.h - 1) / rh);
    if (rows < 2) return std::nullopt;
    const long tw = std::lround(static_cast<double>(r.w) * rng_.uniform(0.6, 1.0));
    const long cols = ri(2, std::max(2L, std::min(5L, tw / 10)));
    const long cw = (tw - 1) / cols;
    if (cw < 4) return std::nullopt;
    const long width = cols * cw + 1;
    const long height = rows * rh + 1;
    const long x = r.x + ri(0, r.w - width);
    const float v = ink();
    for (long i = 0; i <= rows; ++i) fill(x, r.y + i * rh, width, 1, v);
    for (long j = 0; j <= cols; ++j) fill(x + j * cw, r.y, 1, height, v);
    for (long i = 0; i < rows; ++i)
      for (long j = 0; j < cols; ++j) {
        if (cw < 6) continue;
        const long len = std::max(1L, std::lround(static_cast<double>(cw - 4) * rng_.uniform(0.3, 0.9)));
        fill(x + j * cw + 2, r.y + i * rh + 1 + m_.gap, len, m_.line, v);
      }
    emit(Category::table, x, r.y, width, height);
    return height;
  }

  std::optional<long> figure(const BlockSpec& b, Region r) {
    long fw = std::lround(static_cast<double>(r.w) * std::min(1.0, rng_.uniform(0.45, 0.8) * (0.7 + 0.3 * b.size)));
    long fh = std::lround(static_cast<double>(fw) * rng_.uniform(0.45, 0.85));
    fh = std::min(fh, r.h);
    if (fw < 8 || fh < 8) return std::nullopt;
    const long x = r.x + ri(0, r.w - fw);
    const float v = ink();
    fill(x, r.y, fw, 1, v);
    fill(x, r.y + fh - 1, fw, 1, v);
    fill(x, r.y, 1, fh, v);
    fill(x + fw - 1, r.y, 1, fh, v);
    const int style = static_cast<int>(rng_.randint(0, 2));
    for (long yy = r.y + 2; yy < r.y + fh - 2; ++yy)
      for (long xx = x + 2; xx < x + fw - 2; ++xx) {
        bool on = false;
        if (style == 0) on = true;
        else if (style == 1) on = ((xx + yy) % 4) == 0;
        else on = ((xx - x) % 6) < 3 && (yy - r.y) > (fh * ((xx - x) % 5 + 1)) / 7;
        if (on) img_.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy)) = style == 0 ? 140.0f : v;
      }
    emit(Category::figure, x, r.y, fw, fh);
    return fh;
  }

  std::optional<long> words(const BlockSpec& b, Region r) {
    const long pitch = m_.line + 2 * m_.gap;
    const long wanted = std::max(1L, std::lround(b.size * static_cast<double>(ri(3, 5))));
    const long rows = fit_lines(wanted, r.h, pitch, m_.line);
    if (rows < 1) return std::nullopt;
    const long space = std::max(3L, std::lround(3.0 * m_.u));
    const long wmin = std::max(3L, std::lround(4.0 * m_.u));
    const long wmax = std::max(wmin + 1, std::lround(14.0 * m_.u));
    const float v = ink();
    std::size_t placed = 0;
    for (long i = 0; i < rows; ++i) {
      const long y = r.y + i * pitch;
      long x = r.x;
      const long limit = r.x + std::lround(static_cast<double>(r.w) * rng_.uniform(0.5, 1.0));
      while (true) {
        const long ww = ri(wmin, wmax);
        if (x + ww > limit) break;
        fill(x, y, ww, m_.line, v);
        emit(Category::word, x, y, ww, m_.line);
        ++placed;
        x += ww + space + ri(0, space);
      }
    }
    if (placed == 0) return std::nullopt;
    return rows * pitch - 2 * m_.gap;
  }

  Rng& rng_;
  Image& img_;
  std::vector<LayoutElement>& out_;
  Metrics m_;
};

}  // namespace

std::vector<Category> template_categories(int template_id) {
  if (template_id < 0 || template_id >= kNumTemplates) throw std::out_of_range("template id outside [0,16)");
  std::vector<Category> out;
  for (const auto& s : templates()[static_cast<std::size_t>(template_id)])
    for (const auto& b : s.blocks) {
      Category c = Category::text;
      switch (b.kind) {
        case Kind::text: c = Category::text; break;
        case Kind::title: c = Category::title; break;
        case Kind::list: c = Category::list; break;
        case Kind::table: c = Category::table; break;
        case Kind::figure: c = Category::figure; break;
        case Kind::words: c = Category::word; break;
      }
      if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
    }
  return out;
}

SynthDocument generate_document(Rng& rng, const DocSpec& spec) {
  if (spec.template_id < 0 || spec.template_id >= kNumTemplates)
    throw std::out_of_range("template id " + std::to_string(spec.template_id) + " outside [0,16)");
  SynthDocument doc;
  doc.class_id = spec.template_id;
  doc.image = Image(spec.width, spec.height, 1, kBackground);
  const Metrics m = metrics_for(spec.width, spec.height);
  const long W = static_cast<long>(spec.width), H = static_cast<long>(spec.height);
  if (W < 4 * m.margin || H < 4 * m.margin) throw LayoutError("page too small for any layout");
  Renderer r(rng, doc.image, doc.elements, m);

  long y = m.margin + static_cast<long>(rng.randint(0, m.block));
  const long left = m.margin;
  const long inner = W - 2 * m.margin;
  const long bottom = H - m.margin;
  for (const auto& section : templates()[static_cast<std::size_t>(spec.template_id)]) {
    const long cols = section.columns;
    const long colw = (inner - (cols - 1) * m.block) / cols;
    std::vector<long> cy(static_cast<std::size_t>(cols), y);
    for (std::size_t i = 0; i < section.blocks.size(); ++i) {
      const auto& b = section.blocks[i];
      const auto c = static_cast<std::size_t>(static_cast<long>(i) % cols);
      const long x = left + static_cast<long>(c) * (colw + m.block);
      const Region reg{x, cy[c], colw, bottom - cy[c]};
      std::optional<long> used;
      if (reg.h > 0) used = r.place(b, reg);
      if (!used) {
        if (b.mandatory) {
          throw LayoutError("page " + std::to_string(W) + "x" + std::to_string(H) + " too small for template " +
                            std::to_string(spec.template_id));
        }
        continue;
      }
      cy[c] += *used + m.block + static_cast<long>(rng.randint(0, m.block));
    }
    y = *std::max_element(cy.begin(), cy.end());
  }
  return doc;
}

CorpusSpec CorpusSpec::single(int template_id, std::size_t w, std::size_t h) {
  CorpusSpec s;
  s.width = w;
  s.height = h;
  s.weights.fill(0.0);
  s.weights.at(static_cast<std::size_t>(template_id)) = 1.0;
  return s;
}

SynthDocument generate_corpus_document(std::size_t index, std::uint64_t seed, const CorpusSpec& spec) {
  Rng rng(seed ^ static_cast<std::uint64_t>(index));
  double total = 0.0;
  for (double w : spec.weights) {
    if (w < 0.0) throw std::invalid_argument("template weights must be non-negative");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("template weights sum to zero");
  double pick = rng.uniform() * total;
  int tid = kNumTemplates - 1;
  for (int t = 0; t < kNumTemplates; ++t) {
    const double w = spec.weights[static_cast<std::size_t>(t)];
    if (w > 0.0 && pick < w) {
      tid = t;
      break;
    }
    pick -= w;
  }
  while (spec.weights[static_cast<std::size_t>(tid)] <= 0.0) --tid;
  return generate_document(rng, {tid, spec.width, spec.height});
}

std::string corpus_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "doc_%05zu.png", index);
  return buf;
}

std::vector<ManifestEntry> generate_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                           const CorpusSpec& spec, std::size_t workers) {
  if (n == 0) throw std::invalid_argument("generate_corpus: n must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw std::runtime_error("cannot create corpus directory " + out_dir.string());

  std::vector<SynthDocument> docs(n);
  parallel_for(n, workers, [&](std::size_t i) {
    docs[i] = generate_corpus_document(i, seed, spec);
    save_png(docs[i].image, out_dir / corpus_file_name(i));
  });

  CocoDataset ds;
  std::vector<ManifestEntry> manifest;
  int ann_id = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& d = docs[i];
    ds.images.push_back({static_cast<int>(i), corpus_file_name(i), d.image.width, d.image.height, d.class_id});
    for (const auto& e : d.elements) ds.annotations.push_back({ann_id++, static_cast<int>(i), category_id(e.category), e.bbox});
    manifest.push_back({corpus_file_name(i), d.class_id, d.elements.size()});
  }
  for (int c = 0; c < kNumCategories; ++c)
    ds.categories.emplace_back(c + 1, category_name(static_cast<Category>(c)));
  write_annotations(out_dir / "annotations.json", ds);
  return manifest;
}

std::vector<SynthDocument> load_corpus(const std::filesystem::path& dir, std::size_t workers) {
  const auto ds = read_annotations(dir / "annotations.json");
  if (ds.images.empty()) throw std::runtime_error("corpus " + dir.string() + " has no images");
  std::vector<SynthDocument> docs(ds.images.size());
  parallel_for(docs.size(), workers, [&](std::size_t i) {
    docs[i].image = to_channels(load_image(dir / ds.images[i].file_name), 1);
    docs[i].class_id = ds.images[i].class_id;
  });
  for (const auto& a : ds.annotations) {
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      if (ds.images[i].id != a.image_id) continue;
      if (a.category_id < 1 || a.category_id > kNumCategories)
        throw std::runtime_error("annotation " + std::to_string(a.id) + ": unknown category " + std::to_string(a.category_id));
      docs[i].elements.push_back({static_cast<Category>(a.category_id - 1), a.bbox});
    }
  }
  return docs;
}

}  // namespace dit
