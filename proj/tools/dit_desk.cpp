// dit-desk: synthetic-document pre-training and fine-tuning workflow.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dit/checkpoint.hpp"
#include "dit/classify.hpp"
#include "dit/coco.hpp"
#include "dit/config.hpp"
#include "dit/detect.hpp"
#include "dit/dvae.hpp"
#include "dit/gradsuite.hpp"
#include "dit/metrics.hpp"
#include "dit/mim.hpp"
#include "dit/synthdoc.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dit;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitCheckpoint = 2;

std::ofstream g_log;

template <class... A>
void info(const char* fmt, A... args) {
  char msg[512];
  if constexpr (sizeof...(A) == 0) std::snprintf(msg, sizeof msg, "%s", fmt);
  else std::snprintf(msg, sizeof msg, fmt, args...);
  const std::time_t now = std::time(nullptr);
  char stamp[16];
  std::strftime(stamp, sizeof stamp, "%H:%M:%S", std::localtime(&now));
  std::fprintf(stderr, "[%s] %s\n", stamp, msg);
  if (g_log) g_log << '[' << stamp << "] " << msg << '\n' << std::flush;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw CheckpointError(std::string("no ") + what + " checkpoint given");
  if (!fs::is_regular_file(path)) throw CheckpointError(std::string(what) + " checkpoint not found: " + path);
}

/// Options shared by the training and evaluation subcommands. Unset optionals
/// leave the config value alone; set ones win.
struct Common {
  std::string config;
  std::string run_dir;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed = true) {
  cmd->add_option("--config", c.config, "run config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--run-dir", c.run_dir, "artifact directory (default: <root>/<command>-<hash>-<time>)");
  cmd->add_option("--workers", c.workers, "threads for data loading and inference")->check(CLI::PositiveNumber);
  cmd->add_option("--data", c.data, "corpus directory written by synth-data");
  if (with_seed) cmd->add_option("--seed", c.seed, "task seed");
}

struct StageFlags {
  std::optional<std::int64_t> steps, epochs, warmup;
  std::optional<std::size_t> batch;
  std::optional<float> lr;
};

void add_stage(CLI::App* cmd, StageFlags& f) {
  cmd->add_option("--steps", f.steps, "optimizer steps (overrides epochs when > 0)");
  cmd->add_option("--epochs", f.epochs, "passes over the corpus");
  cmd->add_option("--warmup", f.warmup, "linear warmup steps");
  cmd->add_option("--batch", f.batch, "images per step")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "peak learning rate");
}

void apply(const StageFlags& f, StageSchedule& s) {
  if (f.steps) s.steps = *f.steps;
  if (f.epochs) s.epochs = *f.epochs;
  if (f.warmup) s.warmup = *f.warmup;
  if (f.batch) s.batch = *f.batch;
  if (f.lr) s.lr = *f.lr;
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.workers) cfg.data.workers = *c.workers;
  if (c.seed) cfg.task.seed = *c.seed;
  if (c.data) cfg.data.dir = *c.data;
  return cfg;
}

/// Creates the run directory, writes the resolved config and opens the log.
fs::path open_run(const std::string& command, const Common& c, const RunConfig& cfg) {
  fs::path dir;
  if (!c.run_dir.empty()) {
    dir = c.run_dir;
  } else {
    const char* root = std::getenv("DIT_DESK_DIR");
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
    const fs::path base = fs::path(root && *root ? root : "runs") / (command + "-" + cfg.hash() + "-" + stamp);
    dir = base;
    for (int k = 1; fs::exists(dir); ++k) dir = base.string() + "-" + std::to_string(k);
  }
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << '\n';
  g_log.open(dir / "run.log", std::ios::app);
  info("%s: run directory %s", command.c_str(), dir.string().c_str());
  return dir;
}

std::vector<SynthDocument> load_docs(const RunConfig& cfg) {
  if (!fs::is_regular_file(fs::path(cfg.data.dir) / "annotations.json"))
    throw ConfigError("data directory '" + cfg.data.dir + "' has no annotations.json (create it with synth-data)");
  auto docs = load_corpus(cfg.data.dir, cfg.data.workers);
  if (docs.empty()) throw ConfigError("data directory '" + cfg.data.dir + "' holds no documents");
  info("loaded %zu documents from %s", docs.size(), cfg.data.dir.c_str());
  return docs;
}

std::vector<Image> images_of(const std::vector<SynthDocument>& docs) {
  std::vector<Image> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.image);
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

/// The backbone config saved next to a pre-trained checkpoint, when present.
VitConfig backbone_config(const RunConfig& cfg) {
  VitConfig vc = cfg.model.vit;
  if (cfg.task.backbone_checkpoint.empty()) return vc;
  const fs::path side = fs::path(cfg.task.backbone_checkpoint).parent_path() / "backbone.json";
  if (fs::is_regular_file(side)) {
    const float drop = vc.drop_path;
    vc = load_vit_config(side);
    vc.drop_path = drop;
  }
  return vc;
}

// ---------------------------------------------------------------- commands

int cmd_synth(std::size_t n, std::uint64_t seed, const std::string& out, std::size_t width, std::size_t height,
              int template_id, std::size_t workers) {
  if (template_id < -1 || template_id >= kNumTemplates)
    throw ConfigError("--template must be -1 or in [0," + std::to_string(kNumTemplates) + ")");
  const CorpusSpec spec = template_id >= 0 ? CorpusSpec::single(template_id, width, height) : [&] {
    CorpusSpec s;
    s.width = width;
    s.height = height;
    return s;
  }();
  const auto manifest = generate_corpus(n, seed, out, spec, workers);
  std::size_t elements = 0;
  for (const auto& m : manifest) elements += m.element_count;
  info("wrote %zu documents (%zu elements) to %s", manifest.size(), elements, out.c_str());
  return 0;
}

int cmd_train_tokenizer(const RunConfig& cfg, const fs::path& run) {
  const auto docs = load_docs(cfg);
  const auto images = images_of(docs);
  DvaeTrainConfig tc;
  tc.lr = cfg.schedule.tokenizer.lr;
  tc.epochs = cfg.schedule.tokenizer.epochs;
  tc.steps = cfg.schedule.tokenizer.steps;
  tc.batch = cfg.schedule.tokenizer.batch;
  tc.resolution = cfg.task.tokenizer_resolution;
  tc.crop = cfg.task.tokenizer_crop;
  tc.seed = cfg.task.seed;
  tc.adam = {cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps, cfg.schedule.tokenizer.weight_decay,
             cfg.optimizer.grad_clip};
  if (tc.resolution == 0 || tc.resolution % DvaeConfig::kDownsample != 0)
    throw ConfigError("task.tokenizer_resolution must be a positive multiple of 8");
  if (tc.crop % DvaeConfig::kDownsample != 0) throw ConfigError("task.tokenizer_crop must be a multiple of 8");

  Dvae model(cfg.model.tokenizer, cfg.task.seed);
  std::vector<Image> eval;
  for (std::size_t i = 0; i < std::min<std::size_t>(images.size(), 64); ++i)
    eval.push_back(resize(images[i], tc.resolution, tc.resolution));
  const DvaeEval before = evaluate_tokenizer(model, eval);
  std::ofstream csv(run / "tokenizer_log.csv");
  const auto log = train_tokenizer(model, images, tc, &csv);
  model.save(run / "tokenizer.ditc");
  const DvaeEval after = evaluate_tokenizer(model, eval);
  write_json(run / "tokenizer_eval.json", {{"steps", log.size()},
                                           {"mse_before", before.mse},
                                           {"mse", after.mse},
                                           {"flat_mse", after.constant_mse},
                                           {"perplexity_loss", after.perplexity_loss},
                                           {"hard_perplexity_loss", after.hard_perplexity_loss},
                                           {"codes_used", after.codes_used}});
  info("tokenizer: %zu steps, reconstruction MSE %.4f -> %.4f, %zu codes used; saved %s", log.size(), before.mse,
       after.mse, after.codes_used, (run / "tokenizer.ditc").string().c_str());
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const fs::path& run) {
  require_file(cfg.task.tokenizer_checkpoint, "tokenizer");
  const Tokenizer tokenizer = Tokenizer::load(cfg.task.tokenizer_checkpoint);
  const auto docs = load_docs(cfg);
  PretrainConfig pc;
  pc.mask_ratio = cfg.task.mask_ratio;
  pc.min_block = cfg.task.min_block;
  pc.max_block = cfg.task.max_block;
  pc.steps = cfg.schedule.pretrain.steps;
  if (pc.steps == 0) {
    const auto per_epoch = static_cast<std::int64_t>((docs.size() + cfg.schedule.pretrain.batch - 1) /
                                                     cfg.schedule.pretrain.batch);
    pc.steps = cfg.schedule.pretrain.epochs * per_epoch;
  }
  pc.batch = cfg.schedule.pretrain.batch;
  pc.peak_lr = cfg.schedule.pretrain.lr;
  pc.warmup = cfg.schedule.pretrain.warmup;
  pc.weight_decay = cfg.schedule.pretrain.weight_decay;
  if (cfg.optimizer.grad_clip > 0) pc.grad_clip = cfg.optimizer.grad_clip;
  pc.input_size = cfg.task.input_size;
  pc.token_size = cfg.task.token_size;
  pc.checkpoint_every = cfg.task.checkpoint_every;
  pc.seed = cfg.task.seed;
  try {
    pc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  VisionTransformer vit(cfg.model.vit, cfg.task.seed);
  info("pretrain: %lld steps, batch %zu, %.2fM backbone parameters", static_cast<long long>(pc.steps), pc.batch,
       static_cast<double>(param_count(cfg.model.vit)) / 1e6);
  const auto log = pretrain(vit, images_of(docs), tokenizer, pc, run);
  if (!log.empty())
    info("pretrain: MIM loss %.4f -> %.4f (mean of last 20)", log.front().loss, smoothed_loss(log, 20));
  info("saved %s", pretrain_paths(run).checkpoint.string().c_str());
  return 0;
}

void load_backbone(VisionTransformer& vit, const RunConfig& cfg) {
  if (cfg.task.backbone_checkpoint.empty()) {
    info("no backbone checkpoint; fine-tuning from random initialisation");
    return;
  }
  require_file(cfg.task.backbone_checkpoint, "backbone");
  vit.load_weights(cfg.task.backbone_checkpoint);
  info("backbone weights from %s", cfg.task.backbone_checkpoint.c_str());
}

int cmd_finetune_classify(const RunConfig& cfg, const fs::path& run) {
  if (!cfg.task.backbone_checkpoint.empty()) require_file(cfg.task.backbone_checkpoint, "backbone");
  const auto docs = load_docs(cfg);
  Classifier model(backbone_config(cfg), cfg.task.num_classes, cfg.task.classify_size, cfg.task.seed);
  load_backbone(model.backbone(), cfg);
  ClassifyTrainConfig tc;
  tc.epochs = cfg.schedule.classify.epochs;
  tc.steps = cfg.schedule.classify.steps;
  tc.batch = cfg.schedule.classify.batch;
  tc.peak_lr = cfg.schedule.classify.lr;
  tc.warmup = cfg.schedule.classify.warmup;
  tc.weight_decay = cfg.schedule.classify.weight_decay;
  tc.layer_decay = cfg.optimizer.layer_decay;
  tc.augment = cfg.task.augment;
  tc.seed = cfg.task.seed;
  std::ofstream csv(run / "loss.csv");
  const auto log = train_classifier(model, docs, tc, &csv);
  model.save(run / "classifier.ditc");
  const auto pred = predict_all(model, docs, cfg.data.workers);
  std::vector<int> truth;
  for (const auto& d : docs) truth.push_back(d.class_id);
  info("classifier: %zu steps, final loss %.4f, training accuracy %.4f; saved %s", log.size(),
       log.empty() ? 0.0 : log.back().loss, accuracy(pred, truth), (run / "classifier.ditc").string().c_str());
  return 0;
}

int cmd_finetune_detect(const RunConfig& cfg, const fs::path& run) {
  if (!cfg.task.backbone_checkpoint.empty()) require_file(cfg.task.backbone_checkpoint, "backbone");
  const auto docs = load_docs(cfg);
  DetectorConfig dc;
  dc.vit = backbone_config(cfg);
  dc.fpn = cfg.model.fpn;
  dc.anchors = anchor_preset(cfg.task.anchors);
  dc.categories = cfg.task.categories;
  dc.nms_iou = cfg.task.nms_iou;
  dc.binarize = cfg.task.binarize;
  try {
    fpn_tap_indices(dc.vit.depth);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.vit.depth: ") + e.what());
  }
  Detector det(dc, cfg.task.seed);
  load_backbone(det.backbone(), cfg);
  DetectTrainConfig tc;
  tc.steps = cfg.schedule.detect.steps;
  if (tc.steps == 0) {
    const auto per_epoch =
        static_cast<std::int64_t>((docs.size() + cfg.schedule.detect.batch - 1) / cfg.schedule.detect.batch);
    tc.steps = cfg.schedule.detect.epochs * per_epoch;
  }
  tc.batch = cfg.schedule.detect.batch;
  tc.peak_lr = cfg.schedule.detect.lr;
  tc.warmup = cfg.schedule.detect.warmup;
  tc.weight_decay = cfg.schedule.detect.weight_decay;
  tc.layer_decay = cfg.optimizer.layer_decay;
  tc.grad_clip = cfg.optimizer.grad_clip;
  tc.multiscale = cfg.task.multiscale;
  tc.seed = cfg.task.seed;
  std::ofstream csv(run / "loss.csv");
  const auto log = train_detector(det, docs, tc, &csv);
  det.save(run / "detector.ditc");
  info("detector: %zu steps, final loss %.4f, anchors %s%s; saved %s", log.size(),
       log.empty() ? 0.0 : log.back().loss, cfg.task.anchors.c_str(), dc.binarize ? ", binarized input" : "",
       (run / "detector.ditc").string().c_str());
  return 0;
}

struct EvalFlags {
  std::string task;
  std::string preds, gts, model, out;
  double iou = 0.5;
};

std::vector<int> categories_in(const std::vector<CocoAnnotation>& gts) {
  std::set<int> s;
  for (const auto& g : gts) s.insert(g.category_id);
  return {s.begin(), s.end()};
}

json detection_report(const std::string& task, const std::vector<Detection>& preds,
                      const std::vector<CocoAnnotation>& gts, double iou_thr) {
  json r{{"task", task}, {"predictions", preds.size()}, {"ground_truth", gts.size()}};
  if (task == "wf1") {
    std::array<double, 4> f1s{};
    json per;
    for (std::size_t i = 0; i < 4; ++i) {
      f1s[i] = 100.0 * dataset_prf1(preds, gts, kWf1Thresholds[i]).f1;
      char key[8];
      std::snprintf(key, sizeof key, "%.1f", kWf1Thresholds[i]);
      per[key] = f1s[i];
    }
    r["f1"] = per;
    r["wf1"] = weighted_f1(f1s);
  } else if (task == "map") {
    const auto m = map_range(preds, gts, categories_in(gts));
    r["map"] = 100.0 * m.overall;
    json per;
    for (const auto& [cat, v] : m.category_map) per[std::to_string(cat)] = 100.0 * v;
    r["category_map"] = per;
  } else {
    const Prf1 p = dataset_prf1(preds, gts, iou_thr);
    r["iou"] = iou_thr;
    r["precision"] = 100.0 * p.precision;
    r["recall"] = 100.0 * p.recall;
    r["f1"] = 100.0 * p.f1;
  }
  return r;
}

int cmd_evaluate(const RunConfig& cfg, const EvalFlags& f, const fs::path& run) {
  json report;
  if (f.task == "accuracy") {
    std::vector<int> pred, truth;
    if (!f.model.empty()) {
      require_file(f.model, "classifier");
      const Classifier model = Classifier::load(f.model);
      const auto docs = load_docs(cfg);
      pred = predict_all(model, docs, cfg.data.workers);
      for (const auto& d : docs) truth.push_back(d.class_id);
      write_json(run / "class_predictions.json", pred);
    } else {
      if (f.preds.empty() || f.gts.empty()) throw ConfigError("evaluate --task accuracy needs --model or --preds/--gts");
      std::ifstream pf(f.preds);
      if (!pf) throw ConfigError("cannot open " + f.preds);
      pred = json::parse(pf).get<std::vector<int>>();
      for (const auto& img : read_annotations(f.gts).images) truth.push_back(img.class_id);
    }
    report = {{"task", "accuracy"}, {"images", truth.size()}, {"accuracy", 100.0 * accuracy(pred, truth)}};
  } else {
    std::vector<Detection> preds;
    std::vector<CocoAnnotation> gts;
    if (!f.model.empty()) {
      require_file(f.model, "detector");
      const Detector det = Detector::load(f.model);
      const auto docs = load_docs(cfg);
      preds = detect_all(det, docs, cfg.task.score_thr, cfg.data.workers);
      gts = ground_truth(det, docs);
      write_predictions(run / "predictions.json", preds);
    } else {
      if (f.preds.empty() || f.gts.empty()) throw ConfigError("evaluate --task " + f.task + " needs --model or --preds/--gts");
      preds = read_predictions(f.preds);
      gts = read_annotations(f.gts).annotations;
    }
    report = detection_report(f.task, preds, gts, f.iou);
  }
  const fs::path out = f.out.empty() ? run / "report.json" : fs::path(f.out);
  write_json(out, report);
  std::cout << report.dump(2) << '\n';
  info("report written to %s", out.string().c_str());
  return 0;
}

int cmd_reconstruct(const std::string& tokenizer_path, const std::string& image_path, const std::string& out,
                    std::size_t size, const fs::path& run) {
  require_file(tokenizer_path, "tokenizer");
  const Tokenizer tok = Tokenizer::load(tokenizer_path);
  Image img = load_image(image_path);
  img = to_channels(img, tok.model().config().in_channels);
  if (size > 0) {
    if (size % DvaeConfig::kDownsample != 0) throw ConfigError("--size must be a multiple of 8");
    img = resize(img, size, size);
  } else {
    const std::size_t w = (img.width + 7) / 8 * 8, h = (img.height + 7) / 8 * 8;
    if (w != img.width || h != img.height) img = pad_to(img, w, h, 255.0f);
  }
  const Image rec = tok.reconstruct(img);
  Image side(img.width * 2, img.height, img.channels);
  double se = 0.0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float a = img.data[(y * img.width + x) * img.channels + c];
        const float b = rec.data[(y * img.width + x) * img.channels + c];
        side.data[(y * side.width + x) * img.channels + c] = a;
        side.data[(y * side.width + img.width + x) * img.channels + c] = b;
        se += (a - b) * (a - b) / (255.0 * 255.0);
      }
  const fs::path dst = out.empty() ? run / "reconstruction.png" : fs::path(out);
  save_png(side, dst);
  const TokenMap t = tok.tokenize(img);
  info("%zux%zu tokens, reconstruction MSE %.4f; wrote %s", t.grid_h, t.grid_w,
       se / static_cast<double>(img.data.size()), dst.string().c_str());
  return 0;
}

int cmd_grad_check(std::size_t seeds, const std::string& filter, const fs::path& run) {
  const auto cases = grad_cases();
  json rows = json::array();
  bool all_ok = true;
  std::printf("%-28s %10s %9s  %s\n", "case", "max err", "tol", "result");
  for (const auto& c : cases) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) worst = std::max(worst, c.run(s));
    const bool ok = worst < c.tolerance;
    all_ok = all_ok && ok;
    std::printf("%-28s %10.2e %9.0e  %s\n", c.name.c_str(), worst, c.tolerance, ok ? "PASS" : "FAIL");
    rows.push_back({{"case", c.name}, {"max_rel_err", worst}, {"tolerance", c.tolerance}, {"pass", ok}});
  }
  write_json(run / "grad_check.json", rows);
  info("%s", all_ok ? "all gradient checks passed" : "some gradient checks failed");
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dit-desk: self-supervised document image transformer workflow"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "render a synthetic document corpus with COCO annotations");
  std::size_t synth_n = 64, synth_w = 448, synth_h = 448, synth_workers = 1;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  int synth_template = -1;
  synth->add_option("--n", synth_n, "number of documents")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "corpus seed");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--width", synth_w, "page width in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--height", synth_h, "page height in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--template", synth_template, "single template id; -1 mixes all");
  synth->add_option("--workers", synth_workers, "render threads")->check(CLI::PositiveNumber);

  // train-tokenizer
  Common tok_c;
  StageFlags tok_s;
  auto* tok = app.add_subcommand("train-tokenizer", "train the discrete VAE image tokenizer");
  add_common(tok, tok_c);
  add_stage(tok, tok_s);

  // pretrain
  Common pre_c;
  StageFlags pre_s;
  std::optional<std::string> pre_tok;
  std::optional<double> pre_mask;
  auto* pre = app.add_subcommand("pretrain", "masked image modelling pre-training of the backbone");
  add_common(pre, pre_c);
  add_stage(pre, pre_s);
  pre->add_option("--tokenizer", pre_tok, "tokenizer checkpoint");
  pre->add_option("--mask-ratio", pre_mask, "fraction of patches to mask");

  // finetune-classify
  Common cls_c;
  StageFlags cls_s;
  std::optional<std::string> cls_backbone;
  bool cls_augment = false;
  auto* cls = app.add_subcommand("finetune-classify", "fine-tune a document classifier");
  add_common(cls, cls_c);
  add_stage(cls, cls_s);
  cls->add_option("--backbone", cls_backbone, "pre-trained backbone checkpoint");
  cls->add_flag("--augment", cls_augment, "random resized crops");

  // finetune-detect
  Common det_c;
  StageFlags det_s;
  std::optional<std::string> det_backbone, det_anchors;
  bool det_binarize = false, det_multiscale = false;
  auto* det = app.add_subcommand("finetune-detect", "fine-tune the FPN detector");
  add_common(det, det_c);
  add_stage(det, det_s);
  det->add_option("--backbone", det_backbone, "pre-trained backbone checkpoint");
  det->add_option("--anchors", det_anchors, "anchor preset")->check(CLI::IsMember({"layout", "text"}));
  det->add_flag("--binarize", det_binarize, "adaptive binarisation before the backbone");
  det->add_flag("--multiscale", det_multiscale, "multi-scale training resize");

  // evaluate
  Common ev_c;
  EvalFlags ev;
  auto* eva = app.add_subcommand("evaluate", "compute a metrics report");
  add_common(eva, ev_c, false);
  eva->add_option("--task", ev.task, "metric")->required()->check(CLI::IsMember({"wf1", "map", "f1", "accuracy"}));
  eva->add_option("--preds", ev.preds, "predictions: COCO results JSON, or a class-id array for accuracy");
  eva->add_option("--gts", ev.gts, "ground truth annotations.json");
  eva->add_option("--model", ev.model, "detector or classifier checkpoint to run on --data instead of --preds");
  eva->add_option("--iou", ev.iou, "IoU threshold for --task f1")->check(CLI::Range(0.0, 1.0));
  eva->add_option("--out", ev.out, "report path (default: <run dir>/report.json)");

  // reconstruct
  Common rec_c;
  std::string rec_tok, rec_img, rec_out;
  std::size_t rec_size = 0;
  auto* rec = app.add_subcommand("reconstruct", "side-by-side original and tokenizer reconstruction");
  add_common(rec, rec_c, false);
  rec->add_option("--tokenizer", rec_tok, "tokenizer checkpoint")->required();
  rec->add_option("--image", rec_img, "input image (PNG or PGM)")->required()->check(CLI::ExistingFile);
  rec->add_option("--out", rec_out, "output PNG (default: <run dir>/reconstruction.png)");
  rec->add_option("--size", rec_size, "resize to size x size first; 0 pads to a multiple of 8");

  // grad-check
  Common gc_c;
  std::size_t gc_seeds = 3;
  std::string gc_filter;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable op");
  add_common(gc, gc_c, false);
  gc->add_option("--seeds", gc_seeds, "random seeds per case")->check(CLI::PositiveNumber);
  gc->add_option("--filter", gc_filter, "only cases whose name contains this");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_n, synth_seed, synth_out, synth_w, synth_h, synth_template, synth_workers);
    if (tok->parsed()) {
      RunConfig cfg = resolve(tok_c);
      apply(tok_s, cfg.schedule.tokenizer);
      return cmd_train_tokenizer(cfg, open_run("train-tokenizer", tok_c, cfg));
    }
    if (pre->parsed()) {
      RunConfig cfg = resolve(pre_c);
      apply(pre_s, cfg.schedule.pretrain);
      if (pre_tok) cfg.task.tokenizer_checkpoint = *pre_tok;
      if (pre_mask) cfg.task.mask_ratio = *pre_mask;
      return cmd_pretrain(cfg, open_run("pretrain", pre_c, cfg));
    }
    if (cls->parsed()) {
      RunConfig cfg = resolve(cls_c);
      apply(cls_s, cfg.schedule.classify);
      if (cls_backbone) cfg.task.backbone_checkpoint = *cls_backbone;
      if (cls_augment) cfg.task.augment = true;
      return cmd_finetune_classify(cfg, open_run("finetune-classify", cls_c, cfg));
    }
    if (det->parsed()) {
      RunConfig cfg = resolve(det_c);
      apply(det_s, cfg.schedule.detect);
      if (det_backbone) cfg.task.backbone_checkpoint = *det_backbone;
      if (det_anchors) cfg.task.anchors = *det_anchors;
      if (det_binarize) cfg.task.binarize = true;
      if (det_multiscale) cfg.task.multiscale = true;
      return cmd_finetune_detect(cfg, open_run("finetune-detect", det_c, cfg));
    }
    if (eva->parsed()) {
      const RunConfig cfg = resolve(ev_c);
      return cmd_evaluate(cfg, ev, open_run("evaluate", ev_c, cfg));
    }
    if (rec->parsed()) {
      const RunConfig cfg = resolve(rec_c);
      return cmd_reconstruct(rec_tok, rec_img, rec_out, rec_size, open_run("reconstruct", rec_c, cfg));
    }
    if (gc->parsed()) {
      const RunConfig cfg = resolve(gc_c);
      return cmd_grad_check(gc_seeds, gc_filter, open_run("grad-check", gc_c, cfg));
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
