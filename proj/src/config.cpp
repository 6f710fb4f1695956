#include "dit/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace dit {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown config key " + where + "." + k);
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key " + where + "." + key + " has the wrong type");
  }
}

void read_stage(const json& j, StageSchedule& s, const std::string& where) {
  check_keys(j, {"lr", "warmup", "steps", "epochs", "batch", "weight_decay"}, where);
  read(j, "lr", s.lr, where);
  read(j, "warmup", s.warmup, where);
  read(j, "steps", s.steps, where);
  read(j, "epochs", s.epochs, where);
  read(j, "batch", s.batch, where);
  read(j, "weight_decay", s.weight_decay, where);
  if (s.lr <= 0 || s.warmup < 0 || s.steps < 0 || s.epochs < 0 || s.batch == 0 || s.weight_decay < 0)
    throw ConfigError(where + ": lr and batch must be positive, counts non-negative");
}

json stage_json(const StageSchedule& s) {
  return {{"lr", s.lr},       {"warmup", s.warmup}, {"steps", s.steps},
          {"epochs", s.epochs}, {"batch", s.batch},   {"weight_decay", s.weight_decay}};
}

}  // namespace

VitConfig vit_preset(const std::string& name) {
  if (name == "base") return VitConfig::base();
  if (name == "large") return VitConfig::large();
  if (name == "tiny") return VitConfig::tiny();
  throw ConfigError("unknown backbone preset '" + name + "' (base, large, tiny)");
}

AnchorConfig anchor_preset(const std::string& name) {
  if (name == "layout") return AnchorConfig::layout();
  if (name == "text") return AnchorConfig::text();
  throw ConfigError("unknown anchor preset '" + name + "' (layout, text)");
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  check_keys(j, {"data", "model", "optimizer", "schedule", "task"}, "config");

  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, {"dir", "n", "width", "height", "template", "seed", "workers"}, "data");
    read(d, "dir", c.data.dir, "data");
    read(d, "n", c.data.n, "data");
    read(d, "width", c.data.width, "data");
    read(d, "height", c.data.height, "data");
    read(d, "template", c.data.template_id, "data");
    read(d, "seed", c.data.seed, "data");
    read(d, "workers", c.data.workers, "data");
    if (c.data.template_id < -1 || c.data.template_id >= kNumTemplates)
      throw ConfigError("data.template must be -1 or in [0," + std::to_string(kNumTemplates) + ")");
  }

  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"vit", "tokenizer", "fpn"}, "model");
    if (m.contains("vit")) {
      const auto& v = m["vit"];
      check_keys(v, {"preset", "depth", "hidden", "heads", "ffn", "patch", "in_channels", "img_size", "drop_path",
                     "dropout"},
                 "model.vit");
      read(v, "preset", c.model.vit_preset, "model.vit");
      c.model.vit = vit_preset(c.model.vit_preset);
      read(v, "depth", c.model.vit.depth, "model.vit");
      read(v, "hidden", c.model.vit.hidden, "model.vit");
      read(v, "heads", c.model.vit.heads, "model.vit");
      read(v, "ffn", c.model.vit.ffn, "model.vit");
      read(v, "patch", c.model.vit.patch, "model.vit");
      read(v, "in_channels", c.model.vit.in_channels, "model.vit");
      read(v, "img_size", c.model.vit.img_size, "model.vit");
      read(v, "drop_path", c.model.vit.drop_path, "model.vit");
      read(v, "dropout", c.model.vit.dropout, "model.vit");
      try {
        c.model.vit.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("model.vit: ") + e.what());
      }
    }
    if (m.contains("tokenizer")) {
      const auto& t = m["tokenizer"];
      check_keys(t, {"preset", "hidden", "codebook_size", "code_dim", "temperature_floor", "perplexity_weight",
                     "straight_through"},
                 "model.tokenizer");
      read(t, "preset", c.model.tokenizer_preset, "model.tokenizer");
      if (c.model.tokenizer_preset == "tiny") c.model.tokenizer = DvaeConfig::tiny();
      else if (c.model.tokenizer_preset != "default")
        throw ConfigError("unknown tokenizer preset '" + c.model.tokenizer_preset + "' (default, tiny)");
      read(t, "hidden", c.model.tokenizer.hidden, "model.tokenizer");
      read(t, "codebook_size", c.model.tokenizer.codebook_size, "model.tokenizer");
      read(t, "code_dim", c.model.tokenizer.code_dim, "model.tokenizer");
      read(t, "temperature_floor", c.model.tokenizer.temperature_floor, "model.tokenizer");
      read(t, "perplexity_weight", c.model.tokenizer.perplexity_weight, "model.tokenizer");
      read(t, "straight_through", c.model.tokenizer.straight_through, "model.tokenizer");
      if (c.model.tokenizer.codebook_size < 2) throw ConfigError("model.tokenizer.codebook_size must be >= 2");
    }
    if (m.contains("fpn")) {
      const auto& f = m["fpn"];
      check_keys(f, {"channels", "norm_between"}, "model.fpn");
      read(f, "channels", c.model.fpn.channels, "model.fpn");
      read(f, "norm_between", c.model.fpn.norm_between, "model.fpn");
    }
  }

  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    check_keys(o, {"beta1", "beta2", "eps", "grad_clip", "layer_decay"}, "optimizer");
    read(o, "beta1", c.optimizer.beta1, "optimizer");
    read(o, "beta2", c.optimizer.beta2, "optimizer");
    read(o, "eps", c.optimizer.eps, "optimizer");
    read(o, "grad_clip", c.optimizer.grad_clip, "optimizer");
    read(o, "layer_decay", c.optimizer.layer_decay, "optimizer");
  }

  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    check_keys(s, {"tokenizer", "pretrain", "classify", "detect"}, "schedule");
    if (s.contains("tokenizer")) read_stage(s["tokenizer"], c.schedule.tokenizer, "schedule.tokenizer");
    if (s.contains("pretrain")) read_stage(s["pretrain"], c.schedule.pretrain, "schedule.pretrain");
    if (s.contains("classify")) read_stage(s["classify"], c.schedule.classify, "schedule.classify");
    if (s.contains("detect")) read_stage(s["detect"], c.schedule.detect, "schedule.detect");
  }

  if (j.contains("task")) {
    const auto& t = j["task"];
    check_keys(t, {"seed", "tokenizer_checkpoint", "backbone_checkpoint", "mask_ratio", "min_block", "max_block", "input_size", "token_size", "checkpoint_every",
                   "tokenizer_resolution", "tokenizer_crop", "classify_size", "num_classes", "augment", "categories",
                   "anchors", "binarize", "multiscale", "score_thr", "nms_iou"},
               "task");
    auto& k = c.task;
    read(t, "seed", k.seed, "task");
    read(t, "tokenizer_checkpoint", k.tokenizer_checkpoint, "task");
    read(t, "backbone_checkpoint", k.backbone_checkpoint, "task");
    read(t, "mask_ratio", k.mask_ratio, "task");
    read(t, "min_block", k.min_block, "task");
    read(t, "max_block", k.max_block, "task");
    read(t, "input_size", k.input_size, "task");
    read(t, "token_size", k.token_size, "task");
    read(t, "checkpoint_every", k.checkpoint_every, "task");
    read(t, "tokenizer_resolution", k.tokenizer_resolution, "task");
    read(t, "tokenizer_crop", k.tokenizer_crop, "task");
    read(t, "classify_size", k.classify_size, "task");
    read(t, "num_classes", k.num_classes, "task");
    read(t, "augment", k.augment, "task");
    read(t, "categories", k.categories, "task");
    read(t, "anchors", k.anchors, "task");
    read(t, "binarize", k.binarize, "task");
    read(t, "multiscale", k.multiscale, "task");
    read(t, "score_thr", k.score_thr, "task");
    read(t, "nms_iou", k.nms_iou, "task");
    if (!(k.mask_ratio > 0 && k.mask_ratio < 1)) throw ConfigError("task.mask_ratio must be in (0,1)");
    if (k.min_block < 1) throw ConfigError("task.min_block must be >= 1");
    if (k.categories.empty()) throw ConfigError("task.categories must not be empty");
    anchor_preset(k.anchors);
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["data"] = {{"dir", data.dir},       {"n", data.n},       {"width", data.width},
               {"height", data.height}, {"template", data.template_id}, {"seed", data.seed},
               {"workers", data.workers}};
  json vit = vit_config_to_json(model.vit);
  vit["preset"] = model.vit_preset;
  const auto& t = model.tokenizer;
  j["model"] = {{"vit", vit},
                {"tokenizer",
                 {{"preset", model.tokenizer_preset},
                  {"hidden", t.hidden},
                  {"codebook_size", t.codebook_size},
                  {"code_dim", t.code_dim},
                  {"temperature_floor", t.temperature_floor},
                  {"perplexity_weight", t.perplexity_weight},
                  {"straight_through", t.straight_through}}},
                {"fpn", {{"channels", model.fpn.channels}, {"norm_between", model.fpn.norm_between}}}};
  j["optimizer"] = {{"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps},
                    {"grad_clip", optimizer.grad_clip},
                    {"layer_decay", optimizer.layer_decay}};
  j["schedule"] = {{"tokenizer", stage_json(schedule.tokenizer)},
                   {"pretrain", stage_json(schedule.pretrain)},
                   {"classify", stage_json(schedule.classify)},
                   {"detect", stage_json(schedule.detect)}};
  j["task"] = {{"seed", task.seed},
               {"tokenizer_checkpoint", task.tokenizer_checkpoint},
               {"backbone_checkpoint", task.backbone_checkpoint},
               {"mask_ratio", task.mask_ratio},
               {"min_block", task.min_block},
               {"max_block", task.max_block},
               {"input_size", task.input_size},
               {"token_size", task.token_size},
               {"checkpoint_every", task.checkpoint_every},
               {"tokenizer_resolution", task.tokenizer_resolution},
               {"tokenizer_crop", task.tokenizer_crop},
               {"classify_size", task.classify_size},
               {"num_classes", task.num_classes},
               {"augment", task.augment},
               {"categories", task.categories},
               {"anchors", task.anchors},
               {"binarize", task.binarize},
               {"multiscale", task.multiscale},
               {"score_thr", task.score_thr},
               {"nms_iou", task.nms_iou}};
  return j;
}

std::string RunConfig::hash() const {
  // FNV-1a over the canonical dump; object keys are sorted by the json type.
  std::uint32_t h = 2166136261u;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 16777619u;
  }
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", h);
  return buf;
}

}  // namespace dit
