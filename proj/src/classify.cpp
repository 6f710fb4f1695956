#include "dit/classify.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "dit/checkpoint.hpp"
#include "dit/ops.hpp"
#include "dit/parallel.hpp"

namespace dit {

Classifier::Classifier(const VitConfig& cfg, std::size_t num_classes, std::size_t input_size, std::uint64_t seed)
    : vit_(cfg, seed), head_(cfg.hidden, num_classes, seed ^ 0x636c73ULL), input_size_(input_size) {
  if (num_classes < 2) throw std::invalid_argument("classifier: need at least 2 classes");
  if (input_size == 0 || input_size % cfg.patch != 0)
    throw std::invalid_argument("classifier: input size must be a positive multiple of the patch size");
}

ParamStore Classifier::all_params() const {
  ParamStore all;
  all.extend(vit_.params(), "vit/");
  all.extend(head_.params(), "cls_head/");
  return all;
}

Tensor Classifier::logits(const Image& img, bool training, Rng* rng) const {
  const Image x = resize(img, input_size_, input_size_);
  const Tensor states = vit_.encode(vit_.patch_embed(prepare_patches(x, vit_.config())), {}, training, rng).final;
  return classify(states, head_);
}

int Classifier::predict(const Image& img) const {
  NoGradGuard guard;
  const Tensor out = logits(img);
  const auto v = out.data();
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

void Classifier::save(const std::filesystem::path& path) const {
  write_checkpoint(path, snapshot(all_params()));
  const nlohmann::json j = {
      {"vit", vit_config_to_json(vit_.config())}, {"num_classes", num_classes()}, {"input_size", input_size_}};
  std::ofstream f(path.string() + ".json");
  if (!f) throw std::runtime_error("cannot write " + path.string() + ".json");
  f << j.dump(1) << '\n';
}

Classifier Classifier::load(const std::filesystem::path& path) {
  std::ifstream f(path.string() + ".json");
  if (!f) throw CheckpointError("cannot open classifier config " + path.string() + ".json");
  const auto j = nlohmann::json::parse(f);
  Classifier c(vit_config_from_json(j.at("vit")), j.at("num_classes"), j.at("input_size"), 0);
  ParamStore all = c.all_params();
  restore(all, read_checkpoint(path));
  return c;
}

std::vector<ClassifyLogRow> train_classifier(Classifier& model, const std::vector<SynthDocument>& docs,
                                             const ClassifyTrainConfig& cfg, std::ostream* csv) {
  if (docs.empty()) throw std::invalid_argument("train_classifier: no documents");
  if (cfg.batch == 0) throw std::invalid_argument("train_classifier: batch must be >= 1");
  for (const auto& d : docs)
    if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= model.num_classes())
      throw std::out_of_range("train_classifier: class id " + std::to_string(d.class_id) + " outside [0," +
                              std::to_string(model.num_classes()) + ")");
  const std::size_t per_epoch = (docs.size() + cfg.batch - 1) / cfg.batch;
  const std::int64_t steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * static_cast<std::int64_t>(per_epoch);

  Rng rng(cfg.seed);
  if (cfg.layer_decay != 1.0f) model.backbone().apply_layer_decay(cfg.layer_decay);
  ParamStore all = model.all_params();
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  AdamW opt(all, ac);
  const LrSchedule sched{cfg.peak_lr, std::min(cfg.warmup, steps), std::max<std::int64_t>(steps, 1)};
  if (csv) *csv << "step,lr,loss\n";

  const ResizedCropParams crop{};
  std::vector<std::size_t> order(docs.size());
  std::size_t cursor = order.size();
  std::vector<ClassifyLogRow> log;
  for (std::int64_t step = 0; step < steps; ++step) {
    std::vector<Tensor> rows;
    std::vector<std::int64_t> labels;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(i - 1)))]);
        cursor = 0;
      }
      const SynthDocument& doc = docs[order[cursor++]];
      const Image img =
          cfg.augment ? random_resized_crop(doc.image, rng, crop, model.input_size()) : doc.image;
      rows.push_back(model.logits(img, true, &rng));
      labels.push_back(doc.class_id);
    }
    Tensor loss = ops::cross_entropy(ops::concat_rows(rows), labels);
    all.zero_grad();
    loss.backward();
    const float lr = lr_at(sched, step);
    opt.step(lr);
    log.push_back({step, lr, loss.item()});
    if (csv) {
      char line[96];
      std::snprintf(line, sizeof line, "%lld,%.9g,%.9g\n", static_cast<long long>(step), lr, loss.item());
      *csv << line << std::flush;
    }
  }
  return log;
}

std::vector<int> predict_all(const Classifier& model, const std::vector<SynthDocument>& docs, std::size_t workers) {
  std::vector<int> out(docs.size());
  parallel_for(docs.size(), workers, [&](std::size_t i) { out[i] = model.predict(docs[i].image); });
  return out;
}

}  // namespace dit
