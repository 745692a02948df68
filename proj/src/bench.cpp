#include "gimlab/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "gimlab/degrade.hpp"
#include "gimlab/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace gimlab::bench {

double pixel_f1(const Tensor& pred_probs, const Tensor& gt, double threshold) {
  check(threshold > 0.0 && threshold < 1.0, "pixel_f1: threshold must be in (0,1)");
  check(pred_probs.numel() == gt.numel(), "pixel_f1: shape mismatch");
  int64_t tp = 0, fp = 0, fn = 0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    bool p = pred_probs[i] > threshold;
    bool g = gt[i] > 0.5;
    if (p && g) ++tp;
    else if (p && !g) ++fp;
    else if (!p && g) ++fn;
  }
  int64_t denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;  // empty gt, empty prediction
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

std::optional<double> pixel_auc(const Tensor& pred_probs, const Tensor& gt) {
  check(pred_probs.numel() == gt.numel(), "pixel_auc: shape mismatch");
  int64_t n = gt.numel();
  int64_t pos = 0;
  for (int64_t i = 0; i < n; ++i) pos += gt[i] > 0.5 ? 1 : 0;
  int64_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return pred_probs[a] < pred_probs[b]; });
  // mid-rank sum over positives
  double rank_sum_pos = 0.0;
  int64_t i = 0;
  while (i < n) {
    int64_t j = i;
    while (j + 1 < n && pred_probs[order[static_cast<size_t>(j + 1)]] ==
                            pred_probs[order[static_cast<size_t>(i)]])
      ++j;
    double mid_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (int64_t q = i; q <= j; ++q)
      if (gt[order[static_cast<size_t>(q)]] > 0.5) rank_sum_pos += mid_rank;
    i = j + 1;
  }
  double auc = (rank_sum_pos - 0.5 * static_cast<double>(pos) * (static_cast<double>(pos) + 1.0)) /
               (static_cast<double>(pos) * static_cast<double>(neg));
  return auc;
}

double cls_accuracy(const std::vector<double>& label_logits, const std::vector<int>& labels,
                    double threshold) {
  check(!label_logits.empty(), "cls_accuracy: empty input");
  check(label_logits.size() == labels.size(), "cls_accuracy: length mismatch");
  int64_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    double prob = 1.0 / (1.0 + std::exp(-label_logits[i]));
    int pred = prob > threshold ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double max_map_statistic(const Tensor& mask_probs) {
  check(mask_probs.numel() > 0, "max_map_statistic: empty map");
  double best = mask_probs[0];
  for (int64_t i = 1; i < mask_probs.numel(); ++i) best = std::max(best, mask_probs[i]);
  return best;
}

// ----------------------------------------------------------------- evaluation

const char* setting_name(Setting s) { return s == Setting::Mix ? "mix" : "cross"; }

SubsetRow eval_subset(const ScoreFn& score, const synth::DatasetManifest& manifest,
                      const std::string& subset, double threshold, int batch, bool clean_inputs,
                      const std::function<Image(const Image&)>* distort) {
  auto entries = manifest.filter(subset, "test");
  check(!entries.empty(), "eval_subset: missing subset " + subset);

  SubsetRow row;
  row.subset = subset;
  std::vector<double> logits;
  std::vector<int> labels;
  double f1_sum = 0.0, auc_sum = 0.0;
  int auc_n = 0;

  data::ImageCache cache(manifest.root);
  for (size_t at = 0; at < entries.size(); at += static_cast<size_t>(batch)) {
    size_t bn = std::min(static_cast<size_t>(batch), entries.size() - at);
    std::vector<Image> images(bn);
    for (size_t i = 0; i < bn; ++i) {
      const auto& e = entries[at + i];
      std::string rel = e.image_path;
      if (clean_inputs)
        rel = e.label == 1 ? synth::clean_path_for(e) : synth::original_path_for(e);
      Image img = from_u8(cache.get(rel));
      if (distort) img = (*distort)(img);
      images[i] = std::move(img);
    }
    auto preds = score(images);
    check(preds.size() == bn, "eval_subset: scorer returned wrong count");
    for (size_t i = 0; i < bn; ++i) {
      const auto& e = entries[at + i];
      int h = images[i].h, w = images[i].w;
      Tensor mask = data::load_mask(cache, e, h, w);
      f1_sum += pixel_f1(preds[i].mask_probs, mask, threshold);
      if (auto auc = pixel_auc(preds[i].mask_probs, mask)) {
        auc_sum += *auc;
        ++auc_n;
      }
      logits.push_back(preds[i].label_logit);
      labels.push_back(e.label);
    }
  }
  row.images = static_cast<int>(entries.size());
  row.auc_images = auc_n;
  row.pixel_f1 = f1_sum / static_cast<double>(entries.size());
  row.pixel_auc = auc_n > 0 ? auc_sum / auc_n : 0.0;
  row.cls_acc = cls_accuracy(logits, labels, threshold);
  return row;
}

EvalReport run_setting(const ScoreFn& score, const synth::DatasetManifest& manifest,
                       Setting setting, double threshold, int batch, uint64_t seed,
                       const std::string& fingerprint) {
  using synth::Family;
  EvalReport report;
  report.setting = setting_name(setting);
  report.seed = seed;
  report.fingerprint = fingerprint;
  std::vector<std::string> subsets;
  if (setting == Setting::Mix) {
    subsets = {synth::family_subset_tag(Family::RepaintNoise),
               synth::family_subset_tag(Family::TextureResynth),
               synth::family_subset_tag(Family::SmoothRemoval)};
  } else {
    subsets = {synth::family_subset_tag(Family::RepaintNoise), "cross-dist",
               synth::family_subset_tag(Family::TextureResynth),
               synth::family_subset_tag(Family::SmoothRemoval)};
  }
  for (const auto& s : subsets)
    report.rows.push_back(eval_subset(score, manifest, s, threshold, batch));
  return report;
}

std::vector<RobustCell> robustness_sweep(const ScoreFn& score,
                                         const synth::DatasetManifest& manifest,
                                         const std::string& subset, double threshold, int batch) {
  struct CellDef {
    std::string name;
    std::function<Image(const Image&)> fn;
  };
  std::vector<CellDef> cells = {
      {"no-distortion", [](const Image& im) { return im; }},
      {"jpeg:90", [](const Image& im) { return degrade::jpeg_compress(im, 90); }},
      {"jpeg:80", [](const Image& im) { return degrade::jpeg_compress(im, 80); }},
      {"jpeg:75", [](const Image& im) { return degrade::jpeg_compress(im, 75); }},
      {"blur:3", [](const Image& im) { return degrade::gaussian_blur(im, 3); }},
      {"blur:5", [](const Image& im) { return degrade::gaussian_blur(im, 5); }},
      {"downsample:0.66", [](const Image& im) { return degrade::downsample(im, 0.66); }},
      {"downsample:0.5", [](const Image& im) { return degrade::downsample(im, 0.5); }},
  };
  std::vector<RobustCell> out;
  for (const auto& cell : cells) {
    SubsetRow row = eval_subset(score, manifest, subset, threshold, batch, /*clean=*/true, &cell.fn);
    out.push_back({cell.name, row.pixel_f1, row.cls_acc, row.pixel_auc});
  }
  return out;
}

// ----------------------------------------------------------------- report io

std::string EvalReport::table() const {
  std::ostringstream os;
  os << "setting: " << setting << "  seed: " << seed << "  fingerprint: " << fingerprint << "\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %7s %9s %10s %10s\n", "subset", "images", "cls_acc",
                "pixel_f1", "pixel_auc");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-14s %7d %9.4f %10.4f %10.4f\n", r.subset.c_str(),
                  r.images, r.cls_acc, r.pixel_f1, r.pixel_auc);
    os << line;
  }
  if (!robustness.empty()) {
    os << "robustness sweep:\n";
    std::snprintf(line, sizeof(line), "%-18s %10s %9s %10s\n", "cell", "pixel_f1", "cls_acc",
                  "pixel_auc");
    os << line;
    for (const auto& c : robustness) {
      std::snprintf(line, sizeof(line), "%-18s %10.4f %9.4f %10.4f\n", c.cell.c_str(), c.pixel_f1,
                    c.cls_acc, c.pixel_auc);
      os << line;
    }
  }
  return os.str();
}

void EvalReport::save_records(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("EvalReport: cannot write " + path);
  json meta = {{"type", "meta"}, {"setting", setting}, {"seed", seed}, {"fingerprint", fingerprint}};
  out << meta.dump() << "\n";
  for (const auto& r : rows) {
    json j = {{"type", "subset"},     {"subset", r.subset},       {"cls_acc", r.cls_acc},
              {"pixel_f1", r.pixel_f1}, {"pixel_auc", r.pixel_auc}, {"images", r.images},
              {"auc_images", r.auc_images}};
    out << j.dump() << "\n";
  }
  for (const auto& c : robustness) {
    json j = {{"type", "robustness"}, {"cell", c.cell},           {"pixel_f1", c.pixel_f1},
              {"cls_acc", c.cls_acc},  {"pixel_auc", c.pixel_auc}};
    out << j.dump() << "\n";
  }
}

EvalReport EvalReport::load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("EvalReport: cannot open " + path);
  EvalReport rep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    std::string type = j.at("type");
    if (type == "meta") {
      rep.setting = j.at("setting");
      rep.seed = j.at("seed");
      rep.fingerprint = j.at("fingerprint");
    } else if (type == "subset") {
      SubsetRow r;
      r.subset = j.at("subset");
      r.cls_acc = j.at("cls_acc");
      r.pixel_f1 = j.at("pixel_f1");
      r.pixel_auc = j.at("pixel_auc");
      r.images = j.at("images");
      r.auc_images = j.at("auc_images");
      rep.rows.push_back(std::move(r));
    } else if (type == "robustness") {
      RobustCell c;
      c.cell = j.at("cell");
      c.pixel_f1 = j.at("pixel_f1");
      c.cls_acc = j.at("cls_acc");
      c.pixel_auc = j.at("pixel_auc");
      rep.robustness.push_back(std::move(c));
    }
  }
  return rep;
}

double EvalReport::mean_cls_acc() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.cls_acc;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}
double EvalReport::mean_pixel_f1() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.pixel_f1;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}
double EvalReport::mean_pixel_auc() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.pixel_auc;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

// ----------------------------------------------------------------- scale sweep

std::string ScaleReport::table() const {
  std::ostringstream os;
  char line[120];
  std::snprintf(line, sizeof(line), "%8s %9s %10s %10s\n", "size", "cls_acc", "pixel_f1",
                "pixel_auc");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%8d %9.4f %10.4f %10.4f\n", r.size, r.cls_acc, r.pixel_f1,
                  r.pixel_auc);
    os << line;
  }
  return os.str();
}

void ScaleReport::save_records(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("ScaleReport: cannot write " + path);
  for (const auto& r : rows) {
    json j = {{"type", "scale"},       {"size", r.size},          {"cls_acc", r.cls_acc},
              {"pixel_f1", r.pixel_f1}, {"pixel_auc", r.pixel_auc}};
    out << j.dump() << "\n";
  }
}

ScaleReport run_scale_sweep(const ScaleSweepOptions& opt, std::ostream* log) {
  check(!opt.sizes.empty(), "run_scale_sweep: no sizes requested");
  for (size_t i = 1; i < opt.sizes.size(); ++i)
    check(opt.sizes[i] > opt.sizes[i - 1], "run_scale_sweep: sizes must be ascending");

  ScaleReport report;
  for (int size : opt.sizes) {
    synth::DatagenConfig dg = opt.datagen;
    dg.train_per_family = size;
    dg.fingerprint = opt.datagen.fingerprint + "/scale=" + std::to_string(size);
    std::string dir = (fs::path(opt.work_dir) / ("size_" + std::to_string(size))).string();
    synth::DatasetManifest manifest = synth::build_dataset(dg, dir);

    std::vector<std::string> families = {
        synth::family_subset_tag(synth::Family::RepaintNoise),
        synth::family_subset_tag(synth::Family::TextureResynth),
        synth::family_subset_tag(synth::Family::SmoothRemoval)};

    tracer::ShadowTracer tr(opt.tracer_cfg);
    tracer::train_tracer(tr, manifest, families, opt.tracer_cfg, log);
    model::GimFormer net(opt.model_cfg);
    model::train_model(net, &tr, manifest, families, log);

    model::ModelScorer scorer(net, &tr);
    ScoreFn fn = [&](const std::vector<Image>& imgs) {
      auto res = scorer.score(imgs);
      std::vector<Prediction> preds(res.size());
      for (size_t i = 0; i < res.size(); ++i)
        preds[i] = {std::move(res[i].mask_probs), res[i].label_logit};
      return preds;
    };
    EvalReport er = run_setting(fn, manifest, Setting::Mix, 0.5, 16, dg.seed, dg.fingerprint);
    ScaleRow row;
    row.size = size;
    row.cls_acc = er.mean_cls_acc();
    row.pixel_f1 = er.mean_pixel_f1();
    row.pixel_auc = er.mean_pixel_auc();
    report.rows.push_back(row);
    if (log)
      (*log) << "scale " << size << " cls_acc " << row.cls_acc << " f1 " << row.pixel_f1
             << " auc " << row.pixel_auc << "\n";
  }
  return report;
}

}  // namespace gimlab::bench
