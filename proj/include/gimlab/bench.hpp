#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gimlab/gimformer.hpp"
#include "gimlab/synthgen.hpp"
#include "gimlab/tensor.hpp"
#include "gimlab/tracer.hpp"

namespace gimlab::bench {

/// Pixel F1 of the thresholded probability map against a binary mask.
/// Empty ground truth with empty prediction counts as 1.0 so authentic
/// images do not zero the per-image average.
double pixel_f1(const Tensor& pred_probs, const Tensor& gt, double threshold);

/// Rank-based (Mann-Whitney) pixel AUC with mid-rank tie handling.
/// Empty when the ground truth contains a single class.
std::optional<double> pixel_auc(const Tensor& pred_probs, const Tensor& gt);

/// Fraction of correctly thresholded detections; threshold applies to the
/// sigmoid of the logit, ties resolve to class 0.
double cls_accuracy(const std::vector<double>& label_logits, const std::vector<int>& labels,
                    double threshold);

/// Maximum of a prediction map; image-level detection fallback.
double max_map_statistic(const Tensor& mask_probs);

// ----------------------------------------------------------------- reports

struct Prediction {
  Tensor mask_probs;  // [H,W]
  double label_logit = 0.0;
};
using ScoreFn = std::function<std::vector<Prediction>(const std::vector<Image>&)>;

enum class Setting { Mix, Cross };
const char* setting_name(Setting s);

struct SubsetRow {
  std::string subset;
  double cls_acc = 0.0;
  double pixel_f1 = 0.0;
  double pixel_auc = 0.0;
  int images = 0;
  int auc_images = 0;  // images contributing to the AUC mean
};

struct RobustCell {
  std::string cell;
  double pixel_f1 = 0.0;
  double cls_acc = 0.0;
  double pixel_auc = 0.0;
};

struct EvalReport {
  std::string setting;
  std::vector<SubsetRow> rows;
  std::vector<RobustCell> robustness;
  uint64_t seed = 0;
  std::string fingerprint;

  std::string table() const;
  void save_records(const std::string& path) const;
  static EvalReport load_records(const std::string& path);

  double mean_cls_acc() const;
  double mean_pixel_f1() const;
  double mean_pixel_auc() const;
};

/// Evaluates one test subset. When `clean_inputs` is set the lossless
/// pre-degradation images are used; `distort` (optional) is applied to each
/// input in memory before scoring.
SubsetRow eval_subset(const ScoreFn& score, const synth::DatasetManifest& manifest,
                      const std::string& subset, double threshold, int batch,
                      bool clean_inputs = false,
                      const std::function<Image(const Image&)>* distort = nullptr);

/// Mix setting: rows for the three in-training family subsets.
/// Cross setting: rows for the training family, cross-dist, and the two
/// unseen families.
EvalReport run_setting(const ScoreFn& score, const synth::DatasetManifest& manifest,
                       Setting setting, double threshold, int batch, uint64_t seed,
                       const std::string& fingerprint);

/// The 8-cell distortion sweep over one subset's clean test images:
/// no distortion, JPEG q in {90,80,75}, blur k in {3,5}, downsample
/// {0.66, 0.5}.
std::vector<RobustCell> robustness_sweep(const ScoreFn& score,
                                         const synth::DatasetManifest& manifest,
                                         const std::string& subset, double threshold, int batch);

// ----------------------------------------------------------------- sweeps

struct ScaleRow {
  int size = 0;  // train images per family
  double cls_acc = 0.0;
  double pixel_f1 = 0.0;
  double pixel_auc = 0.0;
};

struct ScaleSweepOptions {
  std::vector<int> sizes;  // ascending train_per_family values
  synth::DatagenConfig datagen;
  tracer::TracerConfig tracer_cfg;
  model::ModelConfig model_cfg;
  std::string work_dir;
};

struct ScaleReport {
  std::vector<ScaleRow> rows;
  std::string table() const;
  void save_records(const std::string& path) const;
};

/// Builds a dataset, trains a fixed small model and evaluates it per size.
/// Same seed makes the datasets nested (smaller is a prefix of larger).
ScaleReport run_scale_sweep(const ScaleSweepOptions& opt, std::ostream* log = nullptr);

}  // namespace gimlab::bench
