#pragma once

#include <array>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "gimlab/dataio.hpp"
#include "gimlab/nn.hpp"
#include "gimlab/synthgen.hpp"
#include "gimlab/tracer.hpp"

namespace gimlab::model {

using nn::Tape;
using nn::Var;

struct ModelConfig {
  int image_size = 64;  // H = W, multiple of 32
  std::vector<int> widths = {32, 64, 160, 256};
  std::vector<int> depths = {2, 2, 2, 2};
  std::vector<int> heads = {1, 2, 5, 8};
  std::vector<int> sr_ratios = {8, 4, 2, 1};
  std::vector<std::vector<int>> mwam_windows = {{3, 7, 9}, {7, 11, 15}, {9, 17, 25}, {11, 21, 31}};
  int decoder_dim = 64;
  bool use_fsb = true;
  bool use_mwam = true;
  bool use_tracer = true;  // dual branch with trace input
  // training
  int epochs = 5;
  int batch = 4;
  double lr = 6e-5;
  double weight_decay = 1e-2;
  double adam_eps = 1e-8;
  double poly_power = 0.9;
  bool augment = true;
  bool finetune_tracer = false;
  uint64_t seed = 0;

  std::string arch_fingerprint() const;
};

/// Per-pixel k x k window mean and max with replicate padding, plain-tensor
/// form. F is [H,W] or [C,H,W]; k must be odd and at most 2*min(H,W)-1.
std::pair<Tensor, Tensor> window_stats(const Tensor& F, int k);

// ----------------------------------------------------------------- blocks

/// Frequency-Spatial Block: learnable spectral filter branch + convolutional
/// branch, fused and added back to the input.
struct FsbBlock {
  nn::Parameter* g_re = nullptr;  // [C, h, w/2+1], identity initialized
  nn::Parameter* g_im = nullptr;
  nn::Conv2d conv1, conv2, fuse;
  void build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t c, int64_t h,
             int64_t w);
  Var forward(Tape& t, Var x) const;
};

/// Multi-window anomalous modeling: normalized differences between each pixel
/// and its windowed mean/max at N scales, turned into gated anomaly maps.
struct MwamBlock {
  std::vector<int> windows;
  nn::Parameter* rho = nullptr;  // w_sigma = softplus(rho) keeps it >= 0
  nn::Conv2d conv_avg, conv_max;
  nn::Conv2d score_dw_avg, score_pw_avg, score_dw_max, score_pw_max;
  void build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t c,
             std::vector<int> windows);
  Var forward(Tape& t, Var x) const;
};

struct TransformerBlock {
  int64_t dim = 0;
  int heads = 1, sr = 1;
  nn::LayerNormChannel norm1, norm2, sr_norm;
  nn::Linear q, k, v, proj, fc1, fc2;
  nn::Conv2d sr_conv, dw;
  void build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t dim, int heads,
             int sr);
  Var forward(Tape& t, Var x) const;
};

struct PatchEmbed {
  nn::Conv2d conv;
  nn::LayerNormChannel norm;
  void build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t cin, int64_t cout,
             int k, int stride);
  Var forward(Tape& t, Var x) const;
};

/// Cross-branch rectification (pooled sigmoid gates) + 1x1 fusion.
struct StageFusion {
  nn::Linear gate_rgb, gate_trace;
  nn::Conv2d ffm;
  void build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t c);
  // returns {rectified rgb, rectified trace, fused}
  std::array<Var, 3> forward(Tape& t, Var rgb, Var tr) const;
};

// ----------------------------------------------------------------- model

struct PyramidFeatures {
  std::array<Var, 4> stages;
};

struct ModelOutput {
  Var mask_logits;  // [N,1,H,W]
  Var label_logit;  // [N,1]
};

class GimFormer {
 public:
  explicit GimFormer(const ModelConfig& cfg);

  /// image [N,3,H,W], trace [N,1,H,W] (ignored when the trace branch is
  /// ablated). H, W must equal the configured size (multiple of 32).
  PyramidFeatures encode(Tape& t, Var image, Var trace, bool training);
  ModelOutput decode(Tape& t, const PyramidFeatures& f, bool training);
  ModelOutput forward(Tape& t, Var image, Var trace, bool training);

  nn::ParamStore& params() { return ps_; }
  const ModelConfig& config() const { return cfg_; }

  void save(const std::string& path, const std::string& config_fingerprint) const;
  std::string load(const std::string& path);

 private:
  struct Stage {
    PatchEmbed embed_rgb, embed_tr;
    FsbBlock fsb;
    std::vector<TransformerBlock> blocks_rgb, blocks_tr;
    nn::LayerNormChannel out_norm_rgb, out_norm_tr;
    MwamBlock mwam_rgb, mwam_tr;
    StageFusion fusion;
  };
  ModelConfig cfg_;
  nn::ParamStore ps_;
  std::vector<Stage> stages_;
  // decoder
  std::vector<nn::Conv2d> dec_proj_;
  nn::Conv2d dec_fuse_, dec_head_;
  nn::BatchNorm2d dec_bn_;
  // classification head
  nn::Conv2d cls_conv_;
  nn::BatchNorm2d cls_bn_;
  nn::Linear cls_fc1_, cls_fc2_;
};

/// Eq-9-style objective: BCE on the image label plus pixel-averaged BCE on
/// the mask, summed unweighted. labels [N], masks [N,H,W] binary.
Var model_loss(Tape& t, Var label_logit, Var mask_logits, const Tensor& labels,
               const Tensor& masks);

struct ModelTrainStats {
  double initial_loss = 0.0;
  double final_epoch_loss = 0.0;
  std::vector<double> epoch_losses;
};

/// Trains on the train split of the given subsets; tracer may be null when
/// the trace branch is ablated. Throws NumericalError on divergence.
ModelTrainStats train_model(GimFormer& model, tracer::ShadowTracer* tr,
                            const synth::DatasetManifest& manifest,
                            const std::vector<std::string>& subsets, std::ostream* log = nullptr);

/// Batched inference wrapper producing per-image mask probabilities and a
/// detection probability.
struct ScoreResult {
  Tensor mask_probs;  // [H,W]
  double label_prob = 0.5;
  double label_logit = 0.0;
};

class ModelScorer {
 public:
  ModelScorer(GimFormer& model, const tracer::ShadowTracer* tr, int batch = 16)
      : model_(model), tracer_(tr), batch_(batch) {}
  std::vector<ScoreResult> score(const std::vector<Image>& images);

 private:
  GimFormer& model_;
  const tracer::ShadowTracer* tracer_;
  int batch_;
};

}  // namespace gimlab::model
