#pragma once

#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "gimlab/dataio.hpp"
#include "gimlab/nn.hpp"
#include "gimlab/synthgen.hpp"

namespace gimlab::tracer {

struct TracerConfig {
  int layers = 15;  // trainable conv layers, fixed by the architecture
  int hidden = 32;
  int patch = 64;
  int iters = 1500;
  int batch = 8;
  double lr = 1e-3;
  double val_fraction = 0.1;
  uint64_t seed = 0;

  std::string arch_fingerprint() const;
};

/// Convolutional trace regressor: maps a (possibly blended, degraded) RGB
/// image to its 1-channel latent perturbation map at full resolution.
/// 3x3 convolutions throughout; hidden layers use batch norm + ReLU, the
/// final layer is linear. 15 layers of 3x3 give a 31x31 receptive field.
class ShadowTracer {
 public:
  explicit ShadowTracer(const TracerConfig& cfg);

  /// x: [N,3,H,W] in [0,1]; returns [N,1,H,W]. H,W must be >= 31.
  nn::Var forward(nn::Tape& t, nn::Var x, bool training) const;

  /// Inference-mode forward on raw tensors.
  Tensor infer(const Tensor& images) const;

  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  const TracerConfig& config() const { return cfg_; }
  int receptive_field_min() const { return 2 * cfg_.layers + 1; }

  void save(const std::string& path, const std::string& config_fingerprint) const;
  /// Throws on architecture fingerprint mismatch; returns stored config fp.
  std::string load(const std::string& path);

 private:
  TracerConfig cfg_;
  nn::ParamStore ps_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm2d> bns_;
};

/// Per-patch L2 norm of the prediction error (not squared), averaged over the
/// batch. Graph version for training.
nn::Var tracer_loss(nn::Tape& t, nn::Var predicted, const Tensor& target);
/// Plain version for metrics; shapes [N,1,h,w] or [N,h,w].
double tracer_loss_value(const Tensor& predicted, const Tensor& target);

struct PatchBatch {
  Tensor images;   // [N,3,p,p]
  Tensor targets;  // [N,1,p,p]
};

/// Uniformly samples (image, target-trace) patches from the manifest; half of
/// the manipulated draws are conditioned to overlap the mask.
PatchBatch sample_patches(const synth::DatasetManifest& manifest,
                          const std::vector<synth::ManifestEntry>& entries, int patch_size,
                          int count, uint64_t rng_seed, data::ImageCache& cache);

struct TracerTrainStats {
  double final_train_loss = 0.0;
  double val_loss = 0.0;
  double zero_predictor_val_loss = 0.0;
  std::vector<std::pair<int, double>> curve;  // (iteration, train loss)
};

/// Trains on the manifest's train split of the given subsets. Throws
/// NumericalError on divergence.
TracerTrainStats train_tracer(ShadowTracer& net, const synth::DatasetManifest& manifest,
                              const std::vector<std::string>& subsets, const TracerConfig& cfg,
                              std::ostream* log = nullptr);

}  // namespace gimlab::tracer
