#include "gimlab/tracer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gimlab/rng.hpp"

namespace gimlab::tracer {

using ag::Tape;
using ag::Var;

std::string TracerConfig::arch_fingerprint() const {
  std::ostringstream os;
  os << "tracer/layers=" << layers << "/hidden=" << hidden << "/in=3/out=1";
  return os.str();
}

ShadowTracer::ShadowTracer(const TracerConfig& cfg) : cfg_(cfg) {
  check(cfg.layers >= 3, "ShadowTracer: needs at least 3 layers");
  Rng rng(derive_seed(cfg.seed, hash_str("tracer-init")));
  convs_.resize(static_cast<size_t>(cfg.layers));
  bns_.resize(static_cast<size_t>(cfg.layers - 2));
  for (int i = 0; i < cfg.layers; ++i) {
    int64_t cin = i == 0 ? 3 : cfg.hidden;
    int64_t cout = i == cfg.layers - 1 ? 1 : cfg.hidden;
    std::string name = "conv" + std::to_string(i);
    convs_[static_cast<size_t>(i)].build(ps_, rng, name, cin, cout, 3, 1, 1,
                                         ag::PadMode::Replicate);
    if (i >= 1 && i < cfg.layers - 1)
      bns_[static_cast<size_t>(i - 1)].build(ps_, "bn" + std::to_string(i),
                                             cfg.hidden);
  }
  // the regression target is a small residual; start close to the zero map
  for (auto& v : convs_.back().w->value.data) v *= 0.1;
}

Var ShadowTracer::forward(Tape& t, Var x, bool training) const {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4 && X.shape[1] == 3, "ShadowTracer: expected [N,3,H,W]");
  int rf = receptive_field_min();
  check(X.shape[2] >= rf && X.shape[3] >= rf,
        "ShadowTracer: input smaller than the receptive-field minimum of " +
            std::to_string(rf) + "x" + std::to_string(rf));
  Var h = ag::relu(t, convs_[0].forward(t, x));
  for (int i = 1; i < cfg_.layers - 1; ++i) {
    h = convs_[static_cast<size_t>(i)].forward(t, h);
    h = bns_[static_cast<size_t>(i - 1)].forward(t, h, training);
    h = ag::relu(t, h);
  }
  return convs_[static_cast<size_t>(cfg_.layers - 1)].forward(t, h);
}

Tensor ShadowTracer::infer(const Tensor& images) const {
  check(images.ndim() == 4, "ShadowTracer::infer: expected [N,3,H,W]");
  int64_t n = images.shape[0], h = images.shape[2], w = images.shape[3];
  Tensor out({n, 1, h, w});
  const int64_t chunk = 4;  // bounds tape memory during inference
  for (int64_t at = 0; at < n; at += chunk) {
    int64_t bn = std::min(chunk, n - at);
    Tensor part({bn, 3, h, w});
    std::copy(images.data.begin() + at * 3 * h * w, images.data.begin() + (at + bn) * 3 * h * w,
              part.data.begin());
    Tape t;
    Var y = forward(t, t.leaf(std::move(part)), false);
    std::copy(t.val(y).data.begin(), t.val(y).data.end(), out.data.begin() + at * h * w);
  }
  return out;
}

void ShadowTracer::save(const std::string& path, const std::string& config_fingerprint) const {
  ps_.save(path, cfg_.arch_fingerprint(), config_fingerprint);
}

std::string ShadowTracer::load(const std::string& path) {
  return ps_.load(path, cfg_.arch_fingerprint());
}

Var tracer_loss(Tape& t, Var predicted, const Tensor& target) {
  check(t.val(predicted).same_shape(target), "tracer_loss: shape mismatch");
  int64_t n = target.shape[0];
  int64_t m = target.numel() / n;
  Var diff = ag::sub(t, predicted, t.leaf(target));
  Var flat = ag::reshape(t, diff, {n, m});
  return ag::l2norm_rows_mean(t, flat);
}

double tracer_loss_value(const Tensor& predicted, const Tensor& target) {
  check(predicted.same_shape(target), "tracer_loss: shape mismatch");
  int64_t n = predicted.shape[0];
  int64_t m = predicted.numel() / n;
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      double d = predicted[i * m + j] - target[i * m + j];
      s += d * d;
    }
    acc += std::sqrt(s);
  }
  return acc / static_cast<double>(n);
}

PatchBatch sample_patches(const synth::DatasetManifest& manifest,
                          const std::vector<synth::ManifestEntry>& entries, int patch_size,
                          int count, uint64_t rng_seed, data::ImageCache& cache) {
  check(!entries.empty(), "sample_patches: empty manifest selection");
  (void)manifest;
  Rng rng(rng_seed);
  PatchBatch batch;
  batch.images = Tensor::zeros({count, 3, patch_size, patch_size});
  batch.targets = Tensor::zeros({count, 1, patch_size, patch_size});
  for (int i = 0; i < count; ++i) {
    const synth::ManifestEntry& e =
        entries[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(entries.size()) - 1))];
    const ImageU8& img = cache.get(e.image_path);
    check(patch_size <= img.h && patch_size <= img.w,
          "sample_patches: patch size exceeds image size");
    Tensor mask;
    bool want_mask = e.label == 1 && rng.bernoulli(0.5);
    if (want_mask) mask = data::load_mask(cache, e, img.h, img.w);
    int64_t y0 = 0, x0 = 0;
    for (int attempt = 0; attempt < 32; ++attempt) {
      y0 = rng.uniform_int(0, img.h - patch_size);
      x0 = rng.uniform_int(0, img.w - patch_size);
      if (!want_mask) break;
      bool hit = false;
      for (int64_t y = y0; y < y0 + patch_size && !hit; ++y)
        for (int64_t x = x0; x < x0 + patch_size && !hit; ++x)
          if (mask[y * img.w + x] > 0.5) hit = true;
      if (hit) break;
    }
    for (int ch = 0; ch < 3; ++ch)
      for (int64_t y = 0; y < patch_size; ++y)
        for (int64_t x = 0; x < patch_size; ++x)
          batch.images.at4(i, ch, y, x) =
              img.data[((static_cast<size_t>(y0 + y) * img.w) + (x0 + x)) * 3 +
                       static_cast<size_t>(ch)] /
              255.0;
    if (e.label == 1) {
      Tensor target = data::load_trace_target(cache, e);
      for (int64_t y = 0; y < patch_size; ++y)
        for (int64_t x = 0; x < patch_size; ++x)
          batch.targets.at4(i, 0, y, x) = target[(y0 + y) * img.w + (x0 + x)];
    }
  }
  return batch;
}

namespace {

double eval_loss(const ShadowTracer& net, const PatchBatch& batch) {
  Tensor pred = net.infer(batch.images);
  return tracer_loss_value(pred, batch.targets);
}

}  // namespace

TracerTrainStats train_tracer(ShadowTracer& net, const synth::DatasetManifest& manifest,
                              const std::vector<std::string>& subsets, const TracerConfig& cfg,
                              std::ostream* log) {
  std::vector<synth::ManifestEntry> pool;
  for (const auto& s : subsets) {
    auto part = manifest.filter(s, "train");
    pool.insert(pool.end(), part.begin(), part.end());
  }
  check(!pool.empty(), "train_tracer: no training entries for the requested subsets");
  bool has_pos = false, has_neg = false;
  for (const auto& e : pool) (e.label ? has_pos : has_neg) = true;
  check(has_pos && has_neg, "train_tracer: manifest must contain both classes");

  // deterministic held-out split
  Rng split_rng(derive_seed(cfg.seed, hash_str("tracer-split")));
  split_rng.shuffle(pool);
  size_t n_val = std::max<size_t>(2, static_cast<size_t>(cfg.val_fraction * pool.size()));
  n_val = std::min(n_val, pool.size() / 2);
  std::vector<synth::ManifestEntry> val_pool(pool.begin(), pool.begin() + static_cast<long>(n_val));
  std::vector<synth::ManifestEntry> train_pool(pool.begin() + static_cast<long>(n_val), pool.end());

  data::ImageCache cache(manifest.root);
  nn::AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = 0.0;

  TracerTrainStats stats;
  int log_every = std::max(1, cfg.iters / 50);
  double running = 0.0;
  int running_n = 0;
  for (int it = 0; it < cfg.iters; ++it) {
    PatchBatch batch = sample_patches(manifest, train_pool, cfg.patch, cfg.batch,
                                      derive_seed(cfg.seed, 0xb0000 + static_cast<uint64_t>(it)),
                                      cache);
    Tape t;
    Var x = t.leaf(batch.images);
    Var pred = net.forward(t, x, true);
    Var loss = tracer_loss(t, pred, batch.targets);
    double lv = t.val(loss)[0];
    if (!std::isfinite(lv))
      throw NumericalError("train_tracer: non-finite loss at iteration " + std::to_string(it));
    net.params().zero_grad();
    t.backward(loss);
    // norm-type loss has unit-scale gradients everywhere; decay the step so
    // the weights settle instead of hovering at a noise floor
    opt.step(net.params(), nn::poly_lr(cfg.lr, it, cfg.iters, 0.9));
    running += lv;
    ++running_n;
    if ((it + 1) % log_every == 0 || it + 1 == cfg.iters) {
      double avg = running / running_n;
      stats.curve.emplace_back(it + 1, avg);
      if (log) (*log) << "iter " << (it + 1) << " loss " << avg << "\n";
      stats.final_train_loss = avg;
      running = 0.0;
      running_n = 0;
    }
  }

  // held-out evaluation against the constant-zero predictor
  PatchBatch val = sample_patches(manifest, val_pool, cfg.patch,
                                  std::max<int>(32, cfg.batch * 4),
                                  derive_seed(cfg.seed, hash_str("tracer-val")), cache);
  stats.val_loss = eval_loss(net, val);
  Tensor zeros(val.targets.shape);
  stats.zero_predictor_val_loss = tracer_loss_value(zeros, val.targets);
  if (log)
    (*log) << "val " << stats.val_loss << " zero-predictor " << stats.zero_predictor_val_loss
           << "\n";
  return stats;
}

}  // namespace gimlab::tracer
