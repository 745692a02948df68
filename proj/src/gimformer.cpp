#include "gimlab/gimformer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gimlab/rng.hpp"

namespace gimlab::model {

namespace ag = gimlab::ag;

std::string ModelConfig::arch_fingerprint() const {
  std::ostringstream os;
  os << "gimformer/size=" << image_size << "/w=";
  for (int v : widths) os << v << ",";
  os << "/d=";
  for (int v : depths) os << v << ",";
  os << "/h=";
  for (int v : heads) os << v << ",";
  os << "/sr=";
  for (int v : sr_ratios) os << v << ",";
  os << "/win=";
  for (const auto& ws : mwam_windows) {
    for (int v : ws) os << v << ".";
    os << ",";
  }
  os << "/dec=" << decoder_dim << "/fsb=" << use_fsb << "/mwam=" << use_mwam
     << "/tracer=" << use_tracer;
  return os.str();
}

// ----------------------------------------------------------------- helpers

namespace {

Var nchw_to_tokens(Tape& t, Var x) {
  const Tensor& X = t.val(x);
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  Var p = ag::permute(t, x, {0, 2, 3, 1});
  return ag::reshape(t, p, {N, H * W, C});
}

Var tokens_to_nchw(Tape& t, Var x, int64_t h, int64_t w) {
  const Tensor& X = t.val(x);
  int64_t N = X.shape[0], C = X.shape[2];
  Var r = ag::reshape(t, x, {N, h, w, C});
  return ag::permute(t, r, {0, 3, 1, 2});
}

constexpr double kLeakySlope = 0.01;

}  // namespace

std::pair<Tensor, Tensor> window_stats(const Tensor& F, int k) {
  check(F.ndim() == 2 || F.ndim() == 3, "window_stats: expected [H,W] or [C,H,W]");
  int64_t h = F.dim(-2), w = F.dim(-1);
  check(k >= 1 && (k % 2) == 1, "window_stats: k must be odd");
  check(k <= 2 * std::min(h, w) - 1, "window_stats: k exceeds 2*min(h,w)-1");
  int64_t c = F.ndim() == 3 ? F.shape[0] : 1;
  Tensor x;
  x.shape = {1, c, h, w};
  x.data = F.data;
  ag::Tape t;
  Var xv = t.leaf(std::move(x));
  Var a = ag::window_mean(t, xv, k);
  Var m = ag::window_max(t, xv, k);
  Tensor fa = t.val(a), fm = t.val(m);
  fa.shape = F.shape;
  fm.shape = F.shape;
  return {std::move(fa), std::move(fm)};
}

// ----------------------------------------------------------------- blocks

void FsbBlock::build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t c, int64_t h,
                     int64_t w) {
  int64_t wr = w / 2 + 1;
  g_re = &ps.create(name + ".g_re", {c, h, wr}, false);
  g_im = &ps.create(name + ".g_im", {c, h, wr}, false);
  nn::fill_constant(g_re->value, 1.0);  // multiplicative identity
  conv1.build(ps, rng, name + ".conv1", c, c, 3, 1, 1);
  conv2.build(ps, rng, name + ".conv2", c, c, 3, 1, 1);
  fuse.build(ps, rng, name + ".fuse", 2 * c, c, 3, 1, 1);
}

Var FsbBlock::forward(Tape& t, Var x) const {
  Var xf = ag::spectral_filter(t, x, t.param(*g_re), t.param(*g_im));
  Var xs = ag::leaky_relu(t, conv2.forward(t, conv1.forward(t, x)), kLeakySlope);
  Var cat = ag::concat(t, {xf, xs}, 1);
  Var fused = ag::leaky_relu(t, fuse.forward(t, cat), kLeakySlope);
  return ag::add(t, fused, x);
}

void MwamBlock::build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t c,
                      std::vector<int> windows_) {
  windows = std::move(windows_);
  int64_t n = static_cast<int64_t>(windows.size());
  rho = &ps.create(name + ".rho", {c}, false);
  nn::fill_constant(rho->value, -4.6);  // softplus(-4.6) ~ 0.01
  conv_avg.build(ps, rng, name + ".conv_avg", n * c, c, 3, 1, 1);
  conv_max.build(ps, rng, name + ".conv_max", n * c, c, 3, 1, 1);
  score_dw_avg.build(ps, rng, name + ".score_dw_avg", c, c, 3, 1, 1, ag::PadMode::Replicate,
                     static_cast<int>(c));
  score_pw_avg.build(ps, rng, name + ".score_pw_avg", c, 1, 1, 1, 0);
  score_dw_max.build(ps, rng, name + ".score_dw_max", c, c, 3, 1, 1, ag::PadMode::Replicate,
                     static_cast<int>(c));
  score_pw_max.build(ps, rng, name + ".score_pw_max", c, 1, 1, 1, 0);
}

Var MwamBlock::forward(Tape& t, Var x) const {
  const Tensor& X = t.val(x);
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  int kcap = static_cast<int>(2 * std::min(H, W) - 1);

  Var sig = ag::spatial_std(t, x);  // [N,C]
  Var ws = ag::softplus(t, t.param(*rho));
  Var floor_c = ag::add(t, ws, t.leaf(Tensor::full({C}, 1e-5)));
  Var sigma_star = ag::maximum(t, sig, ag::expand_to_nc(t, floor_c, N));

  std::vector<Var> da, dm;
  for (int k : windows) {
    int ke = std::min(k, kcap);
    Var fa = ag::window_mean(t, x, ke);
    Var fm = ag::window_max(t, x, ke);
    da.push_back(ag::div_nc(t, ag::sub(t, x, fa), sigma_star));
    dm.push_back(ag::div_nc(t, ag::sub(t, x, fm), sigma_star));
  }
  Var ma = conv_avg.forward(t, ag::concat(t, da, 1));
  Var mm = conv_max.forward(t, ag::concat(t, dm, 1));
  Var sa = ag::sigmoid(t, score_pw_avg.forward(t, score_dw_avg.forward(t, x)));
  Var sm = ag::sigmoid(t, score_pw_max.forward(t, score_dw_max.forward(t, x)));
  return ag::add(t, x, ag::add(t, ag::mul_score(t, ma, sa), ag::mul_score(t, mm, sm)));
}

void TransformerBlock::build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t dim_,
                             int heads_, int sr_) {
  dim = dim_;
  heads = heads_;
  sr = sr_;
  check(dim % heads == 0, "TransformerBlock: heads must divide dim");
  norm1.build(ps, name + ".norm1", dim);
  norm2.build(ps, name + ".norm2", dim);
  q.build(ps, rng, name + ".q", dim, dim);
  k.build(ps, rng, name + ".k", dim, dim);
  v.build(ps, rng, name + ".v", dim, dim);
  proj.build(ps, rng, name + ".proj", dim, dim);
  if (sr > 1) {
    sr_conv.build(ps, rng, name + ".sr", dim, dim, sr, sr, 0, ag::PadMode::Zero);
    sr_norm.build(ps, name + ".sr_norm", dim);
  }
  fc1.build(ps, rng, name + ".fc1", dim, dim * 4);
  dw.build(ps, rng, name + ".dw", dim * 4, dim * 4, 3, 1, 1, ag::PadMode::Replicate,
           static_cast<int>(dim * 4));
  fc2.build(ps, rng, name + ".fc2", dim * 4, dim);
}

Var TransformerBlock::forward(Tape& t, Var x) const {
  const Tensor& X = t.val(x);
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  int64_t L = H * W;
  int64_t d = C / heads;

  Var hn = norm1.forward(t, x);
  Var tq = nchw_to_tokens(t, hn);
  Var qv = q.forward(t, tq);
  Var kv_src = tq;
  int64_t lk = L;
  if (sr > 1) {
    check(H % sr == 0 && W % sr == 0, "TransformerBlock: grid not divisible by sr");
    Var red = sr_conv.forward(t, hn);
    red = sr_norm.forward(t, red);
    kv_src = nchw_to_tokens(t, red);
    lk = (H / sr) * (W / sr);
  }
  Var kv = k.forward(t, kv_src);
  Var vv = v.forward(t, kv_src);
  auto split_heads = [&](Var z, int64_t len) {
    Var r = ag::reshape(t, z, {N, len, heads, d});
    Var p = ag::permute(t, r, {0, 2, 1, 3});
    return ag::reshape(t, p, {N * heads, len, d});
  };
  Var qh = split_heads(qv, L);
  Var kh = split_heads(kv, lk);
  Var vh = split_heads(vv, lk);
  Var att = ag::scale(t, ag::matmul(t, qh, kh, true), 1.0 / std::sqrt(static_cast<double>(d)));
  att = ag::softmax_lastdim(t, att);
  Var out = ag::matmul(t, att, vh);
  out = ag::reshape(t, out, {N, heads, L, d});
  out = ag::permute(t, out, {0, 2, 1, 3});
  out = ag::reshape(t, out, {N, L, C});
  out = proj.forward(t, out);
  x = ag::add(t, x, tokens_to_nchw(t, out, H, W));

  Var h2 = norm2.forward(t, x);
  Var a = fc1.forward(t, nchw_to_tokens(t, h2));
  Var an = tokens_to_nchw(t, a, H, W);
  an = ag::gelu(t, dw.forward(t, an));
  Var b = fc2.forward(t, nchw_to_tokens(t, an));
  return ag::add(t, x, tokens_to_nchw(t, b, H, W));
}

void PatchEmbed::build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t cin,
                       int64_t cout, int k, int stride) {
  conv.build(ps, rng, name + ".conv", cin, cout, k, stride, k / 2);
  norm.build(ps, name + ".norm", cout);
}

Var PatchEmbed::forward(Tape& t, Var x) const { return norm.forward(t, conv.forward(t, x)); }

void StageFusion::build(nn::ParamStore& ps, Rng& rng, const std::string& name, int64_t c) {
  gate_rgb.build(ps, rng, name + ".gate_rgb", 2 * c, c);
  gate_trace.build(ps, rng, name + ".gate_trace", 2 * c, c);
  ffm.build(ps, rng, name + ".ffm", 2 * c, c, 1, 1, 0);
}

std::array<Var, 3> StageFusion::forward(Tape& t, Var rgb, Var tr) const {
  Var pr = ag::global_avg_pool(t, rgb);
  Var pt = ag::global_avg_pool(t, tr);
  Var joint = ag::concat(t, {pr, pt}, 1);
  Var gr = ag::sigmoid(t, gate_rgb.forward(t, joint));
  Var gt = ag::sigmoid(t, gate_trace.forward(t, joint));
  Var rgb2 = ag::add(t, rgb, ag::mul_nc(t, tr, gr));
  Var tr2 = ag::add(t, tr, ag::mul_nc(t, rgb, gt));
  Var fused = ffm.forward(t, ag::concat(t, {rgb2, tr2}, 1));
  return {rgb2, tr2, fused};
}

// ----------------------------------------------------------------- model

GimFormer::GimFormer(const ModelConfig& cfg) : cfg_(cfg) {
  check(cfg.image_size % 32 == 0, "GimFormer: image size must be a multiple of 32");
  check(cfg.widths.size() == 4 && cfg.depths.size() == 4 && cfg.heads.size() == 4 &&
            cfg.sr_ratios.size() == 4 && cfg.mwam_windows.size() == 4,
        "GimFormer: four stages required");
  Rng rng(derive_seed(cfg.seed, hash_str("gimformer-init")));
  stages_.resize(4);
  int64_t grid = cfg.image_size / 4;
  for (int i = 0; i < 4; ++i) {
    Stage& s = stages_[static_cast<size_t>(i)];
    int64_t c = cfg.widths[static_cast<size_t>(i)];
    int64_t cin_rgb = i == 0 ? 3 : cfg.widths[static_cast<size_t>(i - 1)];
    int64_t cin_tr = i == 0 ? 1 : cfg.widths[static_cast<size_t>(i - 1)];
    int k = i == 0 ? 7 : 3;
    int stride = i == 0 ? 4 : 2;
    std::string base = "s" + std::to_string(i);
    s.embed_rgb.build(ps_, rng, base + ".rgb.embed", cin_rgb, c, k, stride);
    if (cfg.use_fsb) s.fsb.build(ps_, rng, base + ".fsb", c, grid, grid);
    s.blocks_rgb.resize(static_cast<size_t>(cfg.depths[static_cast<size_t>(i)]));
    for (size_t b = 0; b < s.blocks_rgb.size(); ++b)
      s.blocks_rgb[b].build(ps_, rng, base + ".rgb.blk" + std::to_string(b), c,
                            cfg.heads[static_cast<size_t>(i)],
                            cfg.sr_ratios[static_cast<size_t>(i)]);
    s.out_norm_rgb.build(ps_, base + ".rgb.norm", c);
    if (cfg.use_mwam)
      s.mwam_rgb.build(ps_, rng, base + ".rgb.mwam", c, cfg.mwam_windows[static_cast<size_t>(i)]);
    if (cfg.use_tracer) {
      s.embed_tr.build(ps_, rng, base + ".tr.embed", cin_tr, c, k, stride);
      s.blocks_tr.resize(static_cast<size_t>(cfg.depths[static_cast<size_t>(i)]));
      for (size_t b = 0; b < s.blocks_tr.size(); ++b)
        s.blocks_tr[b].build(ps_, rng, base + ".tr.blk" + std::to_string(b), c,
                             cfg.heads[static_cast<size_t>(i)],
                             cfg.sr_ratios[static_cast<size_t>(i)]);
      s.out_norm_tr.build(ps_, base + ".tr.norm", c);
      if (cfg.use_mwam)
        s.mwam_tr.build(ps_, rng, base + ".tr.mwam", c, cfg.mwam_windows[static_cast<size_t>(i)]);
      s.fusion.build(ps_, rng, base + ".fusion", c);
    }
    grid /= 2;
  }
  // decoder
  dec_proj_.resize(4);
  for (int i = 0; i < 4; ++i)
    dec_proj_[static_cast<size_t>(i)].build(ps_, rng, "dec.proj" + std::to_string(i),
                                            cfg.widths[static_cast<size_t>(i)], cfg.decoder_dim, 1,
                                            1, 0);
  dec_fuse_.build(ps_, rng, "dec.fuse", 4 * cfg.decoder_dim, cfg.decoder_dim, 1, 1, 0);
  dec_bn_.build(ps_, "dec.bn", cfg.decoder_dim);
  dec_head_.build(ps_, rng, "dec.head", cfg.decoder_dim, 1, 1, 1, 0);
  // classification head
  int64_t c4 = cfg.widths[3];
  cls_conv_.build(ps_, rng, "cls.conv", c4, 128, 1, 1, 0);
  cls_bn_.build(ps_, "cls.bn", 128);
  cls_fc1_.build(ps_, rng, "cls.fc1", 128, 64);
  cls_fc2_.build(ps_, rng, "cls.fc2", 64, 1);
}

PyramidFeatures GimFormer::encode(Tape& t, Var image, Var trace, bool training) {
  (void)training;
  const Tensor& X = t.val(image);
  check(X.ndim() == 4 && X.shape[1] == 3, "encode: expected [N,3,H,W] image");
  check(X.shape[2] % 32 == 0 && X.shape[3] % 32 == 0,
        "encode: input height/width must be multiples of 32");
  if (cfg_.use_tracer) {
    const Tensor& T = t.val(trace);
    check(T.ndim() == 4 && T.shape[1] == 1 && T.shape[2] == X.shape[2] && T.shape[3] == X.shape[3],
          "encode: trace map must be [N,1,H,W] matching the image");
  }
  PyramidFeatures out;
  Var rgb = image;
  Var tr = trace;
  for (int i = 0; i < 4; ++i) {
    Stage& s = stages_[static_cast<size_t>(i)];
    rgb = s.embed_rgb.forward(t, rgb);
    if (cfg_.use_fsb) rgb = s.fsb.forward(t, rgb);
    for (const auto& blk : s.blocks_rgb) rgb = blk.forward(t, rgb);
    rgb = s.out_norm_rgb.forward(t, rgb);
    if (cfg_.use_mwam) rgb = s.mwam_rgb.forward(t, rgb);
    if (cfg_.use_tracer) {
      tr = s.embed_tr.forward(t, tr);
      for (const auto& blk : s.blocks_tr) tr = blk.forward(t, tr);
      tr = s.out_norm_tr.forward(t, tr);
      if (cfg_.use_mwam) tr = s.mwam_tr.forward(t, tr);
      auto [rgb2, tr2, fused] = s.fusion.forward(t, rgb, tr);
      rgb = rgb2;
      tr = tr2;
      out.stages[static_cast<size_t>(i)] = fused;
    } else {
      out.stages[static_cast<size_t>(i)] = rgb;
    }
  }
  return out;
}

ModelOutput GimFormer::decode(Tape& t, const PyramidFeatures& f, bool training) {
  const Tensor& f0 = t.val(f.stages[0]);
  int64_t N = f0.shape[0], h0 = f0.shape[2], w0 = f0.shape[3];
  std::vector<Var> proj;
  for (int i = 0; i < 4; ++i) {
    Var p = dec_proj_[static_cast<size_t>(i)].forward(t, f.stages[static_cast<size_t>(i)]);
    if (i > 0) p = ag::bilinear_upsample(t, p, h0, w0);
    proj.push_back(p);
  }
  Var cat = ag::concat(t, proj, 1);
  Var fused = ag::relu(t, dec_bn_.forward(t, dec_fuse_.forward(t, cat), training));
  Var logits4 = dec_head_.forward(t, fused);  // stride-4 logits
  Var mask_logits = ag::bilinear_upsample(t, logits4, h0 * 4, w0 * 4);

  Var g = ag::global_avg_pool(t, f.stages[3]);  // [N,C4]
  int64_t c4 = t.val(g).shape[1];
  Var g4 = ag::reshape(t, g, {N, c4, 1, 1});
  Var h = ag::relu(t, cls_bn_.forward(t, cls_conv_.forward(t, g4), training));
  Var hf = ag::reshape(t, h, {N, 128});
  Var label = cls_fc2_.forward(t, ag::relu(t, cls_fc1_.forward(t, hf)));
  return {mask_logits, label};
}

ModelOutput GimFormer::forward(Tape& t, Var image, Var trace, bool training) {
  PyramidFeatures f = encode(t, image, trace, training);
  return decode(t, f, training);
}

void GimFormer::save(const std::string& path, const std::string& config_fingerprint) const {
  ps_.save(path, cfg_.arch_fingerprint(), config_fingerprint);
}

std::string GimFormer::load(const std::string& path) {
  return ps_.load(path, cfg_.arch_fingerprint());
}

Var model_loss(Tape& t, Var label_logit, Var mask_logits, const Tensor& labels,
               const Tensor& masks) {
  for (double v : labels.data)
    check(v == 0.0 || v == 1.0, "model_loss: non-binary label targets");
  for (double v : masks.data)
    check(v == 0.0 || v == 1.0, "model_loss: non-binary mask targets");
  check(t.val(label_logit).numel() == labels.numel(), "model_loss: label count mismatch");
  check(t.val(mask_logits).numel() == masks.numel(), "model_loss: mask size mismatch");
  Tensor lt = labels, mt = masks;
  lt.shape = t.val(label_logit).shape;
  mt.shape = t.val(mask_logits).shape;
  Var cls = ag::bce_with_logits_mean(t, label_logit, std::move(lt));
  Var seg = ag::bce_with_logits_mean(t, mask_logits, std::move(mt));
  return ag::add(t, cls, seg);
}

// ----------------------------------------------------------------- training

namespace {

struct Example {
  Tensor image;  // [3,S,S]
  Tensor trace;  // [1,S,S]
  Tensor mask;   // [S,S]
  double label;
};

struct AugmentParams {
  int64_t target = 0;
  int64_t y0 = 0, x0 = 0;
  bool flip = false;
};

AugmentParams draw_augment(Rng& rng, int64_t size) {
  AugmentParams a;
  double s = rng.uniform(0.5, 2.0);
  int64_t target = static_cast<int64_t>(std::llround(static_cast<double>(size) * s / 32.0)) * 32;
  target = std::clamp<int64_t>(target, 32, 2 * size);
  a.target = target;
  if (target > size) {
    a.y0 = rng.uniform_int(0, target - size);
    a.x0 = rng.uniform_int(0, target - size);
  } else if (target < size) {
    a.y0 = -(size - target) / 2;
    a.x0 = -(size - target) / 2;
  }
  a.flip = rng.bernoulli(0.5);
  return a;
}

Tensor apply_augment_chw(const Tensor& t, const AugmentParams& a, int64_t size, bool is_mask) {
  Tensor out = t;
  if (a.flip) out = data::hflip_chw(out);
  if (a.target != size) {
    out = data::resize_chw(out, a.target, a.target);
    if (is_mask)
      for (auto& v : out.data) v = v >= 0.5 ? 1.0 : 0.0;
  }
  if (a.target != size || a.y0 != 0 || a.x0 != 0) out = data::crop_or_pad_chw(out, size, a.y0, a.x0);
  return out;
}

double full_set_loss(GimFormer& model, const std::vector<Example>& examples, int batch) {
  double total = 0.0;
  int64_t count = 0;
  int64_t S = model.config().image_size;
  for (size_t at = 0; at < examples.size(); at += static_cast<size_t>(batch)) {
    size_t bn = std::min(static_cast<size_t>(batch), examples.size() - at);
    Tensor images({static_cast<int64_t>(bn), 3, S, S});
    Tensor traces({static_cast<int64_t>(bn), 1, S, S});
    Tensor masks({static_cast<int64_t>(bn), S, S});
    Tensor labels({static_cast<int64_t>(bn)});
    for (size_t i = 0; i < bn; ++i) {
      const Example& e = examples[at + i];
      std::copy(e.image.data.begin(), e.image.data.end(),
                images.data.begin() + static_cast<int64_t>(i) * 3 * S * S);
      std::copy(e.trace.data.begin(), e.trace.data.end(),
                traces.data.begin() + static_cast<int64_t>(i) * S * S);
      std::copy(e.mask.data.begin(), e.mask.data.end(),
                masks.data.begin() + static_cast<int64_t>(i) * S * S);
      labels[static_cast<int64_t>(i)] = e.label;
    }
    Tape t;
    ModelOutput out = model.forward(t, t.leaf(std::move(images)), t.leaf(std::move(traces)), false);
    Var loss = model_loss(t, out.label_logit, out.mask_logits, labels, masks);
    total += t.val(loss)[0] * static_cast<double>(bn);
    count += static_cast<int64_t>(bn);
  }
  return total / static_cast<double>(count);
}

}  // namespace

ModelTrainStats train_model(GimFormer& model, tracer::ShadowTracer* tr,
                            const synth::DatasetManifest& manifest,
                            const std::vector<std::string>& subsets, std::ostream* log) {
  const ModelConfig& cfg = model.config();
  check(!cfg.use_tracer || tr != nullptr, "train_model: trace branch enabled but no tracer given");

  std::vector<synth::ManifestEntry> entries;
  for (const auto& s : subsets) {
    auto part = manifest.filter(s, "train");
    entries.insert(entries.end(), part.begin(), part.end());
  }
  check(!entries.empty(), "train_model: no training entries");

  int64_t S = cfg.image_size;
  data::ImageCache cache(manifest.root);
  std::vector<Example> examples(entries.size());
  // base images + frozen-tracer trace maps, computed once per image
  for (size_t i = 0; i < entries.size(); ++i) {
    examples[i].image = data::load_input_chw(cache, entries[i]);
    check(examples[i].image.shape[1] == S && examples[i].image.shape[2] == S,
          "train_model: image size does not match the model configuration");
    examples[i].mask = data::load_mask(cache, entries[i], static_cast<int>(S), static_cast<int>(S));
    examples[i].label = entries[i].label;
  }
  if (cfg.use_tracer && !cfg.finetune_tracer) {
    const int chunk = 16;
    for (size_t at = 0; at < examples.size(); at += chunk) {
      size_t bn = std::min(static_cast<size_t>(chunk), examples.size() - at);
      Tensor batch({static_cast<int64_t>(bn), 3, S, S});
      for (size_t i = 0; i < bn; ++i)
        std::copy(examples[at + i].image.data.begin(), examples[at + i].image.data.end(),
                  batch.data.begin() + static_cast<int64_t>(i) * 3 * S * S);
      Tensor traces = tr->infer(batch);
      for (size_t i = 0; i < bn; ++i) {
        Tensor& dst = examples[at + i].trace;
        dst = Tensor::zeros({1, S, S});
        std::copy(traces.data.begin() + static_cast<int64_t>(i) * S * S,
                  traces.data.begin() + static_cast<int64_t>(i + 1) * S * S, dst.data.begin());
      }
    }
  } else {
    for (auto& e : examples) e.trace = Tensor::zeros({1, S, S});
  }

  ModelTrainStats stats;
  stats.initial_loss = full_set_loss(model, examples, 8);

  nn::AdamW opt;
  opt.lr = cfg.lr;
  opt.eps = cfg.adam_eps;
  opt.weight_decay = cfg.weight_decay;

  int64_t n = static_cast<int64_t>(examples.size());
  int64_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  int64_t step = 0;
  std::vector<int64_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, hash_str("epoch") + static_cast<uint64_t>(epoch)));
    erng.shuffle(order);
    double epoch_loss = 0.0;
    int64_t epoch_count = 0;
    for (int64_t at = 0; at < n; at += cfg.batch) {
      int64_t bn = std::min<int64_t>(cfg.batch, n - at);
      Tensor images({bn, 3, S, S}), traces({bn, 1, S, S}), masks({bn, S, S}), labels({bn});
      for (int64_t i = 0; i < bn; ++i) {
        const Example& e = examples[static_cast<size_t>(order[static_cast<size_t>(at + i)])];
        Tensor img = e.image, trc = e.trace, msk = e.mask;
        if (cfg.augment) {
          Rng arng(derive_seed(cfg.seed, hash_str("aug") + static_cast<uint64_t>(step) * 64 +
                                             static_cast<uint64_t>(i)));
          AugmentParams ap = draw_augment(arng, S);
          img = apply_augment_chw(img, ap, S, false);
          if (!cfg.finetune_tracer) trc = apply_augment_chw(trc, ap, S, false);
          Tensor m3 = msk;
          m3.shape = {1, S, S};
          m3 = apply_augment_chw(m3, ap, S, true);
          m3.shape = {S, S};
          msk = m3;
        }
        std::copy(img.data.begin(), img.data.end(), images.data.begin() + i * 3 * S * S);
        std::copy(trc.data.begin(), trc.data.end(), traces.data.begin() + i * S * S);
        std::copy(msk.data.begin(), msk.data.end(), masks.data.begin() + i * S * S);
        labels[i] = e.label;
      }
      Tape t;
      Var image_v = t.leaf(std::move(images));
      Var trace_v;
      if (cfg.use_tracer && cfg.finetune_tracer)
        trace_v = tr->forward(t, image_v, false);
      else
        trace_v = t.leaf(std::move(traces));
      ModelOutput out = model.forward(t, image_v, trace_v, true);
      Var loss = model_loss(t, out.label_logit, out.mask_logits, labels, masks);
      double lv = t.val(loss)[0];
      if (!std::isfinite(lv))
        throw NumericalError("train_model: non-finite loss at step " + std::to_string(step));
      model.params().zero_grad();
      if (cfg.use_tracer && cfg.finetune_tracer) tr->params().zero_grad();
      t.backward(loss);
      double lr_now = nn::poly_lr(cfg.lr, step, total_steps, cfg.poly_power);
      opt.step(model.params(), lr_now);
      epoch_loss += lv * static_cast<double>(bn);
      epoch_count += bn;
      ++step;
    }
    stats.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_count));
    if (log)
      (*log) << "epoch " << (epoch + 1) << " mean-train-loss " << stats.epoch_losses.back()
             << "\n";
  }
  stats.final_epoch_loss = full_set_loss(model, examples, 8);
  if (log)
    (*log) << "initial-loss " << stats.initial_loss << " final-loss " << stats.final_epoch_loss
           << "\n";
  return stats;
}

std::vector<ScoreResult> ModelScorer::score(const std::vector<Image>& images) {
  std::vector<ScoreResult> results(images.size());
  int64_t S = model_.config().image_size;
  for (size_t at = 0; at < images.size(); at += static_cast<size_t>(batch_)) {
    size_t bn = std::min(static_cast<size_t>(batch_), images.size() - at);
    Tensor batch({static_cast<int64_t>(bn), 3, S, S});
    for (size_t i = 0; i < bn; ++i) {
      const Image& img = images[at + i];
      check(img.h == S && img.w == S && img.c == 3, "ModelScorer: image size mismatch");
      Tensor chw = image_to_chw(img);
      std::copy(chw.data.begin(), chw.data.end(),
                batch.data.begin() + static_cast<int64_t>(i) * 3 * S * S);
    }
    Tensor traces;
    if (model_.config().use_tracer) {
      check(tracer_ != nullptr, "ModelScorer: trace branch enabled but no tracer");
      traces = tracer_->infer(batch);
    } else {
      traces = Tensor::zeros({static_cast<int64_t>(bn), 1, S, S});
    }
    Tape t;
    ModelOutput out = model_.forward(t, t.leaf(std::move(batch)), t.leaf(std::move(traces)), false);
    const Tensor& ml = t.val(out.mask_logits);
    const Tensor& ll = t.val(out.label_logit);
    for (size_t i = 0; i < bn; ++i) {
      ScoreResult& r = results[at + i];
      r.mask_probs = Tensor::zeros({S, S});
      for (int64_t p = 0; p < S * S; ++p) {
        double z = ml[static_cast<int64_t>(i) * S * S + p];
        r.mask_probs[p] = 1.0 / (1.0 + std::exp(-z));
      }
      r.label_logit = ll[static_cast<int64_t>(i)];
      r.label_prob = 1.0 / (1.0 + std::exp(-r.label_logit));
    }
  }
  return results;
}

}  // namespace gimlab::model
