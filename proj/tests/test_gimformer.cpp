#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "gimlab/gimformer.hpp"
#include "fixtures.hpp"
#include "testutil.hpp"

using namespace gimlab;
using namespace gimlab::model;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.image_size = 64;
  cfg.widths = {8, 12, 16, 24};
  cfg.depths = {1, 1, 1, 1};
  cfg.heads = {1, 2, 2, 4};
  cfg.sr_ratios = {8, 4, 2, 1};
  cfg.decoder_dim = 16;
  cfg.batch = 4;
  cfg.epochs = 1;
  cfg.seed = 1;
  return cfg;
}

}  // namespace

TEST_CASE("window_stats: degenerate cases and brute-force oracle") {
  Rng rng(1);
  // constant input: mean == max == constant
  Tensor c = Tensor::full({4, 4}, 0.7);
  auto [ca, cm] = window_stats(c, 3);
  for (double v : ca.data) CHECK(v == doctest::Approx(0.7));
  for (double v : cm.data) CHECK(v == doctest::Approx(0.7));

  // k = 1 is the identity for both branches
  Tensor x = testutil::rand_tensor({6, 6}, rng);
  auto [a1, m1] = window_stats(x, 1);
  CHECK(a1.data == x.data);
  CHECK(m1.data == x.data);

  // random map matches the double-loop oracle exactly
  for (int k : {3, 5, 7, 11}) {
    auto [fa, fm] = window_stats(x, k);
    Tensor oa, om;
    testutil::window_oracle(x, k, oa, om);
    CHECK(fa.data == oa.data);
    CHECK(fm.data == om.data);
  }
  CHECK_THROWS_AS(window_stats(x, 4), std::invalid_argument);
  CHECK_THROWS_AS(window_stats(x, 13), std::invalid_argument);  // > 2*min-1 = 11
}

TEST_CASE("fsb: identity with identity filter and zero fusion weights") {
  nn::ParamStore ps;
  Rng rng(2);
  FsbBlock fsb;
  fsb.build(ps, rng, "fsb", 3, 8, 8);
  nn::fill_constant(ps.find("fsb.fuse.w")->value, 0.0);
  nn::fill_constant(ps.find("fsb.fuse.b")->value, 0.0);
  Tensor x = testutil::rand_tensor({2, 3, 8, 8}, rng);
  Tape t;
  Var y = fsb.forward(t, t.leaf(x));
  CHECK(t.val(y).data == x.data);  // exact identity
}

TEST_CASE("mwam: zero anomaly convolutions give the exact identity") {
  nn::ParamStore ps;
  Rng rng(3);
  MwamBlock mwam;
  mwam.build(ps, rng, "mwam", 4, {3, 5, 7});
  nn::fill_constant(ps.find("mwam.conv_avg.w")->value, 0.0);
  nn::fill_constant(ps.find("mwam.conv_avg.b")->value, 0.0);
  nn::fill_constant(ps.find("mwam.conv_max.w")->value, 0.0);
  nn::fill_constant(ps.find("mwam.conv_max.b")->value, 0.0);
  Tensor x = testutil::rand_tensor({2, 4, 6, 6}, rng);
  Tape t;
  Var y = mwam.forward(t, t.leaf(x));
  CHECK(t.val(y).data == x.data);
}

TEST_CASE("mwam: constant input yields zero windowed differences") {
  Tensor x = Tensor::full({1, 2, 5, 5}, 0.3);
  Tape t;
  Var xv = t.leaf(x);
  for (int k : {3, 5}) {
    Var fa = ag::window_mean(t, xv, k);
    Var fm = ag::window_max(t, xv, k);
    Var da = ag::sub(t, xv, fa);
    Var dm = ag::sub(t, xv, fm);
    for (double v : t.val(da).data) CHECK(v == doctest::Approx(0.0));
    for (double v : t.val(dm).data) CHECK(v == doctest::Approx(0.0));
  }
}

TEST_CASE("mwam: windowed differences match the Eq-6 scalar oracle") {
  Rng rng(4);
  Tensor x = testutil::rand_tensor({1, 4, 6, 6}, rng);
  std::vector<double> w_sigma = {0.01, 0.2, 0.0, 1.5};
  for (int k : {3, 5}) {
    // graph path: (x - window_u(x)) / max(std(x), 1e-5 + w_sigma)
    Tape t;
    Var xv = t.leaf(x);
    Tensor ws({4});
    for (int i = 0; i < 4; ++i) ws[i] = w_sigma[static_cast<size_t>(i)];
    Var floor_c = ag::add(t, t.leaf(ws), t.leaf(Tensor::full({4}, 1e-5)));
    Var sigma_star = ag::maximum(t, ag::spatial_std(t, xv), ag::expand_to_nc(t, floor_c, 1));
    Var da = ag::div_nc(t, ag::sub(t, xv, ag::window_mean(t, xv, k)), sigma_star);
    Var dm = ag::div_nc(t, ag::sub(t, xv, ag::window_max(t, xv, k)), sigma_star);
    Tensor oa, om;
    testutil::eq6_oracle(x, w_sigma, k, oa, om);
    for (int64_t i = 0; i < oa.numel(); ++i) {
      CHECK(t.val(da)[i] == doctest::Approx(oa[i]).epsilon(1e-9));
      CHECK(t.val(dm)[i] == doctest::Approx(om[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("mwam: sigma floor stays above 1e-5 for any parameter value") {
  nn::ParamStore ps;
  Rng rng(5);
  MwamBlock mwam;
  mwam.build(ps, rng, "mwam", 2, {3, 5, 7});
  for (double rho : {-100.0, -1.0, 0.0, 5.0}) {
    nn::fill_constant(ps.find("mwam.rho")->value, rho);
    // constant input makes sigma(F) ~ 0, so the floor is what protects Eq. 6
    Tensor x = Tensor::full({1, 2, 6, 6}, 0.5);
    Tape t;
    Var y = mwam.forward(t, t.leaf(x));
    CHECK(t.val(y).all_finite());
    Tape t2;
    Var ws = ag::softplus(t2, t2.param(*mwam.rho));
    for (int64_t i = 0; i < 2; ++i) CHECK(t2.val(ws)[i] >= 0.0);
  }
}

TEST_CASE("encoder: stage shapes at 64 and 512, trace sensitivity") {
  ModelConfig cfg = tiny_cfg();
  GimFormer net(cfg);
  Rng rng(6);
  Tensor img = testutil::rand_tensor({1, 3, 64, 64}, rng, 0.0, 1.0);
  Tensor trace = testutil::rand_tensor({1, 1, 64, 64}, rng, -0.1, 0.1);
  Tape t;
  PyramidFeatures f = net.encode(t, t.leaf(img), t.leaf(trace), false);
  const int64_t grids[4] = {16, 8, 4, 2};
  for (int i = 0; i < 4; ++i) {
    const Tensor& fi = t.val(f.stages[static_cast<size_t>(i)]);
    CHECK(fi.shape == std::vector<int64_t>{1, cfg.widths[static_cast<size_t>(i)], grids[i],
                                           grids[i]});
  }

  // zero vs random trace input must change stage-4 output (live branch)
  Tape t2;
  PyramidFeatures fz = net.encode(t2, t2.leaf(img), t2.leaf(Tensor::zeros({1, 1, 64, 64})), false);
  CHECK(t.val(f.stages[3]).data != t2.val(fz.stages[3]).data);

  // non-multiple-of-32 inputs are rejected
  Tape t3;
  Tensor bad = testutil::rand_tensor({1, 3, 48, 48}, rng, 0.0, 1.0);
  CHECK_THROWS_WITH_AS(net.encode(t3, t3.leaf(bad), t3.leaf(Tensor::zeros({1, 1, 48, 48})), false),
                       doctest::Contains("multiples of 32"), std::invalid_argument);

  // 512 input with a matching config: strides 4/8/16/32 give 128/64/32/16
  ModelConfig big = tiny_cfg();
  big.image_size = 512;
  big.widths = {4, 4, 8, 8};
  big.heads = {1, 1, 2, 2};
  big.decoder_dim = 8;
  GimFormer net512(big);
  Tape t4;
  Tensor img512 = testutil::rand_tensor({1, 3, 512, 512}, rng, 0.0, 1.0);
  PyramidFeatures f512 =
      net512.encode(t4, t4.leaf(img512), t4.leaf(Tensor::zeros({1, 1, 512, 512})), false);
  const int64_t big_grids[4] = {128, 64, 32, 16};
  for (int i = 0; i < 4; ++i) {
    const Tensor& fi = t4.val(f512.stages[static_cast<size_t>(i)]);
    CHECK(fi.shape[2] == big_grids[i]);
    CHECK(fi.shape[3] == big_grids[i]);
  }
}

TEST_CASE("decode: shape contract, zero heads, batch independence") {
  ModelConfig cfg = tiny_cfg();
  GimFormer net(cfg);
  Rng rng(7);
  Tensor img = testutil::rand_tensor({3, 3, 64, 64}, rng, 0.0, 1.0);
  Tensor trace = testutil::rand_tensor({3, 1, 64, 64}, rng, -0.1, 0.1);
  Tape t;
  ModelOutput out = net.forward(t, t.leaf(img), t.leaf(trace), false);
  CHECK(t.val(out.mask_logits).shape == std::vector<int64_t>{3, 1, 64, 64});
  CHECK(t.val(out.label_logit).shape == std::vector<int64_t>{3, 1});

  // zero-initialized heads on all-zero features -> zero logits (sigmoid 0.5)
  nn::fill_constant(net.params().find("dec.head.w")->value, 0.0);
  nn::fill_constant(net.params().find("dec.head.b")->value, 0.0);
  nn::fill_constant(net.params().find("cls.fc2.w")->value, 0.0);
  nn::fill_constant(net.params().find("cls.fc2.b")->value, 0.0);
  Tape tz;
  ModelOutput outz = net.forward(tz, tz.leaf(img), tz.leaf(trace), false);
  for (double v : tz.val(outz.mask_logits).data) CHECK(v == 0.0);
  for (double v : tz.val(outz.label_logit).data) CHECK(v == 0.0);

  // permuting the batch permutes outputs identically (inference mode)
  GimFormer net2(cfg);
  Tensor img_perm(img.shape), trace_perm(trace.shape);
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i) {
    std::copy_n(img.ptr() + perm[i] * 3 * 64 * 64, 3 * 64 * 64,
                img_perm.ptr() + i * 3 * 64 * 64);
    std::copy_n(trace.ptr() + perm[i] * 64 * 64, 64 * 64, trace_perm.ptr() + i * 64 * 64);
  }
  Tape ta, tb;
  ModelOutput oa = net2.forward(ta, ta.leaf(img), ta.leaf(trace), false);
  ModelOutput ob = net2.forward(tb, tb.leaf(img_perm), tb.leaf(trace_perm), false);
  for (int i = 0; i < 3; ++i) {
    CHECK(ta.val(oa.label_logit)[perm[i]] == doctest::Approx(tb.val(ob.label_logit)[i]));
    for (int64_t p = 0; p < 64 * 64; ++p)
      CHECK(ta.val(oa.mask_logits)[perm[i] * 64 * 64 + p] ==
            doctest::Approx(tb.val(ob.mask_logits)[i * 64 * 64 + p]).epsilon(1e-12));
  }
}

TEST_CASE("model_loss: closed forms and oracle") {
  Rng rng(8);
  Tensor labels = Tensor::from({2}, {1.0, 0.0});
  Tensor masks = Tensor::zeros({2, 4, 4});
  for (int64_t i = 0; i < 8; ++i) masks[i] = 1.0;  // first image: top half manipulated

  // perfect confident predictions -> loss < 1e-6
  Tape t;
  Tensor ll({2, 1});
  ll[0] = 20.0;
  ll[1] = -20.0;
  Tensor ml({2, 1, 4, 4});
  for (int64_t i = 0; i < 32; ++i) ml[i] = masks[i] > 0.5 ? 20.0 : -20.0;
  Var loss = model_loss(t, t.leaf(ll), t.leaf(ml), labels, masks);
  CHECK(t.val(loss)[0] < 1e-6);

  // all-zero logits -> 2 ln 2
  Tape t2;
  Var loss2 = model_loss(t2, t2.leaf(Tensor::zeros({2, 1})), t2.leaf(Tensor::zeros({2, 1, 4, 4})),
                         labels, masks);
  CHECK(t2.val(loss2)[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));

  // random case equals the scalar BCE oracle within 1e-6
  Tensor rl = testutil::rand_tensor({2, 1}, rng, -2.0, 2.0);
  Tensor rm = testutil::rand_tensor({2, 1, 4, 4}, rng, -2.0, 2.0);
  Tape t3;
  Var loss3 = model_loss(t3, t3.leaf(rl), t3.leaf(rm), labels, masks);
  Tensor masks_flat = masks;
  masks_flat.shape = {2 * 4 * 4};
  Tensor rm_flat = rm;
  rm_flat.shape = {2 * 4 * 4};
  double oracle = testutil::bce_oracle(rl, labels) + testutil::bce_oracle(rm_flat, masks_flat);
  CHECK(std::abs(t3.val(loss3)[0] - oracle) < 1e-6 * std::max(1.0, oracle));

  // non-binary targets rejected
  Tape t4;
  Tensor bad_labels = Tensor::from({2}, {0.5, 0.0});
  CHECK_THROWS_WITH_AS(
      model_loss(t4, t4.leaf(Tensor::zeros({2, 1})), t4.leaf(Tensor::zeros({2, 1, 4, 4})),
                 bad_labels, masks),
      doctest::Contains("non-binary"), std::invalid_argument);
}

TEST_CASE("gradient suite on a 1x8x8x2 toy model") {
  // FSB + MWAM slice with the criterion parameters: spectral filter, w_sigma,
  // spatial-branch conv, anomaly-map conv and anomaly score head.
  nn::ParamStore ps;
  Rng rng(9);
  FsbBlock fsb;
  fsb.build(ps, rng, "fsb", 2, 8, 8);
  MwamBlock mwam;
  mwam.build(ps, rng, "mwam", 2, {3, 5, 7});
  // nudge the filter off the identity so spectral gradients are generic
  for (auto& v : ps.find("fsb.g_re")->value.data) v = 1.0 + 0.3 * rng.uniform(-1.0, 1.0);
  for (auto& v : ps.find("fsb.g_im")->value.data) v = 0.3 * rng.uniform(-1.0, 1.0);
  nn::fill_constant(ps.find("mwam.rho")->value, -1.0);

  Tensor x = testutil::rand_tensor({1, 2, 8, 8}, rng);
  Tensor target = testutil::rand_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
  for (auto& v : target.data) v = v > 0.5 ? 1.0 : 0.0;
  auto forward = [&](Tape& t) {
    Var h = fsb.forward(t, t.leaf(x));
    h = mwam.forward(t, h);
    Tensor tt = target;
    tt.shape = t.val(h).shape;
    return ag::bce_with_logits_mean(t, h, std::move(tt));
  };
  auto loss = [&]() {
    Tape t;
    return t.val(forward(t))[0];
  };
  ps.zero_grad();
  {
    Tape t;
    t.backward(forward(t));
  }
  for (const char* name : {"fsb.g_re", "fsb.g_im", "mwam.rho", "fsb.conv1.w", "fsb.conv2.w",
                           "fsb.fuse.w", "mwam.conv_avg.w", "mwam.conv_max.w",
                           "mwam.score_dw_avg.w", "mwam.score_pw_avg.w", "mwam.score_pw_max.b"}) {
    auto* p = ps.find(name);
    REQUIRE(p != nullptr);
    auto res = testutil::grad_check(*p, loss, p->grad, 1e-5, 48);
    INFO("param " << name << " rel err " << res.max_rel_err << " over " << res.checked);
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("train_model: loss decreases, deterministic, ablation fingerprints differ") {
  auto manifest = testutil::tiny_dataset("model_train", 6, 2);
  ModelConfig cfg = tiny_cfg();
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  cfg.augment = true;
  std::vector<std::string> fams = {"SD-like", "GLIDE-like", "DDNM-like"};

  tracer::TracerConfig tcfg;
  tcfg.hidden = 8;
  tcfg.iters = 20;
  tcfg.batch = 4;
  tcfg.patch = 32;
  tcfg.seed = 2;
  tracer::ShadowTracer tr(tcfg);
  tracer::train_tracer(tr, manifest, fams, tcfg);

  GimFormer net(cfg);
  ModelTrainStats stats = train_model(net, &tr, manifest, fams);
  INFO("initial " << stats.initial_loss << " final " << stats.final_epoch_loss);
  CHECK(stats.final_epoch_loss < stats.initial_loss);
  CHECK(stats.epoch_losses.size() == 2);

  GimFormer net2(cfg);
  ModelTrainStats stats2 = train_model(net2, &tr, manifest, fams);
  CHECK(stats.final_epoch_loss == stats2.final_epoch_loss);  // same seed, same result

  ModelConfig ab = cfg;
  ab.use_mwam = false;
  CHECK(ab.arch_fingerprint() != cfg.arch_fingerprint());
  ModelConfig ab2 = cfg;
  ab2.use_fsb = false;
  CHECK(ab2.arch_fingerprint() != cfg.arch_fingerprint());
  CHECK(ab2.arch_fingerprint() != ab.arch_fingerprint());
}

TEST_CASE("model checkpoint roundtrip and scorer") {
  ModelConfig cfg = tiny_cfg();
  GimFormer net(cfg);
  std::string path = (fs::temp_directory_path() / "gimlab_model_test.ckpt").string();
  net.save(path, "run-1");
  GimFormer net2(cfg);
  CHECK(net2.load(path) == "run-1");

  ModelConfig other = cfg;
  other.use_mwam = false;
  GimFormer net3(other);
  CHECK_THROWS_WITH_AS(net3.load(path), doctest::Contains("fingerprint"), std::runtime_error);
  fs::remove(path);

  tracer::TracerConfig tcfg;
  tcfg.hidden = 8;
  tcfg.seed = 3;
  tracer::ShadowTracer tr(tcfg);
  ModelScorer scorer(net, &tr, 2);
  Rng rng(10);
  std::vector<Image> images(3, testutil::rand_image(64, 64, 3, rng));
  auto res = scorer.score(images);
  REQUIRE(res.size() == 3);
  for (const auto& r : res) {
    CHECK(r.mask_probs.shape == std::vector<int64_t>{64, 64});
    for (double v : r.mask_probs.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(r.label_prob >= 0.0);
    CHECK(r.label_prob <= 1.0);
  }
}
