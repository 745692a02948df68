#pragma once

#include <cmath>
#include <complex>
#include <functional>
#include <vector>

#include "gimlab/autograd.hpp"
#include "gimlab/image.hpp"
#include "gimlab/rng.hpp"
#include "gimlab/tensor.hpp"

namespace testutil {

using gimlab::Image;
using gimlab::Rng;
using gimlab::Tensor;

inline Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline Image rand_image(int h, int w, int c, Rng& rng) {
  Image img(h, w, c);
  for (auto& v : img.data) v = rng.uniform(0.0, 1.0);
  return img;
}

// --------------------------------------------------------------- oracles

/// Sliding-window mean/max by direct enumeration with replicate clamping.
inline void window_oracle(const Tensor& plane /*[H,W]*/, int k, Tensor& mean_out,
                          Tensor& max_out) {
  int64_t h = plane.shape[0], w = plane.shape[1];
  mean_out = Tensor::zeros({h, w});
  max_out = Tensor::zeros({h, w});
  int r = k / 2;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0.0, best = -1e300;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          int64_t yy = std::clamp<int64_t>(y + dy, 0, h - 1);
          int64_t xx = std::clamp<int64_t>(x + dx, 0, w - 1);
          double v = plane[yy * w + xx];
          acc += v;
          best = std::max(best, v);
        }
      mean_out[y * w + x] = acc / (static_cast<double>(k) * k);
      max_out[y * w + x] = best;
    }
}

/// Windowed-difference oracle: (F - F_u^k)/sigma*, sigma* = max(sigma(F),
/// 1e-5 + w_sigma) with per-channel population std over spatial positions.
inline void eq6_oracle(const Tensor& x /*[N,C,H,W]*/, const std::vector<double>& w_sigma, int k,
                       Tensor& d_avg, Tensor& d_max) {
  int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  d_avg = Tensor::zeros(x.shape);
  d_max = Tensor::zeros(x.shape);
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      Tensor plane({h, w});
      for (int64_t i = 0; i < h * w; ++i) plane[i] = x[(ni * c + ci) * h * w + i];
      double mu = 0.0;
      for (int64_t i = 0; i < h * w; ++i) mu += plane[i];
      mu /= static_cast<double>(h * w);
      double var = 0.0;
      for (int64_t i = 0; i < h * w; ++i) var += (plane[i] - mu) * (plane[i] - mu);
      var /= static_cast<double>(h * w);
      double sigma = std::sqrt(var + 1e-12);
      double sigma_star = std::max(sigma, 1e-5 + w_sigma[static_cast<size_t>(ci)]);
      Tensor fa, fm;
      window_oracle(plane, k, fa, fm);
      for (int64_t i = 0; i < h * w; ++i) {
        d_avg[(ni * c + ci) * h * w + i] = (plane[i] - fa[i]) / sigma_star;
        d_max[(ni * c + ci) * h * w + i] = (plane[i] - fm[i]) / sigma_star;
      }
    }
}

/// Naive O(N^2) DFT-filter-inverse oracle matching the spectral_filter
/// convention: left half-grid entries used directly, right columns take the
/// conjugate of the mirrored stored entry; output is the real part.
inline Tensor dft_filter_oracle(const Tensor& x /*[N,C,H,W]*/, const Tensor& g_re,
                                const Tensor& g_im) {
  using cd = std::complex<double>;
  int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  int64_t wr = w / 2 + 1;
  Tensor out(x.shape);
  const double tau = 6.283185307179586476925286766559;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      std::vector<cd> spec(static_cast<size_t>(h * w));
      for (int64_t fy = 0; fy < h; ++fy)
        for (int64_t fx = 0; fx < w; ++fx) {
          cd acc = 0.0;
          for (int64_t py = 0; py < h; ++py)
            for (int64_t px = 0; px < w; ++px) {
              double ang = -tau * (static_cast<double>(fy * py) / h +
                                   static_cast<double>(fx * px) / w);
              acc += x[((ni * c + ci) * h + py) * w + px] * cd(std::cos(ang), std::sin(ang));
            }
          cd g;
          if (fx < wr) {
            g = cd(g_re[(ci * h + fy) * wr + fx], g_im[(ci * h + fy) * wr + fx]);
          } else {
            int64_t my = (h - fy) % h, mx = w - fx;
            g = std::conj(cd(g_re[(ci * h + my) * wr + mx], g_im[(ci * h + my) * wr + mx]));
          }
          spec[static_cast<size_t>(fy * w + fx)] = acc * g;
        }
      for (int64_t py = 0; py < h; ++py)
        for (int64_t px = 0; px < w; ++px) {
          cd acc = 0.0;
          for (int64_t fy = 0; fy < h; ++fy)
            for (int64_t fx = 0; fx < w; ++fx) {
              double ang = tau * (static_cast<double>(fy * py) / h +
                                  static_cast<double>(fx * px) / w);
              acc += spec[static_cast<size_t>(fy * w + fx)] * cd(std::cos(ang), std::sin(ang));
            }
          out[((ni * c + ci) * h + py) * w + px] = acc.real() / static_cast<double>(h * w);
        }
    }
  return out;
}

/// Scalar-loop binary cross-entropy (probabilities computed from logits).
inline double bce_oracle(const Tensor& logits, const Tensor& targets) {
  double acc = 0.0;
  for (int64_t i = 0; i < logits.numel(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits[i]));
    p = std::min(1.0 - 1e-15, std::max(1e-15, p));
    acc += -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
  }
  return acc / static_cast<double>(logits.numel());
}

/// Confusion-matrix F1 oracle.
inline double f1_oracle(const Tensor& probs, const Tensor& gt, double thr) {
  int64_t tp = 0, fp = 0, fn = 0;
  for (int64_t i = 0; i < probs.numel(); ++i) {
    bool p = probs[i] > thr, g = gt[i] > 0.5;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  if (2 * tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

/// All-pairs AUC oracle with half credit for ties.
inline double auc_pairwise_oracle(const Tensor& probs, const Tensor& gt) {
  std::vector<double> pos, neg;
  for (int64_t i = 0; i < probs.numel(); ++i)
    (gt[i] > 0.5 ? pos : neg).push_back(probs[i]);
  double wins = 0.0;
  for (double p : pos)
    for (double q : neg) {
      if (p > q) wins += 1.0;
      else if (p == q) wins += 0.5;
    }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// --------------------------------------------------------------- gradcheck

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

/// Central finite differences on a parameter tensor against its accumulated
/// analytic gradient. `loss_fn` rebuilds the graph and returns the loss.
inline GradCheckResult grad_check(gimlab::ag::Parameter& p,
                                  const std::function<double()>& loss_fn,
                                  const Tensor& analytic_grad, double step = 1e-5,
                                  int64_t max_entries = 0) {
  GradCheckResult res;
  int64_t n = p.value.numel();
  int64_t stride = 1;
  if (max_entries > 0 && n > max_entries) stride = n / max_entries;
  for (int64_t i = 0; i < n; i += stride) {
    double orig = p.value[i];
    double h = step * std::max(1.0, std::abs(orig));
    p.value[i] = orig + h;
    double lp = loss_fn();
    p.value[i] = orig - h;
    double lm = loss_fn();
    p.value[i] = orig;
    double fd = (lp - lm) / (2.0 * h);
    double an = analytic_grad[i];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-7});
    res.max_rel_err = std::max(res.max_rel_err, std::abs(fd - an) / denom);
    ++res.checked;
  }
  return res;
}

}  // namespace testutil
