#include "gimlab/fftops.hpp"

#include <fftw3.h>

#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "gimlab/autograd.hpp"

namespace gimlab {

namespace {

std::mutex g_plan_mutex;
std::map<std::tuple<int, int, int>, fftw_plan> g_plans;

fftw_plan get_plan(int h, int w, int sign) {
  std::lock_guard<std::mutex> lock(g_plan_mutex);
  auto key = std::make_tuple(h, w, sign);
  auto it = g_plans.find(key);
  if (it != g_plans.end()) return it->second;
  std::vector<std::complex<double>> tmp(static_cast<size_t>(h) * w);
  fftw_plan p = fftw_plan_dft_2d(h, w, reinterpret_cast<fftw_complex*>(tmp.data()),
                                 reinterpret_cast<fftw_complex*>(tmp.data()), sign,
                                 FFTW_ESTIMATE | FFTW_UNALIGNED);
  g_plans.emplace(key, p);
  return p;
}

}  // namespace

void fft2(int h, int w, std::complex<double>* data, bool inverse) {
  fftw_plan p = get_plan(h, w, inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(data), reinterpret_cast<fftw_complex*>(data));
  if (inverse) {
    double norm = 1.0 / (static_cast<double>(h) * w);
    for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) data[i] *= norm;
  }
}

}  // namespace gimlab

namespace gimlab::ag {

namespace {

using cd = std::complex<double>;

// Full-grid filter from the stored half grid: the left half is used as is,
// fx >= w/2+1 takes the conjugate of the mirrored entry.
void extend_filter(const double* gr, const double* gi, int h, int w, int wr, std::vector<cd>& full) {
  full.resize(static_cast<size_t>(h) * w);
  for (int fy = 0; fy < h; ++fy)
    for (int fx = 0; fx < w; ++fx) {
      if (fx < wr) {
        full[static_cast<size_t>(fy) * w + fx] = cd(gr[fy * wr + fx], gi[fy * wr + fx]);
      } else {
        int my = (h - fy) % h;
        int mx = w - fx;
        full[static_cast<size_t>(fy) * w + fx] = std::conj(cd(gr[my * wr + mx], gi[my * wr + mx]));
      }
    }
}

}  // namespace

Var spectral_filter(Tape& t, Var x, Var g_re, Var g_im) {
  const Tensor& X = t.val(x);
  const Tensor& GR = t.val(g_re);
  const Tensor& GI = t.val(g_im);
  check(X.ndim() == 4, "spectral_filter: expected NCHW input");
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  int wr = static_cast<int>(W / 2 + 1);
  check(GR.ndim() == 3 && GR.shape[0] == C && GR.shape[1] == H && GR.shape[2] == wr,
        "spectral_filter: filter grid does not match the FFT grid of the input");
  check(GR.same_shape(GI), "spectral_filter: re/im filter shape mismatch");

  int hi = static_cast<int>(H), wi = static_cast<int>(W);
  Tensor Y(X.shape);
  std::vector<cd> full, buf(static_cast<size_t>(H) * W);
  for (int64_t c = 0; c < C; ++c) {
    extend_filter(GR.ptr() + c * H * wr, GI.ptr() + c * H * wr, hi, wi, wr, full);
    for (int64_t n = 0; n < N; ++n) {
      const double* p = X.ptr() + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) buf[static_cast<size_t>(i)] = cd(p[i], 0.0);
      fft2(hi, wi, buf.data(), false);
      for (int64_t i = 0; i < H * W; ++i) buf[static_cast<size_t>(i)] *= full[static_cast<size_t>(i)];
      fft2(hi, wi, buf.data(), true);
      double* q = Y.ptr() + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) q[i] = buf[static_cast<size_t>(i)].real();
    }
  }
  bool needs = t.needs(x) || t.needs(g_re) || t.needs(g_im);
  return t.push(std::move(Y), needs, [x, g_re, g_im, N, C, H, W, wr, hi, wi](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& X2 = tt.val(x);
    const Tensor& GR2 = tt.val(g_re);
    const Tensor& GI2 = tt.val(g_im);
    bool nx = tt.needs(x), ng = tt.needs(g_re) || tt.needs(g_im);
    int64_t hw = H * W;
    double inv_hw = 1.0 / static_cast<double>(hw);
    std::vector<cd> full, s(static_cast<size_t>(hw)), tbuf(static_cast<size_t>(hw)),
        a(static_cast<size_t>(hw));
    for (int64_t c = 0; c < C; ++c) {
      extend_filter(GR2.ptr() + c * H * wr, GI2.ptr() + c * H * wr, hi, wi, wr, full);
      for (int64_t n = 0; n < N; ++n) {
        const double* gp = g.ptr() + (n * C + c) * hw;
        const double* xp = X2.ptr() + (n * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) tbuf[static_cast<size_t>(i)] = cd(gp[i], 0.0);
        fft2(hi, wi, tbuf.data(), false);  // T = FFT(grad_out)
        if (ng) {
          for (int64_t i = 0; i < hw; ++i) s[static_cast<size_t>(i)] = cd(xp[i], 0.0);
          fft2(hi, wi, s.data(), false);  // S = FFT(x)
          // P[f] = S[f] * conj(T[f]) / (H*W)
          Tensor& dgr = tt.grad(g_re);
          Tensor& dgi = tt.grad(g_im);
          for (int fy = 0; fy < hi; ++fy)
            for (int fx = 0; fx < wr; ++fx) {
              cd P = s[static_cast<size_t>(fy) * wi + fx] *
                     std::conj(tbuf[static_cast<size_t>(fy) * wi + fx]) * inv_hw;
              double re = P.real(), im = -P.imag();
              bool mirrored = fx >= 1 && fx <= wi - wr;
              if (mirrored) {
                int my = (hi - fy) % hi;
                int mx = wi - fx;
                cd Pm = s[static_cast<size_t>(my) * wi + mx] *
                        std::conj(tbuf[static_cast<size_t>(my) * wi + mx]) * inv_hw;
                re += Pm.real();
                im += Pm.imag();
              }
              dgr[(c * H + fy) * wr + fx] += re;
              dgi[(c * H + fy) * wr + fx] += im;
            }
        }
        if (nx) {
          // dX = Re(IFFT(A)), A[f] = G[-f] * T[f]
          for (int fy = 0; fy < hi; ++fy)
            for (int fx = 0; fx < wi; ++fx) {
              int my = (hi - fy) % hi, mx = (wi - fx) % wi;
              a[static_cast<size_t>(fy) * wi + fx] =
                  full[static_cast<size_t>(my) * wi + mx] * tbuf[static_cast<size_t>(fy) * wi + fx];
            }
          fft2(hi, wi, a.data(), true);
          double* q = tt.grad(x).ptr() + (n * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) q[i] += a[static_cast<size_t>(i)].real();
        }
      }
    }
  });
}

}  // namespace gimlab::ag
