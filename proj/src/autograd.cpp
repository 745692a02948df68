#include "gimlab/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace gimlab::ag {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

namespace {

void axpy(Tensor& dst, const Tensor& src, double a = 1.0) {
  check(dst.data.size() == src.data.size(), "axpy: size mismatch");
  double* d = dst.ptr();
  const double* s = src.ptr();
  for (size_t i = 0; i < dst.data.size(); ++i) d[i] += a * s[i];
}

inline int64_t clampll(int64_t v, int64_t lo, int64_t hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

}  // namespace

Var Tape::leaf(Tensor v, bool requires_grad) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  auto it = param_lookup_.find(&p);
  if (it != param_lookup_.end()) return it->second;
  Var v = leaf(p.value, p.trainable);
  param_lookup_.emplace(&p, v);
  if (p.trainable) param_nodes_.emplace_back(&p, v);
  return v;
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[static_cast<size_t>(v)];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, Var)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<Var>(nodes_.size() - 1);
}

void Tape::backward(Var root) {
  check(val(root).numel() == 1, "backward: root must be scalar");
  grad(root)[0] = 1.0;
  for (Var i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || n.grad.data.empty() || !n.backprop) continue;
    n.backprop(*this, i);
  }
  for (auto& [p, v] : param_nodes_) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.data.empty()) continue;
    if (p->grad.data.empty()) p->grad = Tensor::zeros(p->value.shape);
    axpy(p->grad, n.grad);
  }
}

// ----------------------------------------------------------- elementwise

namespace {

template <typename FwdFn, typename BwdFn>
Var unary_op(Tape& t, Var a, FwdFn fwd, BwdFn bwd) {
  const Tensor& x = t.val(a);
  Tensor y(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = fwd(x[i]);
  return t.push(std::move(y), t.needs(a), [a, bwd](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& x2 = tt.val(a);
    const Tensor& y2 = tt.val(self);
    Tensor& ga = tt.grad(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bwd(x2[i], y2[i]);
  });
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  check(x.same_shape(y), "add: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
  Tensor z(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) z[i] = x[i] + y[i];
  return t.push(std::move(z), t.needs(a) || t.needs(b), [a, b](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    if (tt.needs(a)) axpy(tt.grad(a), g);
    if (tt.needs(b)) axpy(tt.grad(b), g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  check(x.same_shape(y), "sub: shape mismatch");
  Tensor z(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) z[i] = x[i] - y[i];
  return t.push(std::move(z), t.needs(a) || t.needs(b), [a, b](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    if (tt.needs(a)) axpy(tt.grad(a), g);
    if (tt.needs(b)) axpy(tt.grad(b), g, -1.0);
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  check(x.same_shape(y), "mul: shape mismatch");
  Tensor z(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) z[i] = x[i] * y[i];
  return t.push(std::move(z), t.needs(a) || t.needs(b), [a, b](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& x2 = tt.val(a);
    const Tensor& y2 = tt.val(b);
    if (tt.needs(a)) {
      Tensor& ga = tt.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y2[i];
    }
    if (tt.needs(b)) {
      Tensor& gb = tt.grad(b);
      for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * x2[i];
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  const Tensor& x = t.val(a);
  Tensor z(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) z[i] = s * x[i];
  return t.push(std::move(z), t.needs(a), [a, s](Tape& tt, Var self) {
    axpy(tt.grad(a), tt.grad(self), s);
  });
}

Var relu(Tape& t, Var a) {
  return unary_op(t, a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(Tape& t, Var a, double slope) {
  return unary_op(t, a, [slope](double x) { return x > 0 ? x : slope * x; },
                  [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Var gelu(Tape& t, Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(t, a,
                  [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                  [=](double x, double) {
                    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                           x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
                  });
}

Var sigmoid(Tape& t, Var a) {
  return unary_op(t, a,
                  [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                               : std::exp(x) / (1.0 + std::exp(x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Tape& t, Var a) {
  return unary_op(t, a,
                  [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
                  [](double x, double) {
                    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                  });
}

Var maximum(Tape& t, Var a, Var b) {
  const Tensor& x = t.val(a);
  const Tensor& y = t.val(b);
  check(x.same_shape(y), "maximum: shape mismatch");
  Tensor z(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) z[i] = std::max(x[i], y[i]);
  return t.push(std::move(z), t.needs(a) || t.needs(b), [a, b](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& x2 = tt.val(a);
    const Tensor& y2 = tt.val(b);
    if (tt.needs(a)) {
      Tensor& ga = tt.grad(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (x2[i] >= y2[i]) ga[i] += g[i];
    }
    if (tt.needs(b)) {
      Tensor& gb = tt.grad(b);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (x2[i] < y2[i]) gb[i] += g[i];
    }
  });
}

// ----------------------------------------------------------- shape

Var reshape(Tape& t, Var a, std::vector<int64_t> shape) {
  const Tensor& x = t.val(a);
  check(Tensor::numel_of(shape) == x.numel(), "reshape: element count mismatch");
  Tensor y;
  y.shape = std::move(shape);
  y.data = x.data;
  return t.push(std::move(y), t.needs(a), [a](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    Tensor& ga = tt.grad(a);
    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

namespace {

std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[static_cast<size_t>(i)] = s[static_cast<size_t>(i + 1)] * shape[static_cast<size_t>(i + 1)];
  return s;
}

// forward: dst[oi] = src[si] under the axis permutation. accumulate_back
// scatters output-shaped src back into input-shaped dst via the same map.
void permute_copy(const Tensor& src, const std::vector<int>& axes, Tensor& dst, bool accumulate_back) {
  const auto& ish = accumulate_back ? dst.shape : src.shape;
  std::vector<int64_t> osh(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) osh[i] = ish[static_cast<size_t>(axes[i])];
  auto istr = strides_of(ish);
  auto ostr = strides_of(osh);
  int nd = static_cast<int>(axes.size());
  int64_t n = src.numel();
  if (!accumulate_back) {
    for (int64_t oi = 0; oi < n; ++oi) {
      int64_t rem = oi, si = 0;
      for (int d = 0; d < nd; ++d) {
        int64_t c = rem / ostr[static_cast<size_t>(d)];
        rem -= c * ostr[static_cast<size_t>(d)];
        si += c * istr[static_cast<size_t>(axes[static_cast<size_t>(d)])];
      }
      dst[oi] = src[si];
    }
  } else {
    // src holds output-grad; scatter-add back into dst laid out as input
    for (int64_t oi = 0; oi < n; ++oi) {
      int64_t rem = oi, si = 0;
      for (int d = 0; d < nd; ++d) {
        int64_t c = rem / ostr[static_cast<size_t>(d)];
        rem -= c * ostr[static_cast<size_t>(d)];
        si += c * istr[static_cast<size_t>(axes[static_cast<size_t>(d)])];
      }
      dst[si] += src[oi];
    }
  }
}

}  // namespace

Var permute(Tape& t, Var a, std::vector<int> axes) {
  const Tensor& x = t.val(a);
  check(axes.size() == x.shape.size(), "permute: axis count mismatch");
  std::vector<int64_t> osh(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) osh[i] = x.shape[static_cast<size_t>(axes[i])];
  Tensor y(osh);
  permute_copy(x, axes, y, false);
  return t.push(std::move(y), t.needs(a), [a, axes](Tape& tt, Var self) {
    // accumulate grad back through the same index map
    const Tensor& g = tt.grad(self);
    Tensor tmp = Tensor::zeros(tt.val(a).shape);
    permute_copy(g, axes, tmp, true);
    axpy(tt.grad(a), tmp);
  });
}

Var concat(Tape& t, const std::vector<Var>& parts, int dim) {
  check(!parts.empty(), "concat: no inputs");
  const Tensor& first = t.val(parts[0]);
  int nd = first.ndim();
  if (dim < 0) dim += nd;
  std::vector<int64_t> osh = first.shape;
  int64_t total = first.shape[static_cast<size_t>(dim)];
  bool needs = t.needs(parts[0]);
  for (size_t i = 1; i < parts.size(); ++i) {
    const Tensor& p = t.val(parts[i]);
    check(p.ndim() == nd, "concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != dim) check(p.shape[static_cast<size_t>(d)] == first.shape[static_cast<size_t>(d)],
                          "concat: shape mismatch");
    total += p.shape[static_cast<size_t>(dim)];
    needs = needs || t.needs(parts[i]);
  }
  osh[static_cast<size_t>(dim)] = total;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < dim; ++d) outer *= osh[static_cast<size_t>(d)];
  for (int d = dim + 1; d < nd; ++d) inner *= osh[static_cast<size_t>(d)];

  Tensor y(osh);
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& src = t.val(p);
    int64_t len = src.shape[static_cast<size_t>(dim)];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(src.ptr() + o * len * inner, len * inner,
                  y.ptr() + (o * total + off) * inner);
    off += len;
  }
  return t.push(std::move(y), needs, [parts, dim, outer, inner, total](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    int64_t off2 = 0;
    for (Var p : parts) {
      const Tensor& v = tt.val(p);
      int64_t len = v.shape[static_cast<size_t>(dim)];
      if (tt.needs(p)) {
        Tensor& gp = tt.grad(p);
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = g.ptr() + (o * total + off2) * inner;
          double* dst = gp.ptr() + o * len * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      }
      off2 += len;
    }
  });
}

// ----------------------------------------------------------- dense

Var linear(Tape& t, Var x, Var w, Var b) {
  const Tensor& X = t.val(x);
  const Tensor& W = t.val(w);
  check(W.ndim() == 2, "linear: weight must be 2D [K,N]");
  int64_t K = W.shape[0], N = W.shape[1];
  check(X.dim(-1) == K, "linear: inner dim mismatch");
  int64_t R = X.numel() / K;
  std::vector<int64_t> osh = X.shape;
  osh.back() = N;
  Tensor Y(osh);
  {
    CMapM xm(X.ptr(), R, K), wm(W.ptr(), K, N);
    MapM ym(Y.ptr(), R, N);
    ym.noalias() = xm * wm;
  }
  if (b >= 0) {
    const Tensor& B = t.val(b);
    check(B.numel() == N, "linear: bias size mismatch");
    for (int64_t r = 0; r < R; ++r)
      for (int64_t j = 0; j < N; ++j) Y[r * N + j] += B[j];
  }
  bool needs = t.needs(x) || t.needs(w) || (b >= 0 && t.needs(b));
  return t.push(std::move(Y), needs, [x, w, b, R, K, N](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    CMapM gm(g.ptr(), R, N);
    if (tt.needs(x)) {
      CMapM wm(tt.val(w).ptr(), K, N);
      MapM gx(tt.grad(x).ptr(), R, K);
      gx.noalias() += gm * wm.transpose();
    }
    if (tt.needs(w)) {
      CMapM xm(tt.val(x).ptr(), R, K);
      MapM gw(tt.grad(w).ptr(), K, N);
      gw.noalias() += xm.transpose() * gm;
    }
    if (b >= 0 && tt.needs(b)) {
      Tensor& gb = tt.grad(b);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < N; ++j) gb[j] += g[r * N + j];
    }
  });
}

Var matmul(Tape& t, Var a, Var b, bool transpose_b) {
  const Tensor& A = t.val(a);
  const Tensor& B = t.val(b);
  check(A.ndim() == 3 && B.ndim() == 3, "matmul: expected [B,M,K] inputs");
  int64_t Bn = A.shape[0], M = A.shape[1], K = A.shape[2];
  check(B.shape[0] == Bn, "matmul: batch mismatch");
  int64_t N = transpose_b ? B.shape[1] : B.shape[2];
  check((transpose_b ? B.shape[2] : B.shape[1]) == K, "matmul: inner dim mismatch");
  Tensor C({Bn, M, N});
  for (int64_t i = 0; i < Bn; ++i) {
    CMapM am(A.ptr() + i * M * K, M, K);
    MapM cm(C.ptr() + i * M * N, M, N);
    if (transpose_b) {
      CMapM bm(B.ptr() + i * N * K, N, K);
      cm.noalias() = am * bm.transpose();
    } else {
      CMapM bm(B.ptr() + i * K * N, K, N);
      cm.noalias() = am * bm;
    }
  }
  return t.push(std::move(C), t.needs(a) || t.needs(b),
                [a, b, transpose_b, Bn, M, K, N](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& A2 = tt.val(a);
    const Tensor& B2 = tt.val(b);
    for (int64_t i = 0; i < Bn; ++i) {
      CMapM gm(g.ptr() + i * M * N, M, N);
      if (tt.needs(a)) {
        MapM ga(tt.grad(a).ptr() + i * M * K, M, K);
        if (transpose_b) {
          CMapM bm(B2.ptr() + i * N * K, N, K);
          ga.noalias() += gm * bm;
        } else {
          CMapM bm(B2.ptr() + i * K * N, K, N);
          ga.noalias() += gm * bm.transpose();
        }
      }
      if (tt.needs(b)) {
        CMapM am(A2.ptr() + i * M * K, M, K);
        if (transpose_b) {
          MapM gb(tt.grad(b).ptr() + i * N * K, N, K);
          gb.noalias() += gm.transpose() * am;
        } else {
          MapM gb(tt.grad(b).ptr() + i * K * N, K, N);
          gb.noalias() += am.transpose() * gm;
        }
      }
    }
  });
}

Var softmax_lastdim(Tape& t, Var a) {
  const Tensor& x = t.val(a);
  int64_t L = x.dim(-1);
  int64_t R = x.numel() / L;
  Tensor y(x.shape);
  for (int64_t r = 0; r < R; ++r) {
    const double* xr = x.ptr() + r * L;
    double* yr = y.ptr() + r * L;
    double mx = xr[0];
    for (int64_t i = 1; i < L; ++i) mx = std::max(mx, xr[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < L; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      sum += yr[i];
    }
    for (int64_t i = 0; i < L; ++i) yr[i] /= sum;
  }
  return t.push(std::move(y), t.needs(a), [a, R, L](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& y2 = tt.val(self);
    Tensor& ga = tt.grad(a);
    for (int64_t r = 0; r < R; ++r) {
      const double* gr = g.ptr() + r * L;
      const double* yr = y2.ptr() + r * L;
      double* gar = ga.ptr() + r * L;
      double dot = 0.0;
      for (int64_t i = 0; i < L; ++i) dot += gr[i] * yr[i];
      for (int64_t i = 0; i < L; ++i) gar[i] += yr[i] * (gr[i] - dot);
    }
  });
}

// ----------------------------------------------------------- conv2d

namespace {

struct ConvDims {
  int64_t n, cin, h, w, cout, kh, kw, ho, wo;
};

// source plane index (or -1 for zero pad) for each (output position, kernel tap)
std::vector<int32_t> conv_index_map(const ConvDims& d, int stride, int pad, PadMode mode) {
  std::vector<int32_t> idx(static_cast<size_t>(d.ho * d.wo * d.kh * d.kw));
  size_t p = 0;
  for (int64_t oh = 0; oh < d.ho; ++oh)
    for (int64_t ow = 0; ow < d.wo; ++ow)
      for (int64_t ky = 0; ky < d.kh; ++ky)
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          int64_t ih = oh * stride - pad + ky;
          int64_t iw = ow * stride - pad + kx;
          if (mode == PadMode::Replicate) {
            ih = clampll(ih, 0, d.h - 1);
            iw = clampll(iw, 0, d.w - 1);
            idx[p++] = static_cast<int32_t>(ih * d.w + iw);
          } else {
            idx[p++] = (ih < 0 || ih >= d.h || iw < 0 || iw >= d.w)
                           ? -1
                           : static_cast<int32_t>(ih * d.w + iw);
          }
        }
  return idx;
}

void im2col(const Tensor& X, const ConvDims& d, const std::vector<int32_t>& idx,
            std::vector<double>& cols) {
  int64_t taps = d.kh * d.kw;
  int64_t K = d.cin * taps;
  int64_t P = d.ho * d.wo;
  cols.assign(static_cast<size_t>(d.n * P * K), 0.0);
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t c = 0; c < d.cin; ++c) {
      const double* plane = X.ptr() + (n * d.cin + c) * d.h * d.w;
      for (int64_t o = 0; o < P; ++o) {
        double* dst = cols.data() + (n * P + o) * K + c * taps;
        const int32_t* im = idx.data() + o * taps;
        for (int64_t k = 0; k < taps; ++k) dst[k] = im[k] < 0 ? 0.0 : plane[im[k]];
      }
    }
}

Var conv2d_depthwise(Tape& t, Var x, Var w, Var b, int stride, int pad, PadMode mode) {
  const Tensor& X = t.val(x);
  const Tensor& W = t.val(w);
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  int64_t kh = W.shape[2], kw = W.shape[3];
  check(W.shape[0] == C && W.shape[1] == 1, "depthwise conv: weight must be [C,1,kh,kw]");
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (Wd + 2 * pad - kw) / stride + 1;
  const Tensor* B = b >= 0 ? &t.val(b) : nullptr;
  Tensor Y({N, C, Ho, Wo});
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* plane = X.ptr() + (n * C + c) * H * Wd;
      const double* ker = W.ptr() + c * kh * kw;
      double bias = B ? (*B)[c] : 0.0;
      double* out = Y.ptr() + (n * C + c) * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = bias;
          for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ih = oh * stride - pad + ky;
              int64_t iw = ow * stride - pad + kx;
              if (mode == PadMode::Replicate) {
                ih = clampll(ih, 0, H - 1);
                iw = clampll(iw, 0, Wd - 1);
                acc += ker[ky * kw + kx] * plane[ih * Wd + iw];
              } else if (ih >= 0 && ih < H && iw >= 0 && iw < Wd) {
                acc += ker[ky * kw + kx] * plane[ih * Wd + iw];
              }
            }
          out[oh * Wo + ow] = acc;
        }
    }
  bool needs = t.needs(x) || t.needs(w) || (b >= 0 && t.needs(b));
  return t.push(std::move(Y), needs,
                [x, w, b, stride, pad, mode, N, C, H, Wd, kh, kw, Ho, Wo](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& X2 = tt.val(x);
    const Tensor& W2 = tt.val(w);
    bool nx = tt.needs(x), nw = tt.needs(w), nb = b >= 0 && tt.needs(b);
    Tensor* gx = nx ? &tt.grad(x) : nullptr;
    Tensor* gw = nw ? &tt.grad(w) : nullptr;
    Tensor* gb = nb ? &tt.grad(b) : nullptr;
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t n = 0; n < N; ++n) {
        const double* plane = X2.ptr() + (n * C + c) * H * Wd;
        const double* ker = W2.ptr() + c * kh * kw;
        const double* go = g.ptr() + (n * C + c) * Ho * Wo;
        double* gxp = nx ? gx->ptr() + (n * C + c) * H * Wd : nullptr;
        double* gwp = nw ? gw->ptr() + c * kh * kw : nullptr;
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow) {
            double gv = go[oh * Wo + ow];
            if (gv == 0.0) continue;
            if (gb) (*gb)[c] += gv;
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ih = oh * stride - pad + ky;
                int64_t iw = ow * stride - pad + kx;
                if (mode == PadMode::Replicate) {
                  ih = clampll(ih, 0, H - 1);
                  iw = clampll(iw, 0, Wd - 1);
                } else if (ih < 0 || ih >= H || iw < 0 || iw >= Wd) {
                  continue;
                }
                if (gxp) gxp[ih * Wd + iw] += gv * ker[ky * kw + kx];
                if (gwp) gwp[ky * kw + kx] += gv * plane[ih * Wd + iw];
              }
          }
      }
    }
  });
}

}  // namespace

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad, PadMode mode, int groups) {
  const Tensor& X = t.val(x);
  const Tensor& W = t.val(w);
  check(X.ndim() == 4 && W.ndim() == 4, "conv2d: expected 4D input and weight");
  int64_t C = X.shape[1];
  if (groups == C && W.shape[0] == C && W.shape[1] == 1 && C > 1)
    return conv2d_depthwise(t, x, w, b, stride, pad, mode);
  check(groups == 1, "conv2d: unsupported group count");

  ConvDims d;
  d.n = X.shape[0];
  d.cin = X.shape[1];
  d.h = X.shape[2];
  d.w = X.shape[3];
  d.cout = W.shape[0];
  d.kh = W.shape[2];
  d.kw = W.shape[3];
  check(W.shape[1] == d.cin, "conv2d: channel mismatch");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  check(d.ho >= 1 && d.wo >= 1, "conv2d: kernel larger than padded input");

  int64_t K = d.cin * d.kh * d.kw;
  int64_t P = d.ho * d.wo;
  auto idx = conv_index_map(d, stride, pad, mode);
  std::vector<double> cols;
  im2col(X, d, idx, cols);

  Tensor Y({d.n, d.cout, d.ho, d.wo});
  {
    CMapM colm(cols.data(), d.n * P, K), wm(W.ptr(), d.cout, K);
    RowMat outm = colm * wm.transpose();  // [n*P, cout]
    const Tensor* B = b >= 0 ? &t.val(b) : nullptr;
    for (int64_t n = 0; n < d.n; ++n) {
      MapM ym(Y.ptr() + n * d.cout * P, d.cout, P);
      ym.noalias() = outm.middleRows(n * P, P).transpose();
    }
    if (B) {
      for (int64_t n = 0; n < d.n; ++n)
        for (int64_t co = 0; co < d.cout; ++co) {
          double* row = Y.ptr() + (n * d.cout + co) * P;
          double bias = (*B)[co];
          for (int64_t o = 0; o < P; ++o) row[o] += bias;
        }
    }
  }
  bool needs = t.needs(x) || t.needs(w) || (b >= 0 && t.needs(b));
  ConvDims dc = d;
  return t.push(std::move(Y), needs,
                [x, w, b, stride, pad, mode, dc, K, P](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    // gather grad as [n*P, cout]
    RowMat gm(dc.n * P, dc.cout);
    for (int64_t n = 0; n < dc.n; ++n) {
      CMapM gsrc(g.ptr() + n * dc.cout * P, dc.cout, P);
      gm.middleRows(n * P, P) = gsrc.transpose();
    }
    auto idx2 = conv_index_map(dc, stride, pad, mode);
    if (tt.needs(w)) {
      std::vector<double> cols2;
      im2col(tt.val(x), dc, idx2, cols2);
      CMapM colm(cols2.data(), dc.n * P, K);
      MapM gw(tt.grad(w).ptr(), dc.cout, K);
      gw.noalias() += gm.transpose() * colm;
    }
    if (b >= 0 && tt.needs(b)) {
      Tensor& gb = tt.grad(b);
      for (int64_t co = 0; co < dc.cout; ++co) gb[co] += gm.col(co).sum();
    }
    if (tt.needs(x)) {
      CMapM wm(tt.val(w).ptr(), dc.cout, K);
      RowMat dcols = gm * wm;  // [n*P, K]
      Tensor& gx = tt.grad(x);
      int64_t taps = dc.kh * dc.kw;
#pragma omp parallel for collapse(2) schedule(static)
      for (int64_t n = 0; n < dc.n; ++n)
        for (int64_t c = 0; c < dc.cin; ++c) {
          double* plane = gx.ptr() + (n * dc.cin + c) * dc.h * dc.w;
          for (int64_t o = 0; o < P; ++o) {
            const double* src = dcols.data() + (n * P + o) * K + c * taps;
            const int32_t* im = idx2.data() + o * taps;
            for (int64_t k = 0; k < taps; ++k)
              if (im[k] >= 0) plane[im[k]] += src[k];
          }
        }
    }
  });
}

// ----------------------------------------------------------- normalization

Var batchnorm2d(Tape& t, Var x, Var gamma, Var beta, Tensor& run_mean, Tensor& run_var,
                bool training, double momentum, double eps) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "batchnorm2d: expected NCHW");
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  int64_t M = N * H * W;
  const Tensor& G = t.val(gamma);
  const Tensor& B = t.val(beta);
  check(G.numel() == C && B.numel() == C, "batchnorm2d: affine size mismatch");

  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double mu = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = X.ptr() + (n * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) mu += p[i];
      }
      mu /= static_cast<double>(M);
      double var = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* p = X.ptr() + (n * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= static_cast<double>(M);
      (*mean)[static_cast<size_t>(c)] = mu;
      (*invstd)[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
      double unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
      run_mean[c] = (1.0 - momentum) * run_mean[c] + momentum * mu;
      run_var[c] = (1.0 - momentum) * run_var[c] + momentum * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      (*mean)[static_cast<size_t>(c)] = run_mean[c];
      (*invstd)[static_cast<size_t>(c)] = 1.0 / std::sqrt(run_var[c] + eps);
    }
  }

  Tensor Y(X.shape);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * H * W;
      double* q = Y.ptr() + (n * C + c) * H * W;
      double mu = (*mean)[static_cast<size_t>(c)], is = (*invstd)[static_cast<size_t>(c)];
      double gc = G[c], bc = B[c];
      for (int64_t i = 0; i < H * W; ++i) q[i] = (p[i] - mu) * is * gc + bc;
    }
  bool needs = t.needs(x) || t.needs(gamma) || t.needs(beta);
  return t.push(std::move(Y), needs,
                [x, gamma, beta, mean, invstd, training, N, C, H, W, M](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& X2 = tt.val(x);
    const Tensor& G2 = tt.val(gamma);
    bool nx = tt.needs(x);
    for (int64_t c = 0; c < C; ++c) {
      double mu = (*mean)[static_cast<size_t>(c)], is = (*invstd)[static_cast<size_t>(c)];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const double* gp = g.ptr() + (n * C + c) * H * W;
        const double* xp = X2.ptr() + (n * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) {
          sum_g += gp[i];
          sum_gx += gp[i] * (xp[i] - mu) * is;
        }
      }
      if (tt.needs(gamma)) tt.grad(gamma)[c] += sum_gx;
      if (tt.needs(beta)) tt.grad(beta)[c] += sum_g;
      if (nx) {
        Tensor& gx = tt.grad(x);
        double gc = G2[c];
        double mg = sum_g / static_cast<double>(M);
        double mgx = sum_gx / static_cast<double>(M);
        for (int64_t n = 0; n < N; ++n) {
          const double* gp = g.ptr() + (n * C + c) * H * W;
          const double* xp = X2.ptr() + (n * C + c) * H * W;
          double* q = gx.ptr() + (n * C + c) * H * W;
          if (training) {
            for (int64_t i = 0; i < H * W; ++i) {
              double xh = (xp[i] - mu) * is;
              q[i] += gc * is * (gp[i] - mg - xh * mgx);
            }
          } else {
            for (int64_t i = 0; i < H * W; ++i) q[i] += gc * is * gp[i];
          }
        }
      }
    }
  });
}

Var layernorm_channel(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "layernorm_channel: expected NCHW");
  int64_t N = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
  const Tensor& G = t.val(gamma);
  const Tensor& B = t.val(beta);
  check(G.numel() == C && B.numel() == C, "layernorm_channel: affine size mismatch");

  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(2 * N * HW));
  Tensor Y(X.shape);
  for (int64_t n = 0; n < N; ++n) {
    const double* xb = X.ptr() + n * C * HW;
    double* yb = Y.ptr() + n * C * HW;
    for (int64_t i = 0; i < HW; ++i) {
      double mu = 0.0;
      for (int64_t c = 0; c < C; ++c) mu += xb[c * HW + i];
      mu /= static_cast<double>(C);
      double var = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double d = xb[c * HW + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(C);
      double is = 1.0 / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>(2 * (n * HW + i))] = mu;
      (*stats)[static_cast<size_t>(2 * (n * HW + i) + 1)] = is;
      for (int64_t c = 0; c < C; ++c)
        yb[c * HW + i] = (xb[c * HW + i] - mu) * is * G[c] + B[c];
    }
  }
  bool needs = t.needs(x) || t.needs(gamma) || t.needs(beta);
  return t.push(std::move(Y), needs, [x, gamma, beta, stats, N, C, HW](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& X2 = tt.val(x);
    const Tensor& G2 = tt.val(gamma);
    bool nx = tt.needs(x), ng = tt.needs(gamma), nb = tt.needs(beta);
    Tensor* gx = nx ? &tt.grad(x) : nullptr;
    Tensor* gg = ng ? &tt.grad(gamma) : nullptr;
    Tensor* gb = nb ? &tt.grad(beta) : nullptr;
    for (int64_t n = 0; n < N; ++n) {
      const double* xb = X2.ptr() + n * C * HW;
      const double* gp = g.ptr() + n * C * HW;
      for (int64_t i = 0; i < HW; ++i) {
        double mu = (*stats)[static_cast<size_t>(2 * (n * HW + i))];
        double is = (*stats)[static_cast<size_t>(2 * (n * HW + i) + 1)];
        double sum_gh = 0.0, sum_ghxh = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          double xh = (xb[c * HW + i] - mu) * is;
          double gh = gp[c * HW + i] * G2[c];
          sum_gh += gh;
          sum_ghxh += gh * xh;
          if (gg) (*gg)[c] += gp[c * HW + i] * xh;
          if (gb) (*gb)[c] += gp[c * HW + i];
        }
        if (gx) {
          double* q = gx->ptr() + n * C * HW;
          for (int64_t c = 0; c < C; ++c) {
            double xh = (xb[c * HW + i] - mu) * is;
            double gh = gp[c * HW + i] * G2[c];
            q[c * HW + i] += is * (gh - (sum_gh + xh * sum_ghxh) / static_cast<double>(C));
          }
        }
      }
    }
  });
}

// ----------------------------------------------------------- pooling / windows

Var global_avg_pool(Tape& t, Var x) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "global_avg_pool: expected NCHW");
  int64_t N = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
  Tensor Y({N, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * HW;
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += p[i];
      Y[n * C + c] = acc / static_cast<double>(HW);
    }
  return t.push(std::move(Y), t.needs(x), [x, N, C, HW](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    Tensor& gx = tt.grad(x);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double gv = g[n * C + c] / static_cast<double>(HW);
        double* q = gx.ptr() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) q[i] += gv;
      }
  });
}

Var window_mean(Tape& t, Var x, int k) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "window_mean: expected NCHW");
  check(k >= 1 && (k % 2) == 1, "window_mean: k must be odd");
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  int r = k / 2;
  double inv = 1.0 / (static_cast<double>(k) * k);
  Tensor Y(X.shape);
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * H * W;
      double* q = Y.ptr() + (n * C + c) * H * W;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          double acc = 0.0;
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx)
              acc += p[clampll(h + dy, 0, H - 1) * W + clampll(w + dx, 0, W - 1)];
          q[h * W + w] = acc * inv;
        }
    }
  return t.push(std::move(Y), t.needs(x), [x, k, r, inv, N, C, H, W](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    Tensor& gx = tt.grad(x);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double* gp = g.ptr() + (n * C + c) * H * W;
        double* q = gx.ptr() + (n * C + c) * H * W;
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w) {
            double gv = gp[h * W + w] * inv;
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx)
                q[clampll(h + dy, 0, H - 1) * W + clampll(w + dx, 0, W - 1)] += gv;
          }
      }
  });
}

Var window_max(Tape& t, Var x, int k) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "window_max: expected NCHW");
  check(k >= 1 && (k % 2) == 1, "window_max: k must be odd");
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  int r = k / 2;
  Tensor Y(X.shape);
  auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(X.numel()));
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * H * W;
      double* q = Y.ptr() + (n * C + c) * H * W;
      int32_t* am = arg->data() + (n * C + c) * H * W;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          double best = -1e300;
          int32_t bi = 0;
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              int64_t ii = clampll(h + dy, 0, H - 1) * W + clampll(w + dx, 0, W - 1);
              if (p[ii] > best) {
                best = p[ii];
                bi = static_cast<int32_t>(ii);
              }
            }
          q[h * W + w] = best;
          am[h * W + w] = bi;
        }
    }
  return t.push(std::move(Y), t.needs(x), [x, arg, N, C, H, W](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    Tensor& gx = tt.grad(x);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double* gp = g.ptr() + (n * C + c) * H * W;
        const int32_t* am = arg->data() + (n * C + c) * H * W;
        double* q = gx.ptr() + (n * C + c) * H * W;
        for (int64_t i = 0; i < H * W; ++i) q[am[i]] += gp[i];
      }
  });
}

Var spatial_std(Tape& t, Var x) {
  constexpr double kVarEps = 1e-12;
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "spatial_std: expected NCHW");
  int64_t N = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
  Tensor Y({N, C});
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(N * C));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * HW;
      double mu = 0.0;
      for (int64_t i = 0; i < HW; ++i) mu += p[i];
      mu /= static_cast<double>(HW);
      double var = 0.0;
      for (int64_t i = 0; i < HW; ++i) var += (p[i] - mu) * (p[i] - mu);
      var /= static_cast<double>(HW);
      (*mean)[static_cast<size_t>(n * C + c)] = mu;
      Y[n * C + c] = std::sqrt(var + kVarEps);
    }
  return t.push(std::move(Y), t.needs(x), [x, mean, N, C, HW](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& y = tt.val(self);
    const Tensor& X2 = tt.val(x);
    Tensor& gx = tt.grad(x);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double gv = g[n * C + c];
        if (gv == 0.0) continue;
        double mu = (*mean)[static_cast<size_t>(n * C + c)];
        double coef = gv / (static_cast<double>(HW) * y[n * C + c]);
        const double* p = X2.ptr() + (n * C + c) * HW;
        double* q = gx.ptr() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) q[i] += coef * (p[i] - mu);
      }
  });
}

// ----------------------------------------------------------- broadcast arithmetic

Var expand_to_nc(Tape& t, Var v, int64_t n) {
  const Tensor& V = t.val(v);
  int64_t C = V.numel();
  Tensor Y({n, C});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < C; ++c) Y[i * C + c] = V[c];
  return t.push(std::move(Y), t.needs(v), [v, n, C](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    Tensor& gv = tt.grad(v);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < C; ++c) gv[c] += g[i * C + c];
  });
}

namespace {

template <bool Divide>
Var nc_scale_op(Tape& t, Var x, Var s) {
  const Tensor& X = t.val(x);
  const Tensor& S = t.val(s);
  check(X.ndim() == 4 && S.ndim() == 2, "nc scale: expected NCHW and [N,C]");
  int64_t N = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
  check(S.shape[0] == N && S.shape[1] == C, "nc scale: shape mismatch");
  Tensor Y(X.shape);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double f = Divide ? 1.0 / S[n * C + c] : S[n * C + c];
      const double* p = X.ptr() + (n * C + c) * HW;
      double* q = Y.ptr() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) q[i] = p[i] * f;
    }
  return t.push(std::move(Y), t.needs(x) || t.needs(s), [x, s, N, C, HW](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& X2 = tt.val(x);
    const Tensor& S2 = tt.val(s);
    bool nx = tt.needs(x), ns = tt.needs(s);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double sv = S2[n * C + c];
        double f = Divide ? 1.0 / sv : sv;
        const double* gp = g.ptr() + (n * C + c) * HW;
        const double* xp = X2.ptr() + (n * C + c) * HW;
        if (nx) {
          double* q = tt.grad(x).ptr() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) q[i] += gp[i] * f;
        }
        if (ns) {
          double acc = 0.0;
          for (int64_t i = 0; i < HW; ++i) acc += gp[i] * xp[i];
          tt.grad(s)[n * C + c] += Divide ? -acc / (sv * sv) : acc;
        }
      }
  });
}

}  // namespace

Var mul_nc(Tape& t, Var x, Var s) { return nc_scale_op<false>(t, x, s); }
Var div_nc(Tape& t, Var x, Var s) { return nc_scale_op<true>(t, x, s); }

Var mul_score(Tape& t, Var x, Var s) {
  const Tensor& X = t.val(x);
  const Tensor& S = t.val(s);
  check(X.ndim() == 4 && S.ndim() == 4 && S.shape[1] == 1, "mul_score: expected NCHW and [N,1,H,W]");
  int64_t N = X.shape[0], C = X.shape[1], HW = X.shape[2] * X.shape[3];
  check(S.shape[0] == N && S.shape[2] == X.shape[2] && S.shape[3] == X.shape[3],
        "mul_score: spatial mismatch");
  Tensor Y(X.shape);
  for (int64_t n = 0; n < N; ++n) {
    const double* sp = S.ptr() + n * HW;
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * HW;
      double* q = Y.ptr() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) q[i] = p[i] * sp[i];
    }
  }
  return t.push(std::move(Y), t.needs(x) || t.needs(s), [x, s, N, C, HW](Tape& tt, Var self) {
    const Tensor& g = tt.grad(self);
    const Tensor& X2 = tt.val(x);
    const Tensor& S2 = tt.val(s);
    for (int64_t n = 0; n < N; ++n) {
      const double* sp = S2.ptr() + n * HW;
      for (int64_t c = 0; c < C; ++c) {
        const double* gp = g.ptr() + (n * C + c) * HW;
        const double* xp = X2.ptr() + (n * C + c) * HW;
        if (tt.needs(x)) {
          double* q = tt.grad(x).ptr() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) q[i] += gp[i] * sp[i];
        }
        if (tt.needs(s)) {
          double* q = tt.grad(s).ptr() + n * HW;
          for (int64_t i = 0; i < HW; ++i) q[i] += gp[i] * xp[i];
        }
      }
    }
  });
}

// ----------------------------------------------------------- resampling

Var bilinear_upsample(Tape& t, Var x, int64_t oh, int64_t ow) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 4, "bilinear_upsample: expected NCHW");
  int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  Tensor Y({N, C, oh, ow});
  double sy = static_cast<double>(H) / static_cast<double>(oh);
  double sx = static_cast<double>(W) / static_cast<double>(ow);
  // precompute sampling taps
  std::vector<int32_t> y0(static_cast<size_t>(oh)), y1(static_cast<size_t>(oh));
  std::vector<double> wy(static_cast<size_t>(oh));
  for (int64_t y = 0; y < oh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    int64_t i0 = static_cast<int64_t>(std::floor(fy));
    wy[static_cast<size_t>(y)] = fy - static_cast<double>(i0);
    y0[static_cast<size_t>(y)] = static_cast<int32_t>(clampll(i0, 0, H - 1));
    y1[static_cast<size_t>(y)] = static_cast<int32_t>(clampll(i0 + 1, 0, H - 1));
  }
  std::vector<int32_t> x0(static_cast<size_t>(ow)), x1(static_cast<size_t>(ow));
  std::vector<double> wx(static_cast<size_t>(ow));
  for (int64_t xq = 0; xq < ow; ++xq) {
    double fx = (static_cast<double>(xq) + 0.5) * sx - 0.5;
    int64_t i0 = static_cast<int64_t>(std::floor(fx));
    wx[static_cast<size_t>(xq)] = fx - static_cast<double>(i0);
    x0[static_cast<size_t>(xq)] = static_cast<int32_t>(clampll(i0, 0, W - 1));
    x1[static_cast<size_t>(xq)] = static_cast<int32_t>(clampll(i0 + 1, 0, W - 1));
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const double* p = X.ptr() + (n * C + c) * H * W;
      double* q = Y.ptr() + (n * C + c) * oh * ow;
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xq = 0; xq < ow; ++xq) {
          double a = wy[static_cast<size_t>(y)], bw = wx[static_cast<size_t>(xq)];
          double v00 = p[y0[static_cast<size_t>(y)] * W + x0[static_cast<size_t>(xq)]];
          double v01 = p[y0[static_cast<size_t>(y)] * W + x1[static_cast<size_t>(xq)]];
          double v10 = p[y1[static_cast<size_t>(y)] * W + x0[static_cast<size_t>(xq)]];
          double v11 = p[y1[static_cast<size_t>(y)] * W + x1[static_cast<size_t>(xq)]];
          q[y * ow + xq] = (1 - a) * ((1 - bw) * v00 + bw * v01) + a * ((1 - bw) * v10 + bw * v11);
        }
    }
  auto taps = std::make_shared<std::tuple<std::vector<int32_t>, std::vector<int32_t>,
                                          std::vector<double>, std::vector<int32_t>,
                                          std::vector<int32_t>, std::vector<double>>>(
      std::move(y0), std::move(y1), std::move(wy), std::move(x0), std::move(x1), std::move(wx));
  return t.push(std::move(Y), t.needs(x), [x, taps, N, C, H, W, oh, ow](Tape& tt, Var self) {
    const auto& [ty0, ty1, twy, tx0, tx1, twx] = *taps;
    const Tensor& g = tt.grad(self);
    Tensor& gx = tt.grad(x);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const double* gp = g.ptr() + (n * C + c) * oh * ow;
        double* q = gx.ptr() + (n * C + c) * H * W;
        for (int64_t y = 0; y < oh; ++y)
          for (int64_t xq = 0; xq < ow; ++xq) {
            double gv = gp[y * ow + xq];
            if (gv == 0.0) continue;
            double a = twy[static_cast<size_t>(y)], bw = twx[static_cast<size_t>(xq)];
            q[ty0[static_cast<size_t>(y)] * W + tx0[static_cast<size_t>(xq)]] += gv * (1 - a) * (1 - bw);
            q[ty0[static_cast<size_t>(y)] * W + tx1[static_cast<size_t>(xq)]] += gv * (1 - a) * bw;
            q[ty1[static_cast<size_t>(y)] * W + tx0[static_cast<size_t>(xq)]] += gv * a * (1 - bw);
            q[ty1[static_cast<size_t>(y)] * W + tx1[static_cast<size_t>(xq)]] += gv * a * bw;
          }
      }
  });
}

// ----------------------------------------------------------- losses / reductions

Var mean_all(Tape& t, Var a) {
  const Tensor& x = t.val(a);
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  int64_t n = x.numel();
  Tensor y({1});
  y[0] = acc / static_cast<double>(n);
  return t.push(std::move(y), t.needs(a), [a, n](Tape& tt, Var self) {
    double gv = tt.grad(self)[0] / static_cast<double>(n);
    Tensor& ga = tt.grad(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
  });
}

Var bce_with_logits_mean(Tape& t, Var logits, Tensor targets) {
  const Tensor& z = t.val(logits);
  check(z.numel() == targets.numel(), "bce: size mismatch");
  int64_t n = z.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double zi = z[i], ti = targets[i];
    acc += std::max(zi, 0.0) - zi * ti + std::log1p(std::exp(-std::abs(zi)));
  }
  Tensor y({1});
  y[0] = acc / static_cast<double>(n);
  auto tgt = std::make_shared<Tensor>(std::move(targets));
  return t.push(std::move(y), t.needs(logits), [logits, tgt, n](Tape& tt, Var self) {
    double gv = tt.grad(self)[0] / static_cast<double>(n);
    const Tensor& z2 = tt.val(logits);
    Tensor& gl = tt.grad(logits);
    for (int64_t i = 0; i < n; ++i) {
      double s = z2[i] >= 0 ? 1.0 / (1.0 + std::exp(-z2[i]))
                            : std::exp(z2[i]) / (1.0 + std::exp(z2[i]));
      gl[i] += gv * (s - (*tgt)[i]);
    }
  });
}

Var l2norm_rows_mean(Tape& t, Var x) {
  const Tensor& X = t.val(x);
  check(X.ndim() == 2, "l2norm_rows_mean: expected [N,M]");
  int64_t N = X.shape[0], M = X.shape[1];
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
  double acc = 0.0;
  for (int64_t n = 0; n < N; ++n) {
    const double* p = X.ptr() + n * M;
    double s = 0.0;
    for (int64_t i = 0; i < M; ++i) s += p[i] * p[i];
    double nr = std::sqrt(s);
    (*norms)[static_cast<size_t>(n)] = nr;
    acc += nr;
  }
  Tensor y({1});
  y[0] = acc / static_cast<double>(N);
  return t.push(std::move(y), t.needs(x), [x, norms, N, M](Tape& tt, Var self) {
    double gv = tt.grad(self)[0] / static_cast<double>(N);
    const Tensor& X2 = tt.val(x);
    Tensor& gx = tt.grad(x);
    for (int64_t n = 0; n < N; ++n) {
      double nr = (*norms)[static_cast<size_t>(n)];
      if (nr < 1e-12) continue;
      const double* p = X2.ptr() + n * M;
      double* q = gx.ptr() + n * M;
      double c = gv / nr;
      for (int64_t i = 0; i < M; ++i) q[i] += c * p[i];
    }
  });
}

Var dot_const(Tape& t, Var a, Tensor w) {
  const Tensor& x = t.val(a);
  check(x.numel() == w.numel(), "dot_const: size mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x[i] * w[i];
  Tensor y({1});
  y[0] = acc;
  auto wp = std::make_shared<Tensor>(std::move(w));
  return t.push(std::move(y), t.needs(a), [a, wp](Tape& tt, Var self) {
    double gv = tt.grad(self)[0];
    Tensor& ga = tt.grad(a);
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv * (*wp)[i];
  });
}

}  // namespace gimlab::ag
