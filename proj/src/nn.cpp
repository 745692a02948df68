#include "gimlab/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace gimlab::nn {

Parameter& ParamStore::create(const std::string& name, std::vector<int64_t> shape, bool decay,
                              bool trainable) {
  if (find(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor::zeros(std::move(shape));
  p->decay = decay;
  p->trainable = trainable;
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& p : params_)
    if (!p->grad.data.empty()) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

int64_t ParamStore::param_count() const {
  int64_t n = 0;
  for (const auto& p : params_)
    if (p->trainable) n += p->value.numel();
  return n;
}

// ------------------------------------------------------------- checkpoint io

namespace {
constexpr char kMagic[8] = {'G', 'L', 'C', 'K', 'P', 'T', '0', '1'};

void write_u32(FILE* f, uint32_t v) { std::fwrite(&v, sizeof(v), 1, f); }
void write_u64(FILE* f, uint64_t v) { std::fwrite(&v, sizeof(v), 1, f); }
void write_str(FILE* f, const std::string& s) {
  write_u32(f, static_cast<uint32_t>(s.size()));
  std::fwrite(s.data(), 1, s.size(), f);
}
uint32_t read_u32(FILE* f) {
  uint32_t v = 0;
  if (std::fread(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
uint64_t read_u64(FILE* f) {
  uint64_t v = 0;
  if (std::fread(&v, sizeof(v), 1, f) != 1) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
std::string read_str(FILE* f) {
  uint32_t n = read_u32(f);
  std::string s(n, '\0');
  if (n && std::fread(s.data(), 1, n, f) != n) throw std::runtime_error("checkpoint: truncated file");
  return s;
}
}  // namespace

void ParamStore::save(const std::string& path, const std::string& arch_fingerprint,
                      const std::string& config_fingerprint) const {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  std::fwrite(kMagic, 1, sizeof(kMagic), f);
  write_str(f, arch_fingerprint);
  write_str(f, config_fingerprint);
  write_u64(f, params_.size());
  for (const auto& p : params_) {
    write_str(f, p->name);
    write_u32(f, static_cast<uint32_t>(p->value.ndim()));
    for (int64_t d : p->value.shape) write_u64(f, static_cast<uint64_t>(d));
    std::fwrite(p->value.ptr(), sizeof(double), p->value.data.size(), f);
  }
  std::fclose(f);
}

std::string ParamStore::peek_arch_fingerprint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    std::fclose(f);
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  std::string fp = read_str(f);
  std::fclose(f);
  return fp;
}

std::string ParamStore::load(const std::string& path, const std::string& expected_arch_fingerprint) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  try {
    char magic[8];
    if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0)
      throw std::runtime_error("checkpoint: bad magic in " + path);
    std::string arch_fp = read_str(f);
    if (arch_fp != expected_arch_fingerprint)
      throw std::runtime_error("checkpoint: architecture fingerprint mismatch (" + arch_fp +
                               " vs expected " + expected_arch_fingerprint + ")");
    std::string cfg_fp = read_str(f);
    uint64_t count = read_u64(f);
    if (count != params_.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
    for (uint64_t i = 0; i < count; ++i) {
      std::string name = read_str(f);
      Parameter* p = find(name);
      if (!p) throw std::runtime_error("checkpoint: unknown tensor " + name);
      uint32_t nd = read_u32(f);
      std::vector<int64_t> shape(nd);
      for (auto& d : shape) d = static_cast<int64_t>(read_u64(f));
      if (shape != p->value.shape)
        throw std::runtime_error("checkpoint: shape mismatch for " + name);
      if (std::fread(p->value.ptr(), sizeof(double), p->value.data.size(), f) !=
          p->value.data.size())
        throw std::runtime_error("checkpoint: truncated data for " + name);
    }
    std::fclose(f);
    return cfg_fp;
  } catch (...) {
    std::fclose(f);
    throw;
  }
}

// ------------------------------------------------------------- initializers

void fill_constant(Tensor& t, double v) {
  for (auto& x : t.data) x = v;
}

void init_normal(Tensor& t, Rng& rng, double std) {
  for (auto& x : t.data) x = rng.normal(0.0, std);
}

void init_trunc_normal(Tensor& t, Rng& rng, double std) {
  for (auto& x : t.data) {
    double v;
    do {
      v = rng.normal(0.0, std);
    } while (std::abs(v) > 2.0 * std);
    x = v;
  }
}

void init_kaiming_conv(Tensor& t, Rng& rng) {
  check(t.ndim() == 4, "init_kaiming_conv: expected [Cout,Cin,kh,kw]");
  double fan_out = static_cast<double>(t.shape[0] * t.shape[2] * t.shape[3]);
  init_normal(t, rng, std::sqrt(2.0 / fan_out));
}

void init_xavier_linear(Tensor& t, Rng& rng) {
  check(t.ndim() == 2, "init_xavier_linear: expected [K,N]");
  double bound = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
  for (auto& x : t.data) x = rng.uniform(-bound, bound);
}

// ------------------------------------------------------------- layers

void Linear::build(ParamStore& ps, Rng& rng, const std::string& name, int64_t in, int64_t out,
                   bool bias) {
  w = &ps.create(name + ".w", {in, out}, true);
  init_trunc_normal(w->value, rng, 0.02);
  if (bias) b = &ps.create(name + ".b", {out}, false);
}

Var Linear::forward(Tape& t, Var x) const {
  return ag::linear(t, x, t.param(*w), b ? t.param(*b) : -1);
}

void Conv2d::build(ParamStore& ps, Rng& rng, const std::string& name, int64_t cin, int64_t cout,
                   int k, int stride_, int pad_, ag::PadMode mode_, int groups_, bool bias) {
  stride = stride_;
  pad = pad_;
  mode = mode_;
  groups = groups_;
  w = &ps.create(name + ".w", {cout, cin / groups_, k, k}, true);
  init_kaiming_conv(w->value, rng);
  if (bias) b = &ps.create(name + ".b", {cout}, false);
}

Var Conv2d::forward(Tape& t, Var x) const {
  return ag::conv2d(t, x, t.param(*w), b ? t.param(*b) : -1, stride, pad, mode, groups);
}

void BatchNorm2d::build(ParamStore& ps, const std::string& name, int64_t c) {
  gamma = &ps.create(name + ".gamma", {c}, false);
  beta = &ps.create(name + ".beta", {c}, false);
  run_mean = &ps.create(name + ".run_mean", {c}, false, false);
  run_var = &ps.create(name + ".run_var", {c}, false, false);
  fill_constant(gamma->value, 1.0);
  fill_constant(run_var->value, 1.0);
}

Var BatchNorm2d::forward(Tape& t, Var x, bool training) const {
  return ag::batchnorm2d(t, x, t.param(*gamma), t.param(*beta), run_mean->value, run_var->value,
                         training, momentum, eps);
}

void LayerNormChannel::build(ParamStore& ps, const std::string& name, int64_t c) {
  gamma = &ps.create(name + ".gamma", {c}, false);
  beta = &ps.create(name + ".beta", {c}, false);
  fill_constant(gamma->value, 1.0);
}

Var LayerNormChannel::forward(Tape& t, Var x) const {
  return ag::layernorm_channel(t, x, t.param(*gamma), t.param(*beta), eps);
}

// ------------------------------------------------------------- optimizer

void AdamW::step(ParamStore& ps) { step(ps, lr); }

void AdamW::step(ParamStore& ps, double lr_now) {
  ++step_count;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (auto& p : ps.all()) {
    if (!p->trainable || p->grad.data.empty()) continue;
    if (p->m.data.empty()) {
      p->m = Tensor::zeros(p->value.shape);
      p->v = Tensor::zeros(p->value.shape);
    }
    double* val = p->value.ptr();
    double* g = p->grad.ptr();
    double* m = p->m.ptr();
    double* v = p->v.ptr();
    int64_t n = p->value.numel();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      val[i] -= lr_now * mh / (std::sqrt(vh) + eps);
      if (weight_decay > 0.0 && p->decay) val[i] -= lr_now * weight_decay * val[i];
    }
  }
}

}  // namespace gimlab::nn
