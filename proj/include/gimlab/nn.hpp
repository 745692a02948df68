#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gimlab/autograd.hpp"
#include "gimlab/rng.hpp"

namespace gimlab::nn {

using ag::Parameter;
using ag::Tape;
using ag::Var;

/// Owns every parameter and buffer of a model; the unit of checkpointing.
class ParamStore {
 public:
  Parameter& create(const std::string& name, std::vector<int64_t> shape, bool decay = true,
                    bool trainable = true);
  Parameter* find(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

  void zero_grad();
  int64_t param_count() const;

  void save(const std::string& path, const std::string& arch_fingerprint,
            const std::string& config_fingerprint) const;
  /// Loads a checkpoint; throws if the fingerprint or any tensor mismatches.
  /// Returns the stored config fingerprint.
  std::string load(const std::string& path, const std::string& expected_arch_fingerprint);

  static std::string peek_arch_fingerprint(const std::string& path);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// initializers
void fill_constant(Tensor& t, double v);
void init_normal(Tensor& t, Rng& rng, double std);
void init_trunc_normal(Tensor& t, Rng& rng, double std);  // resample beyond 2 std
void init_kaiming_conv(Tensor& t, Rng& rng);              // fan_out normal for [Cout,Cin,kh,kw]
void init_xavier_linear(Tensor& t, Rng& rng);             // [K,N]

struct Linear {
  Parameter* w = nullptr;
  Parameter* b = nullptr;
  void build(ParamStore& ps, Rng& rng, const std::string& name, int64_t in, int64_t out,
             bool bias = true);
  Var forward(Tape& t, Var x) const;
};

struct Conv2d {
  Parameter* w = nullptr;
  Parameter* b = nullptr;
  int stride = 1, pad = 0, groups = 1;
  ag::PadMode mode = ag::PadMode::Replicate;
  void build(ParamStore& ps, Rng& rng, const std::string& name, int64_t cin, int64_t cout,
             int k, int stride, int pad, ag::PadMode mode = ag::PadMode::Replicate,
             int groups = 1, bool bias = true);
  Var forward(Tape& t, Var x) const;
};

struct BatchNorm2d {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  Parameter* run_mean = nullptr;  // buffers (non-trainable)
  Parameter* run_var = nullptr;
  double momentum = 0.1, eps = 1e-5;
  void build(ParamStore& ps, const std::string& name, int64_t c);
  Var forward(Tape& t, Var x, bool training) const;
};

struct LayerNormChannel {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  double eps = 1e-5;
  void build(ParamStore& ps, const std::string& name, int64_t c);
  Var forward(Tape& t, Var x) const;  // NCHW, normalized over C
};

/// Adam with optional decoupled weight decay (AdamW when weight_decay > 0).
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int64_t step_count = 0;

  void step(ParamStore& ps);
  void step(ParamStore& ps, double lr_now);
};

/// Poly learning-rate schedule: lr0 * (1 - iter/total)^power.
inline double poly_lr(double lr0, int64_t iter, int64_t total, double power) {
  double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total);
  if (frac < 0.0) frac = 0.0;
  return lr0 * std::pow(frac, power);
}

}  // namespace gimlab::nn
