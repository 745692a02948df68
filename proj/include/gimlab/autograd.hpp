#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gimlab/tensor.hpp"

namespace gimlab::ag {

/// Trainable tensor with persistent gradient and optimizer state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m, v;  // Adam moments, sized lazily by the optimizer
  bool decay = true;
  bool trainable = true;
};

using Var = int;

/// Dynamic tape: ops append nodes in topological order, backward() sweeps in
/// reverse. Values are computed eagerly; each op captures what its backward
/// pass needs.
class Tape {
 public:
  Var leaf(Tensor v, bool requires_grad = false);
  /// Leaf backed by a Parameter; repeated calls for the same parameter return
  /// the same node so gradients accumulate correctly.
  Var param(Parameter& p);

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
  Tensor& val_mut(Var v) { return nodes_[static_cast<size_t>(v)].value; }
  bool needs(Var v) const { return nodes_[static_cast<size_t>(v)].requires_grad; }

  /// Gradient buffer for a node, allocated (zeros) on first access.
  Tensor& grad(Var v);
  bool has_grad(Var v) const { return !nodes_[static_cast<size_t>(v)].grad.data.empty(); }

  /// Reverse sweep from a scalar root; flushes accumulated gradients into the
  /// backing Parameters.
  void backward(Var root);

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&, Var)> backprop);
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&, Var)> backprop;
  };
  // deque: pushing nodes never invalidates references held by op code
  std::deque<Node> nodes_;
  std::vector<std::pair<Parameter*, Var>> param_nodes_;
  std::unordered_map<const Parameter*, Var> param_lookup_;
};

enum class PadMode { Zero, Replicate };

// elementwise
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var relu(Tape& t, Var a);
Var leaky_relu(Tape& t, Var a, double slope);
Var gelu(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var softplus(Tape& t, Var a);
Var maximum(Tape& t, Var a, Var b);

// shape
Var reshape(Tape& t, Var a, std::vector<int64_t> shape);
Var permute(Tape& t, Var a, std::vector<int> axes);
Var concat(Tape& t, const std::vector<Var>& parts, int dim);

// dense
Var linear(Tape& t, Var x, Var w, Var b);  // x [...,K] w [K,N] b [N] or -1
Var matmul(Tape& t, Var a, Var b, bool transpose_b = false);  // [B,M,K]x[B,K,N]
Var softmax_lastdim(Tape& t, Var a);

// conv / norm (NCHW)
Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad, PadMode mode, int groups = 1);
Var batchnorm2d(Tape& t, Var x, Var gamma, Var beta, Tensor& run_mean, Tensor& run_var,
                bool training, double momentum = 0.1, double eps = 1e-5);
Var layernorm_channel(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);

// pooling / window statistics (replicate padding)
Var global_avg_pool(Tape& t, Var x);      // [N,C,H,W] -> [N,C]
Var window_mean(Tape& t, Var x, int k);
Var window_max(Tape& t, Var x, int k);
Var spatial_std(Tape& t, Var x);          // [N,C,H,W] -> [N,C], population std

// broadcast arithmetic
Var expand_to_nc(Tape& t, Var v, int64_t n);       // [C] -> [N,C]
Var mul_nc(Tape& t, Var x, Var s);                 // x [N,C,H,W] * s [N,C]
Var div_nc(Tape& t, Var x, Var s);
Var mul_score(Tape& t, Var x, Var s);              // x [N,C,H,W] * s [N,1,H,W]

// resampling
Var bilinear_upsample(Tape& t, Var x, int64_t oh, int64_t ow);

// spectral filtering; x [N,C,H,W], g_re/g_im [C,H,W/2+1]
Var spectral_filter(Tape& t, Var x, Var g_re, Var g_im);

// losses / reductions
Var mean_all(Tape& t, Var a);
Var bce_with_logits_mean(Tape& t, Var logits, Tensor targets);
Var l2norm_rows_mean(Tape& t, Var x);  // [N,M] -> mean_n ||x_n||_2
Var dot_const(Tape& t, Var a, Tensor w);  // sum(a*w) for fixed w -> scalar

}  // namespace gimlab::ag
