#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sslseg/tensor.hpp"

namespace sslseg {

using ValueId = std::size_t;

/// Reverse-mode autodiff tape. Nodes are appended in execution order, so
/// parents always precede children and a reverse id sweep is a reverse
/// topological traversal. A tape is single-owner; build one per forward pass.
class Tape {
 public:
  /// Registers an input or parameter tensor.
  ValueId leaf(Tensor value);

  // Layer primitives. Every op validates input shapes and checks the output
  // for NaN/Inf (inputs are covered inductively: leaves are checked on entry,
  // interior values were some op's checked output).

  /// 2-D convolution, NHWC input, HWIO kernel, zero-fill same padding.
  /// Output H,W = ceil(H/stride), ceil(W/stride).
  ValueId conv2d(ValueId x, ValueId w, ValueId b, std::size_t stride = 1);

  /// Standardizes a conv kernel to zero mean, unit variance per output
  /// channel: w_hat = (w - mu) / sqrt(var + eps), statistics over k*k*in.
  ValueId weight_standardize(ValueId w, double eps);

  /// Group normalization with per-channel affine (gamma, beta of shape [C]).
  ValueId group_norm(ValueId x, ValueId gamma, ValueId beta,
                     std::size_t groups, double eps);

  ValueId relu(ValueId x);
  ValueId sigmoid(ValueId x);

  /// 2x2 max pooling, stride 2. Requires even H and W.
  ValueId max_pool2x2(ValueId x);

  /// Nearest-neighbour 2x upsampling.
  ValueId upsample_nearest2x(ValueId x);

  /// Concatenation along the channel axis.
  ValueId concat_channels(ValueId a, ValueId b);

  // Losses (scalar outputs). Targets are constants: no gradient flows to
  // them.

  /// Mean over channels and batch, sum over pixels of squared differences.
  ValueId l2_loss(ValueId pred, const Tensor& target);

  /// Batch-aggregate soft Dice loss per class, averaged over classes.
  /// pred must lie in [0,1] and target must be binary.
  ValueId dice_loss(ValueId pred, const Tensor& target, double eps);

  // Reductions used by tests and gradient checks.
  ValueId sum(ValueId x);
  ValueId weighted_sum(ValueId x, const Tensor& weights);

  /// Backpropagates from a scalar loss node. Visits nodes in reverse
  /// topological order exactly once; gradients of unused nodes stay zero.
  void backward(ValueId loss, double seed = 1.0);

  const Tensor& value(ValueId id) const { return nodes_[id].value; }
  const Tensor& grad(ValueId id) const { return nodes_[id].grad; }
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // same shape as value, zero until backward
    std::function<void(Tape&)> backprop;  // empty for leaves
  };

  ValueId push(Tensor value, std::function<void(Tape&)> backprop);
  Tensor& grad_mut(ValueId id) { return nodes_[id].grad; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace sslseg
