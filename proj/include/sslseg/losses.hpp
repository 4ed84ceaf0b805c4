#pragma once

#include "sslseg/tape.hpp"
#include "sslseg/tensor.hpp"

namespace sslseg {

// Dice-loss epsilon: small enough not to bias Dice at desk scale, large
// enough to rescue empty classes.
inline constexpr double kDiceEps = 1e-7;

struct DiceLossConfig {
  double epsilon = kDiceEps;
};

/// Inpainting loss: mean over channels and batch, sum over pixels of squared
/// differences (evaluation-only path; Tape::l2_loss is the trainable twin).
double l2_loss(const Tensor& x, const Tensor& y);

/// Batch-aggregate Dice loss per class, averaged over classes
/// (evaluation-only path; Tape::dice_loss is the trainable twin).
double dice_loss(const Tensor& x, const Tensor& y,
                 const DiceLossConfig& cfg = {});

}  // namespace sslseg
