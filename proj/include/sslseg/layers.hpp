#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sslseg/rng.hpp"
#include "sslseg/tape.hpp"
#include "sslseg/tensor.hpp"

namespace sslseg {

// Variance guard inside weight standardization and group normalization.
inline constexpr double kWeightStdEps = 1e-5;
inline constexpr double kGroupNormEps = 1e-5;

enum class LayerKind {
  Conv2D,       // plain convolution
  GroupNormWS,  // group normalization (its paired conv is weight-standardized)
  ReLU,
  MaxPool2x2,
  Upsample2x,   // nearest-neighbour x2 followed by a 3x3 conv
  Concat,
  Sigmoid,
};

std::string layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t kernel = 3;      // Conv2D / Upsample2x
  std::size_t in_ch = 0;       // Conv2D / Upsample2x
  std::size_t out_ch = 0;      // Conv2D / Upsample2x
  std::size_t stride = 1;      // Conv2D
  bool weight_std = false;     // Conv2D: standardize the kernel before use
  std::size_t groups = 1;      // GroupNormWS
};

/// He-normal init for a conv kernel: Normal(0, 2/fan_in), fan_in = k*k*in.
Tensor he_conv_kernel(std::size_t k, std::size_t in_ch, std::size_t out_ch,
                      Rng& rng);

/// Parameter tensors a layer expects, freshly initialized (He kernels, zero
/// biases, unit gamma / zero beta).
std::vector<Tensor> init_layer_params(const LayerSpec& spec, Rng& rng);

/// Runs one layer on the tape. `params` must match init_layer_params order;
/// Concat takes two inputs, everything else one.
ValueId forward_layer(Tape& tape, const LayerSpec& spec,
                      std::span<const ValueId> params,
                      std::span<const ValueId> inputs);

/// Compares analytic gradients against central finite differences
/// (step 1e-5) on small random shapes. Returns the max over all inputs and
/// parameters of |g_an - g_fd| / max(|g_an|, |g_fd|, 1e-8).
double grad_check(const LayerSpec& spec, std::uint64_t seed);
double grad_check(LayerKind kind, std::uint64_t seed);

}  // namespace sslseg
