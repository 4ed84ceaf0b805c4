#pragma once

#include <optional>

#include "sslseg/tensor.hpp"

namespace sslseg {

/// Dice coefficient 2|P^G| / (|P|+|G|) between binary masks; 1.0 when both
/// are empty.
double dice_coeff(const Tensor& pred, const Tensor& gt);

/// Inpainting evaluation: the pixel-sum L2 reduction of a single image pair
/// (prediction vs uncorrupted ground truth).
double inpaint_l2(const Tensor& pred, const Tensor& gt);

double tissue_area(const Tensor& mask, double pixel_area);
double tissue_volume(const Tensor& mask_stack, double voxel_volume);

/// Mean of raw values under the mask; empty masks yield an explicit
/// undefined marker rather than a silent NaN.
std::optional<double> mean_intensity(const Tensor& raw, const Tensor& mask);

/// 100 * |pred - gt| / |gt|; undefined when gt == 0.
std::optional<double> percent_error(double pred_value, double gt_value);

/// Binarize a probability map at 0.5.
Tensor binarize(const Tensor& probs, double threshold = 0.5);

}  // namespace sslseg
