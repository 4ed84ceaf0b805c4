#include "sslseg/metrics.hpp"

#include <cmath>

#include "sslseg/errors.hpp"
#include "sslseg/losses.hpp"

namespace sslseg {

namespace {

void require_binary(const Tensor& t, const char* where) {
  for (double v : t.data()) {
    if (v != 0.0 && v != 1.0) {
      throw NumericError(std::string(where) + ": mask must be binary");
    }
  }
}

}  // namespace

double dice_coeff(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "dice_coeff");
  require_binary(pred, "dice_coeff");
  require_binary(gt, "dice_coeff");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    total += pred[i] + gt[i];
  }
  if (total == 0.0) return 1.0;  // both empty
  return 2.0 * inter / total;
}

double inpaint_l2(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "inpaint_l2");
  if (pred.rank() == 4) return l2_loss(pred, gt);
  if (pred.rank() != 3) {
    throw ShapeError("inpaint_l2: expected H x W x C or 1 x H x W x C");
  }
  Tensor p({1, pred.dim(0), pred.dim(1), pred.dim(2)});
  Tensor g(p.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p[i] = pred[i];
    g[i] = gt[i];
  }
  return l2_loss(p, g);
}

double tissue_area(const Tensor& mask, double pixel_area) {
  require_binary(mask, "tissue_area");
  double count = 0.0;
  for (double v : mask.data()) count += v;
  return count * pixel_area;
}

double tissue_volume(const Tensor& mask_stack, double voxel_volume) {
  require_binary(mask_stack, "tissue_volume");
  double count = 0.0;
  for (double v : mask_stack.data()) count += v;
  return count * voxel_volume;
}

std::optional<double> mean_intensity(const Tensor& raw, const Tensor& mask) {
  if (raw.size() != mask.size()) {
    throw ShapeError("mean_intensity: raw map and mask sizes differ");
  }
  require_binary(mask, "mean_intensity");
  double sum = 0.0, count = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (mask[i] == 1.0) {
      sum += raw[i];
      count += 1.0;
    }
  }
  if (count == 0.0) return std::nullopt;
  return sum / count;
}

std::optional<double> percent_error(double pred_value, double gt_value) {
  if (gt_value == 0.0) return std::nullopt;
  return 100.0 * std::abs(pred_value - gt_value) / std::abs(gt_value);
}

Tensor binarize(const Tensor& probs, double threshold) {
  Tensor out(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i)
    out[i] = probs[i] >= threshold ? 1.0 : 0.0;
  return out;
}

}  // namespace sslseg
