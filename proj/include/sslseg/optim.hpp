#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sslseg/tensor.hpp"
#include "sslseg/unet.hpp"

namespace sslseg {

struct AdamConfig {
  double lr0 = 1e-3;
  double beta1 = 0.99;
  double beta2 = 0.995;
  double eps = 1e-8;
};

/// Adam with bias correction. Parameters in frozen groups receive no update
/// and keep zero state deltas; the step counter still advances.
class Adam {
 public:
  Adam(const UNet& model, const AdamConfig& cfg);

  void step(UNet& model, const std::vector<Tensor>& grads, double lr);

  std::uint64_t t() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

/// Step decay: lr(e) = lr0 * decay^floor(e / period), epochs 0-based.
struct LRSchedule {
  double lr0 = 1e-3;
  double decay = 0.9;
  std::size_t period = 2;

  double lr(std::size_t epoch) const;
};

/// Stops when the monitored loss fails to improve on the best-seen value by
/// at least `threshold` for `patience` consecutive epochs.
struct EarlyStopRule {
  double threshold = 1e-3;
  std::size_t patience = 10;
};

class EarlyStopper {
 public:
  explicit EarlyStopper(const EarlyStopRule& rule) : rule_(rule) {}

  /// Feed one epoch's validation loss; returns true once training should stop.
  bool update(double val_loss);

  bool stopped() const { return stopped_; }
  double best() const { return best_; }

 private:
  EarlyStopRule rule_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  bool stopped_ = false;
};

}  // namespace sslseg
