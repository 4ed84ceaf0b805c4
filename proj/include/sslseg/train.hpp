#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sslseg/corruption.hpp"
#include "sslseg/losses.hpp"
#include "sslseg/optim.hpp"
#include "sslseg/tensor.hpp"
#include "sslseg/unet.hpp"

namespace sslseg {

enum class RegimeKind { Inpaint, Segment };
enum class FinetunePolicy { FinetuneImmediately, FreezeThenFinetune };

struct TransferStrategy {
  TransferScope scope = TransferScope::EncoderOnly;
  FinetunePolicy policy = FinetunePolicy::FinetuneImmediately;
  double lr_first = 1e-3;
  std::optional<double> lr_second;  // second full training run when set
};

struct TrainOptions {
  std::size_t batch_size = 0;    // 0 = auto: 9, or 4 when the dataset is smaller
  std::size_t max_epochs = 500;  // safety ceiling; early stopping is the rule
  LRSchedule schedule;
  EarlyStopRule stop_rule;
  AdamConfig adam;
  DiceLossConfig dice;
  std::uint64_t seed = 0;  // data order
};

struct EpochStats {
  std::size_t epoch;
  double train_loss;
  double val_loss;
  double lr;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  bool early_stopped = false;
};

/// Inputs are normalized images; targets are per-class binary masks for the
/// segmentation regime and are ignored for inpainting (the uncorrupted input
/// is the target).
struct DataSplit {
  Tensor inputs;
  Tensor targets;
};

/// Validation inpainting masks are fixed per image index (stream offset into
/// the bank), so early stopping is not noise-driven.
inline constexpr std::uint64_t kValMaskStream = 1ull << 40;
inline constexpr std::uint64_t kTestMaskStream = 1ull << 41;

/// Trains in place. Inpaint regime: every iteration draws one bank mask,
/// corrupts the whole batch with it, and regresses onto the uncorrupted
/// images under the pixel-sum L2 loss. Segment regime: batch-aggregate Dice
/// loss on sigmoid outputs.
TrainHistory train(UNet& model, const DataSplit& train_data,
                   const DataSplit& val_data, RegimeKind regime,
                   const MaskBank* bank, const TrainOptions& opts);

struct FinetuneResult {
  UNet model;
  std::vector<TrainHistory> histories;  // one per training run/phase
};

/// Builds a fresh segmentation model, transfers the scoped groups from the
/// pretrained bundle, applies the strategy's policy, and trains with
/// lr_first (plus a second full run at lr_second when configured).
FinetuneResult finetune(const UNet& pretrained, const TransferStrategy& strategy,
                        const DataSplit& train_data, const DataSplit& val_data,
                        std::size_t out_channels, const TrainOptions& base_opts,
                        std::uint64_t model_seed);

void write_history_csv(const std::vector<TrainHistory>& histories,
                       const std::string& path);

}  // namespace sslseg
