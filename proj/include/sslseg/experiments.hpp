#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sslseg/corruption.hpp"
#include "sslseg/datapipe.hpp"
#include "sslseg/ledger.hpp"
#include "sslseg/ranking.hpp"
#include "sslseg/train.hpp"
#include "sslseg/unet.hpp"

namespace sslseg {

struct SeedsConfig {
  std::uint64_t phantom = 1;
  std::uint64_t pretrain = 2;
  std::uint64_t finetune = 3;  // shared across every grid cell
  std::uint64_t bank = 3;
};

struct DatasetConfig {
  std::string name = "desk";
  std::string path;  // optional: load a saved dataset instead of generating
  std::size_t image_size = 64;
  std::size_t n_unlabeled = 128;
  std::size_t n_train = 40;
  std::size_t n_val = 16;
  std::size_t n_test = 16;
  double noise_std = 12.0;
};

struct TrainStageConfig {
  double lr0 = 1e-3;
  double decay = 0.9;
  std::size_t period = 2;
  double stop_threshold = 1e-3;
  std::size_t stop_patience = 10;
  std::size_t max_epochs = 80;
  std::size_t batch_size = 0;  // 0 = auto (9, or 4 for tiny datasets)
};

struct TransferConfig {
  TransferScope scope = TransferScope::EncoderOnly;
  FinetunePolicy policy = FinetunePolicy::FinetuneImmediately;
  double lr_first = 1e-3;
};

struct TransferGridConfig {
  StrategyKey source{PretextTask::ContextPrediction, 16, SamplerKind::PoissonDisc};
  std::vector<double> learning_rates{1e-2, 1e-3, 1e-4, 1e-5};
  double fraction = 0.05;
};

struct ExtentConfig {
  std::vector<double> multipliers{1.0, 1.5, 2.0};
  StrategyKey strategy{PretextTask::ContextRestoration, 32, SamplerKind::PoissonDisc};
};

struct HarnessConfig {
  SeedsConfig seeds;
  std::vector<DatasetConfig> datasets{DatasetConfig{}};
  UNetConfig unet;  // depth/base_filters/groups; channels filled per dataset
  AdamConfig adam{1e-3, 0.99, 0.995, 1e-8};
  TrainStageConfig pretrain{1e-3, 0.9, 2, 50.0, 4, 40, 0};
  TrainStageConfig segment{1e-3, 0.9, 2, 1e-3, 10, 80, 0};
  TransferConfig transfer;
  std::vector<double> fractions{1.0, 0.5, 0.25, 0.10, 0.05};
  std::vector<std::size_t> patch_sizes{64, 32, 16, 8};
  TransferGridConfig transfer_grid;
  ExtentConfig extent;
  std::vector<WindowLevel> windows;  // empty = single-channel per-volume norm

  static HarnessConfig from_json(const nlohmann::json& j);
  static HarnessConfig load(const std::string& path);
  nlohmann::json to_json() const;  // fully resolved, for hashing and records
};

/// A dataset prepared for experiments: normalized model inputs plus the raw
/// maps and labels the metrics need.
struct PreparedDataset {
  std::string name;
  std::size_t channels = 1;
  Tensor pretrain_inputs;   // train images (+ unlabeled extras by multiplier)
  Tensor unlabeled_inputs;  // the full unlabeled pool, normalized
  DataSplit train;          // labeled training split
  DataSplit val;
  DataSplit test;
  Tensor test_raw;          // noiseless intensity maps for clinical metrics
  std::map<double, std::vector<std::size_t>> fraction_ids;  // into train split
};

PreparedDataset prepare_dataset(const HarnessConfig& cfg, std::size_t index);

/// Pretrain inputs for a data multiplier: the labeled-train images plus the
/// first round((m-1)*n_train) images of the unlabeled pool.
Tensor pretrain_inputs_for_multiplier(const PreparedDataset& ds, double multiplier);

// Commands. Every run goes through the ledger (out_dir/ledger); a completed
// cell with an identical config hash is never re-run. Reports under
// out_dir/reports are pure views of ledger records.
void cmd_gen_phantom(std::size_t size, std::size_t count, std::uint64_t seed,
                     const std::string& out_dir);
void cmd_pretrain_grid(const HarnessConfig& cfg, const std::string& out_dir,
                       std::size_t jobs);
void cmd_transfer_grid(const HarnessConfig& cfg, const std::string& out_dir,
                       std::size_t jobs);
void cmd_extent_sweep(const HarnessConfig& cfg, const std::string& out_dir,
                      std::size_t jobs);
void cmd_compare_clinical(const HarnessConfig& cfg, const std::string& out_dir,
                          std::size_t jobs, std::size_t directional_seeds);
void cmd_stats(const HarnessConfig& cfg, const std::string& out_dir);
void cmd_show_ledger(const std::string& out_dir, std::ostream& os);

// Cell-level entry points shared by commands (and exercised directly in
// tests). Each returns the cell's config hash.
std::string run_pretrain_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                              const StrategyKey& strategy, double multiplier,
                              const RunLedger& ledger);
std::string run_finetune_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                              const std::string& pretrain_hash, double fraction,
                              const TransferConfig& transfer,
                              std::optional<double> lr_second,
                              std::uint64_t finetune_seed, const RunLedger& ledger);
std::string run_supervised_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                                double fraction, std::uint64_t seed,
                                const RunLedger& ledger);

}  // namespace sslseg
