#include "sslseg/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "sslseg/errors.hpp"
#include "sslseg/io_util.hpp"
#include "sslseg/losses.hpp"
#include "sslseg/metrics.hpp"
#include "sslseg/rng.hpp"
#include "sslseg/wilcoxon.hpp"

namespace sslseg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config <-> JSON

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

TransferScope scope_from_name(const std::string& s) {
  if (s == "encoder") return TransferScope::EncoderOnly;
  if (s == "encoder+decoder") return TransferScope::EncoderAndDecoder;
  throw ConfigError("unknown transfer scope '" + s + "'");
}

const char* scope_name(TransferScope s) {
  return s == TransferScope::EncoderOnly ? "encoder" : "encoder+decoder";
}

FinetunePolicy policy_from_name(const std::string& s) {
  if (s == "immediate") return FinetunePolicy::FinetuneImmediately;
  if (s == "freeze_then_finetune") return FinetunePolicy::FreezeThenFinetune;
  throw ConfigError("unknown finetune policy '" + s + "'");
}

const char* policy_name(FinetunePolicy p) {
  return p == FinetunePolicy::FinetuneImmediately ? "immediate"
                                                  : "freeze_then_finetune";
}

PretextTask task_from_name(const std::string& s) {
  if (s == "prediction") return PretextTask::ContextPrediction;
  if (s == "restoration") return PretextTask::ContextRestoration;
  throw ConfigError("unknown pretext task '" + s + "'");
}

SamplerKind sampler_from_name(const std::string& s) {
  if (s == "random") return SamplerKind::Random;
  if (s == "poisson") return SamplerKind::PoissonDisc;
  throw ConfigError("unknown sampler '" + s + "'");
}

StrategyKey strategy_from_json(const json& j) {
  StrategyKey k;
  k.task = task_from_name(j.at("task").get<std::string>());
  k.patch = j.at("patch").get<std::size_t>();
  k.sampler = sampler_from_name(j.at("sampler").get<std::string>());
  return k;
}

json strategy_to_json(const StrategyKey& k) {
  return json{{"task", task_name(k.task)},
              {"patch", k.patch},
              {"sampler", sampler_name(k.sampler)}};
}

TrainStageConfig stage_from_json(const json& j, TrainStageConfig dflt) {
  TrainStageConfig s = dflt;
  if (j.contains("lr0")) s.lr0 = j.at("lr0").get<double>();
  if (j.contains("decay")) s.decay = j.at("decay").get<double>();
  if (j.contains("period")) s.period = j.at("period").get<std::size_t>();
  if (j.contains("stop_threshold")) s.stop_threshold = j.at("stop_threshold").get<double>();
  if (j.contains("stop_patience")) s.stop_patience = j.at("stop_patience").get<std::size_t>();
  if (j.contains("max_epochs")) s.max_epochs = j.at("max_epochs").get<std::size_t>();
  if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<std::size_t>();
  return s;
}

json stage_to_json(const TrainStageConfig& s) {
  return json{{"lr0", s.lr0},
              {"decay", s.decay},
              {"period", s.period},
              {"stop_threshold", s.stop_threshold},
              {"stop_patience", s.stop_patience},
              {"max_epochs", s.max_epochs},
              {"batch_size", s.batch_size}};
}

}  // namespace

HarnessConfig HarnessConfig::from_json(const json& j) {
  HarnessConfig cfg;
  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    if (s.contains("phantom")) cfg.seeds.phantom = s.at("phantom").get<std::uint64_t>();
    if (s.contains("pretrain")) cfg.seeds.pretrain = s.at("pretrain").get<std::uint64_t>();
    if (s.contains("finetune")) cfg.seeds.finetune = s.at("finetune").get<std::uint64_t>();
    if (s.contains("bank")) cfg.seeds.bank = s.at("bank").get<std::uint64_t>();
  }
  if (j.contains("datasets")) {
    cfg.datasets.clear();
    for (const json& d : j.at("datasets")) {
      DatasetConfig dc;
      dc.name = d.at("name").get<std::string>();
      if (d.contains("path")) dc.path = d.at("path").get<std::string>();
      if (d.contains("image_size")) dc.image_size = d.at("image_size").get<std::size_t>();
      if (d.contains("n_unlabeled")) dc.n_unlabeled = d.at("n_unlabeled").get<std::size_t>();
      if (d.contains("n_train")) dc.n_train = d.at("n_train").get<std::size_t>();
      if (d.contains("n_val")) dc.n_val = d.at("n_val").get<std::size_t>();
      if (d.contains("n_test")) dc.n_test = d.at("n_test").get<std::size_t>();
      if (d.contains("noise_std")) dc.noise_std = d.at("noise_std").get<double>();
      cfg.datasets.push_back(dc);
    }
  }
  if (j.contains("unet")) {
    const json& u = j.at("unet");
    if (u.contains("depth")) cfg.unet.depth = u.at("depth").get<std::size_t>();
    if (u.contains("base_filters")) cfg.unet.base_filters = u.at("base_filters").get<std::size_t>();
    if (u.contains("groups")) cfg.unet.groups = u.at("groups").get<std::size_t>();
  }
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    if (a.contains("beta1")) cfg.adam.beta1 = a.at("beta1").get<double>();
    if (a.contains("beta2")) cfg.adam.beta2 = a.at("beta2").get<double>();
    if (a.contains("eps")) cfg.adam.eps = a.at("eps").get<double>();
  }
  if (j.contains("pretrain")) cfg.pretrain = stage_from_json(j.at("pretrain"), cfg.pretrain);
  if (j.contains("segment")) cfg.segment = stage_from_json(j.at("segment"), cfg.segment);
  if (j.contains("transfer")) {
    const json& t = j.at("transfer");
    if (t.contains("scope")) cfg.transfer.scope = scope_from_name(t.at("scope").get<std::string>());
    if (t.contains("policy")) cfg.transfer.policy = policy_from_name(t.at("policy").get<std::string>());
    if (t.contains("lr_first")) cfg.transfer.lr_first = t.at("lr_first").get<double>();
  }
  if (j.contains("fractions")) cfg.fractions = j.at("fractions").get<std::vector<double>>();
  if (j.contains("grid") && j.at("grid").contains("patch_sizes"))
    cfg.patch_sizes = j.at("grid").at("patch_sizes").get<std::vector<std::size_t>>();
  if (j.contains("transfer_grid")) {
    const json& t = j.at("transfer_grid");
    if (t.contains("source")) cfg.transfer_grid.source = strategy_from_json(t.at("source"));
    if (t.contains("learning_rates"))
      cfg.transfer_grid.learning_rates = t.at("learning_rates").get<std::vector<double>>();
    if (t.contains("fraction")) cfg.transfer_grid.fraction = t.at("fraction").get<double>();
  }
  if (j.contains("extent")) {
    const json& e = j.at("extent");
    if (e.contains("multipliers")) cfg.extent.multipliers = e.at("multipliers").get<std::vector<double>>();
    if (e.contains("strategy")) cfg.extent.strategy = strategy_from_json(e.at("strategy"));
  }
  if (j.contains("windows")) {
    cfg.windows.clear();
    for (const json& w : j.at("windows"))
      cfg.windows.push_back({w.at("width").get<double>(), w.at("level").get<double>()});
  }
  return cfg;
}

HarnessConfig HarnessConfig::load(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  try {
    return from_json(json::parse(read_text_file(path)));
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
}

json HarnessConfig::to_json() const {
  json datasets = json::array();
  for (const DatasetConfig& d : this->datasets) {
    datasets.push_back({{"name", d.name},
                        {"path", d.path},
                        {"image_size", d.image_size},
                        {"n_unlabeled", d.n_unlabeled},
                        {"n_train", d.n_train},
                        {"n_val", d.n_val},
                        {"n_test", d.n_test},
                        {"noise_std", d.noise_std}});
  }
  json windows = json::array();
  for (const WindowLevel& w : this->windows)
    windows.push_back({{"width", w.width}, {"level", w.level}});
  return json{
      {"seeds",
       {{"phantom", seeds.phantom},
        {"pretrain", seeds.pretrain},
        {"finetune", seeds.finetune},
        {"bank", seeds.bank}}},
      {"datasets", datasets},
      {"unet",
       {{"depth", unet.depth},
        {"base_filters", unet.base_filters},
        {"groups", unet.groups}}},
      {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
      {"pretrain", stage_to_json(pretrain)},
      {"segment", stage_to_json(segment)},
      {"transfer",
       {{"scope", scope_name(transfer.scope)},
        {"policy", policy_name(transfer.policy)},
        {"lr_first", transfer.lr_first}}},
      {"fractions", fractions},
      {"grid", {{"patch_sizes", patch_sizes}}},
      {"transfer_grid",
       {{"source", strategy_to_json(transfer_grid.source)},
        {"learning_rates", transfer_grid.learning_rates},
        {"fraction", transfer_grid.fraction}}},
      {"extent",
       {{"multipliers", extent.multipliers},
        {"strategy", strategy_to_json(extent.strategy)}}},
      {"windows", windows},
  };
}

// ---------------------------------------------------------------------------
// Dataset preparation

namespace {

Tensor slice_rows(const Tensor& stack, std::size_t begin, std::size_t count) {
  const std::size_t row = stack.size() / stack.dim(0);
  Tensor out({count, stack.dim(1), stack.dim(2), stack.dim(3)});
  std::copy(stack.data().data() + begin * row,
            stack.data().data() + (begin + count) * row, out.data().data());
  return out;
}

Tensor gather_rows(const Tensor& stack, const std::vector<std::size_t>& ids) {
  const std::size_t row = stack.size() / stack.dim(0);
  Tensor out({ids.size(), stack.dim(1), stack.dim(2), stack.dim(3)});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(stack.data().data() + ids[i] * row,
              stack.data().data() + (ids[i] + 1) * row,
              out.data().data() + i * row);
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// Each image is treated as its own volume: single-channel inputs get
// per-volume normalization, windowed multi-channel inputs per-channel.
Tensor preprocess_images(const Tensor& raw_images,
                         const std::vector<WindowLevel>& windows) {
  const std::size_t n = raw_images.dim(0);
  const std::size_t channels = windows.empty() ? 1 : windows.size();
  Tensor out({n, raw_images.dim(1), raw_images.dim(2), channels});
  const std::size_t out_row = out.size() / n;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor one = slice_rows(raw_images, i, 1);
    Tensor processed =
        windows.empty()
            ? normalize(one, NormalizeMode::PerVolume)
            : normalize(hu_window_stack(one, windows), NormalizeMode::PerChannel);
    std::copy(processed.data().begin(), processed.data().end(),
              out.data().data() + i * out_row);
  }
  return out;
}

PhantomSpec phantom_spec_for(const HarnessConfig& cfg, std::size_t index) {
  const DatasetConfig& d = cfg.datasets.at(index);
  PhantomSpec spec;
  spec.image_size = d.image_size;
  spec.n_images = d.n_unlabeled + d.n_train + d.n_val + d.n_test;
  spec.noise_std = d.noise_std;
  spec.seed = mix_seed(cfg.seeds.phantom, 0xDA7Au, index);
  return spec;
}

}  // namespace

PreparedDataset prepare_dataset(const HarnessConfig& cfg, std::size_t index) {
  const DatasetConfig& d = cfg.datasets.at(index);
  PhantomDataset ds;
  if (!d.path.empty()) {
    if (!fs::exists(d.path)) {
      throw ConfigError("dataset '" + d.name + "': path not found: " + d.path);
    }
    ds = load_dataset(d.path);
    const std::size_t need = d.n_unlabeled + d.n_train + d.n_val + d.n_test;
    if (ds.images.dim(0) < need) {
      throw ConfigError("dataset '" + d.name + "': has " +
                        std::to_string(ds.images.dim(0)) + " images, config needs " +
                        std::to_string(need));
    }
  } else {
    ds = gen_phantom(phantom_spec_for(cfg, index));
  }

  PreparedDataset out;
  out.name = d.name;
  out.channels = cfg.windows.empty() ? 1 : cfg.windows.size();
  const Tensor inputs = preprocess_images(ds.images, cfg.windows);

  const std::size_t u0 = 0, t0 = d.n_unlabeled, v0 = t0 + d.n_train,
                    s0 = v0 + d.n_val;
  out.unlabeled_inputs = slice_rows(inputs, u0, d.n_unlabeled);
  out.train.inputs = slice_rows(inputs, t0, d.n_train);
  out.train.targets = slice_rows(ds.labels, t0, d.n_train);
  out.val.inputs = slice_rows(inputs, v0, d.n_val);
  out.val.targets = slice_rows(ds.labels, v0, d.n_val);
  out.test.inputs = slice_rows(inputs, s0, d.n_test);
  out.test.targets = slice_rows(ds.labels, s0, d.n_test);
  out.test_raw = slice_rows(ds.raw, s0, d.n_test);
  out.pretrain_inputs = out.train.inputs;

  std::vector<std::size_t> train_ids(d.n_train);
  std::iota(train_ids.begin(), train_ids.end(), 0);
  SplitSpec split_spec;
  split_spec.fractions = cfg.fractions;
  split_spec.seed = mix_seed(cfg.seeds.phantom, 0x5117u, index);
  out.fraction_ids = make_splits(train_ids, split_spec);
  return out;
}

Tensor pretrain_inputs_for_multiplier(const PreparedDataset& ds, double multiplier) {
  if (multiplier < 1.0) {
    throw ConfigError("pretrain multiplier must be >= 1.0, got " +
                      fmt_double(multiplier));
  }
  const std::size_t extra = static_cast<std::size_t>(
      std::llround((multiplier - 1.0) * static_cast<double>(ds.train.inputs.dim(0))));
  if (extra == 0) return ds.train.inputs;
  if (extra > ds.unlabeled_inputs.dim(0)) {
    throw ConfigError("pretrain multiplier " + fmt_double(multiplier) +
                      " needs " + std::to_string(extra) +
                      " unlabeled images, pool has " +
                      std::to_string(ds.unlabeled_inputs.dim(0)));
  }
  return concat_rows(ds.train.inputs, slice_rows(ds.unlabeled_inputs, 0, extra));
}

// ---------------------------------------------------------------------------
// Cell runners

namespace {

json dataset_cfg_json(const HarnessConfig& cfg, const PreparedDataset& ds) {
  for (const DatasetConfig& d : cfg.datasets) {
    if (d.name == ds.name) {
      json windows = json::array();
      for (const WindowLevel& w : cfg.windows)
        windows.push_back({{"width", w.width}, {"level", w.level}});
      return json{{"name", d.name},
                  {"path", d.path},
                  {"image_size", d.image_size},
                  {"n_unlabeled", d.n_unlabeled},
                  {"n_train", d.n_train},
                  {"n_val", d.n_val},
                  {"n_test", d.n_test},
                  {"noise_std", d.noise_std},
                  {"windows", windows},
                  {"phantom_seed", cfg.seeds.phantom}};
    }
  }
  throw ConfigError("unknown dataset " + ds.name);
}

json unet_cfg_json(const HarnessConfig& cfg) {
  return json{{"depth", cfg.unet.depth},
              {"base_filters", cfg.unet.base_filters},
              {"groups", cfg.unet.groups}};
}

json adam_cfg_json(const HarnessConfig& cfg) {
  return json{{"beta1", cfg.adam.beta1}, {"beta2", cfg.adam.beta2}, {"eps", cfg.adam.eps}};
}

TrainOptions make_train_options(const TrainStageConfig& stage,
                                const AdamConfig& adam, std::uint64_t seed) {
  TrainOptions opts;
  opts.batch_size = stage.batch_size;
  opts.max_epochs = stage.max_epochs;
  opts.schedule = {stage.lr0, stage.decay, stage.period};
  opts.stop_rule = {stage.stop_threshold, stage.stop_patience};
  opts.adam = adam;
  opts.seed = seed;
  return opts;
}

UNetConfig make_unet_config(const HarnessConfig& cfg, std::size_t channels,
                            std::size_t out_channels, Head head,
                            std::uint64_t seed) {
  UNetConfig u = cfg.unet;
  u.in_channels = channels;
  u.out_channels = out_channels;
  u.head = head;
  u.seed = seed;
  return u;
}

// Per-item, per-class Dice on the test split at threshold 0.5.
std::vector<std::vector<double>> test_dice_matrix(const UNet& model,
                                                  const DataSplit& test) {
  const Tensor pred = binarize(model.run(test.inputs));
  const std::size_t n = pred.dim(0), classes = pred.dim(3);
  const std::size_t pixels = pred.dim(1) * pred.dim(2);
  std::vector<std::vector<double>> dice(n, std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      double inter = 0.0, total = 0.0;
      for (std::size_t px = 0; px < pixels; ++px) {
        const double p = pred[(i * pixels + px) * classes + c];
        const double g = test.targets[(i * pixels + px) * classes + c];
        inter += p * g;
        total += p + g;
      }
      dice[i][c] = total == 0.0 ? 1.0 : 2.0 * inter / total;
    }
  }
  return dice;
}

json dice_metrics_json(const std::vector<std::vector<double>>& dice) {
  const std::size_t n = dice.size(), classes = dice.empty() ? 0 : dice[0].size();
  std::vector<double> item_mean(n, 0.0);
  std::vector<double> class_mean(classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      item_mean[i] += dice[i][c];
      class_mean[c] += dice[i][c];
    }
    item_mean[i] /= static_cast<double>(classes);
  }
  for (double& v : class_mean) v /= static_cast<double>(n);
  double mean = 0.0;
  for (double v : item_mean) mean += v;
  mean /= static_cast<double>(n);
  return json{{"dice_per_item_class", dice},
              {"dice_per_item_mean", item_mean},
              {"dice_per_class_mean", class_mean},
              {"dice_mean", mean}};
}

std::mutex g_log_mutex;

void log_line(const std::string& line) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::fprintf(stderr, "%s\n", line.c_str());
  std::fflush(stderr);
}

void run_parallel(std::vector<std::function<void()>> tasks, std::size_t jobs) {
  if (jobs <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, tasks.size()); ++t)
    pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

std::string run_pretrain_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                              const StrategyKey& strategy, double multiplier,
                              const RunLedger& ledger) {
  json cell = {
      {"kind", "pretrain"},
      {"dataset", dataset_cfg_json(cfg, ds)},
      {"strategy", strategy_to_json(strategy)},
      {"multiplier", multiplier},
      {"unet", unet_cfg_json(cfg)},
      {"adam", adam_cfg_json(cfg)},
      {"stage", stage_to_json(cfg.pretrain)},
      {"seeds", {{"pretrain", cfg.seeds.pretrain}, {"bank", cfg.seeds.bank}}},
  };
  const std::string hash = config_hash(cell);
  if (ledger.has(hash)) return hash;

  log_line("[pretrain] " + ds.name + " " + strategy.label() + " x" +
           fmt_double(multiplier));
  const std::string dir = ledger.prepare(hash);

  const std::size_t size = ds.train.inputs.dim(1);
  PatchSpec patch{strategy.patch, size, size,
                  strategy.sampler};
  MaskBank bank = make_bank(patch, strategy.task, cfg.seeds.bank);

  UNet model = UNet::build(make_unet_config(cfg, ds.channels, ds.channels,
                                            Head::Inpaint, cfg.seeds.pretrain));
  DataSplit pre_train;
  pre_train.inputs = pretrain_inputs_for_multiplier(ds, multiplier);
  TrainOptions opts =
      make_train_options(cfg.pretrain, cfg.adam, cfg.seeds.pretrain);
  TrainHistory history =
      train(model, pre_train, ds.val, RegimeKind::Inpaint, &bank, opts);

  // Test-set inpainting quality with the fixed test mask stream.
  std::vector<double> per_item;
  std::size_t capped_masks = 0;
  const std::size_t n_test = ds.test.inputs.dim(0);
  for (std::size_t i = 0; i < n_test; ++i) {
    Tensor gt = slice_rows(ds.test.inputs, i, 1);
    const Mask mask = draw_mask(bank, kTestMaskStream + i);
    if (mask_capped(mask)) ++capped_masks;
    Tensor pred = model.run(apply_mask_batch(mask, gt));
    per_item.push_back(inpaint_l2(pred, gt));
  }
  double mean = 0.0;
  for (double v : per_item) mean += v;
  mean /= static_cast<double>(per_item.size());
  double var = 0.0;
  for (double v : per_item) var += (v - mean) * (v - mean);
  const double stddev = per_item.size() > 1
                            ? std::sqrt(var / static_cast<double>(per_item.size() - 1))
                            : 0.0;

  std::size_t capped_in_bank = 0;
  for (const Mask& m : bank.base)
    if (mask_capped(m)) ++capped_in_bank;

  save_checkpoint(model, dir + "/checkpoint");
  write_history_csv({history}, dir + "/history.csv");
  json record = {
      {"kind", "pretrain"},
      {"config", cell},
      {"metrics",
       {{"test_l2_per_item", per_item},
        {"test_l2_mean", mean},
        {"test_l2_std", stddev},
        {"val_l2_final", history.epochs.empty() ? 0.0 : history.epochs.back().val_loss},
        {"epochs", history.epochs.size()},
        {"early_stopped", history.early_stopped},
        {"capped_masks_in_bank", capped_in_bank},
        {"capped_test_masks", capped_masks}}},
      {"artifacts", {{"checkpoint", "checkpoint"}, {"history", "history.csv"}}},
  };
  ledger.commit(hash, record);
  return hash;
}

namespace {

DataSplit fraction_split(const PreparedDataset& ds, double fraction) {
  const auto it = ds.fraction_ids.find(fraction);
  if (it == ds.fraction_ids.end()) {
    throw ConfigError("fraction " + fmt_double(fraction) + " not configured");
  }
  DataSplit out;
  out.inputs = gather_rows(ds.train.inputs, it->second);
  out.targets = gather_rows(ds.train.targets, it->second);
  return out;
}

json segment_run_record(const UNet& model, const PreparedDataset& ds,
                        const std::vector<TrainHistory>& histories) {
  json metrics = dice_metrics_json(test_dice_matrix(model, ds.test));
  std::size_t total_epochs = 0;
  json stopped = json::array();
  for (const TrainHistory& h : histories) {
    total_epochs += h.epochs.size();
    stopped.push_back(h.early_stopped);
  }
  metrics["epochs"] = total_epochs;
  metrics["early_stopped"] = stopped;
  return metrics;
}

}  // namespace

std::string run_finetune_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                              const std::string& pretrain_hash, double fraction,
                              const TransferConfig& transfer,
                              std::optional<double> lr_second,
                              std::uint64_t finetune_seed, const RunLedger& ledger) {
  json cell = {
      {"kind", "finetune"},
      {"dataset", dataset_cfg_json(cfg, ds)},
      {"pretrain", pretrain_hash},
      {"fraction", fraction},
      {"transfer",
       {{"scope", scope_name(transfer.scope)},
        {"policy", policy_name(transfer.policy)},
        {"lr_first", transfer.lr_first},
        {"lr_second", lr_second ? json(*lr_second) : json(nullptr)}}},
      {"unet", unet_cfg_json(cfg)},
      {"adam", adam_cfg_json(cfg)},
      {"stage", stage_to_json(cfg.segment)},
      {"seed", finetune_seed},
  };
  const std::string hash = config_hash(cell);
  if (ledger.has(hash)) return hash;

  log_line("[finetune] " + ds.name + " frac=" + fmt_double(fraction) + " from " +
           pretrain_hash.substr(0, 8));
  const std::string dir = ledger.prepare(hash);

  const UNet pretrained = load_checkpoint(ledger.dir_for(pretrain_hash) + "/checkpoint");
  TransferStrategy strategy;
  strategy.scope = transfer.scope;
  strategy.policy = transfer.policy;
  strategy.lr_first = transfer.lr_first;
  strategy.lr_second = lr_second;

  DataSplit labeled = fraction_split(ds, fraction);
  TrainOptions opts = make_train_options(cfg.segment, cfg.adam, finetune_seed);
  FinetuneResult result = finetune(pretrained, strategy, labeled, ds.val,
                                   PhantomSpec::n_classes, opts, finetune_seed);

  save_checkpoint(result.model, dir + "/checkpoint");
  write_history_csv(result.histories, dir + "/history.csv");
  json record = {
      {"kind", "finetune"},
      {"config", cell},
      {"metrics", segment_run_record(result.model, ds, result.histories)},
      {"artifacts", {{"checkpoint", "checkpoint"}, {"history", "history.csv"}}},
  };
  ledger.commit(hash, record);
  return hash;
}

std::string run_supervised_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                                double fraction, std::uint64_t seed,
                                const RunLedger& ledger) {
  json cell = {
      {"kind", "supervised"},
      {"dataset", dataset_cfg_json(cfg, ds)},
      {"fraction", fraction},
      {"unet", unet_cfg_json(cfg)},
      {"adam", adam_cfg_json(cfg)},
      {"stage", stage_to_json(cfg.segment)},
      {"seed", seed},
  };
  const std::string hash = config_hash(cell);
  if (ledger.has(hash)) return hash;

  log_line("[supervised] " + ds.name + " frac=" + fmt_double(fraction));
  const std::string dir = ledger.prepare(hash);

  UNet model = UNet::build(make_unet_config(cfg, ds.channels,
                                            PhantomSpec::n_classes,
                                            Head::Segment, seed));
  DataSplit labeled = fraction_split(ds, fraction);
  TrainOptions opts = make_train_options(cfg.segment, cfg.adam, seed);
  TrainHistory history =
      train(model, labeled, ds.val, RegimeKind::Segment, nullptr, opts);

  save_checkpoint(model, dir + "/checkpoint");
  write_history_csv({history}, dir + "/history.csv");
  json record = {
      {"kind", "supervised"},
      {"config", cell},
      {"metrics", segment_run_record(model, ds, {history})},
      {"artifacts", {{"checkpoint", "checkpoint"}, {"history", "history.csv"}}},
  };
  ledger.commit(hash, record);
  return hash;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct CsvWriter {
  std::ostringstream os;

  explicit CsvWriter(const std::string& header) { os << header << "\n"; }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      os << (i ? "," : "") << cells[i];
    os << "\n";
  }
  void save(const std::string& path) { write_file_atomic(path, os.str()); }
};

std::string reports_dir(const std::string& out_dir) {
  const std::string dir = out_dir + "/reports";
  fs::create_directories(dir);
  return dir;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<StrategyKey> full_grid_for(const HarnessConfig& cfg) {
  std::vector<StrategyKey> grid;
  for (PretextTask task :
       {PretextTask::ContextPrediction, PretextTask::ContextRestoration})
    for (std::size_t patch : cfg.patch_sizes)
      for (SamplerKind sampler : {SamplerKind::Random, SamplerKind::PoissonDisc})
        grid.push_back({task, patch, sampler});
  return grid;
}

}  // namespace

void cmd_gen_phantom(std::size_t size, std::size_t count, std::uint64_t seed,
                     const std::string& out_dir) {
  PhantomSpec spec;
  spec.image_size = size;
  spec.n_images = count;
  spec.seed = seed;
  save_dataset(gen_phantom(spec), out_dir);
}

void cmd_pretrain_grid(const HarnessConfig& cfg, const std::string& out_dir,
                       std::size_t jobs) {
  RunLedger ledger(out_dir + "/ledger");
  const std::vector<StrategyKey> grid = full_grid_for(cfg);

  struct DatasetRuns {
    PreparedDataset ds;
    std::map<StrategyKey, std::string> pretrain_hashes;
    std::map<std::pair<std::string, double>, std::string> finetune_hashes;
    std::map<double, std::string> baseline_hashes;
  };
  std::vector<DatasetRuns> runs;
  for (std::size_t di = 0; di < cfg.datasets.size(); ++di)
    runs.push_back({prepare_dataset(cfg, di), {}, {}, {}});

  // Stage 1: pretrains.
  {
    std::vector<std::function<void()>> tasks;
    std::mutex m;
    for (DatasetRuns& dr : runs) {
      DatasetRuns* drp = &dr;
      for (const StrategyKey& key : grid)
        tasks.push_back([&, drp, key] {
          const std::string h = run_pretrain_cell(cfg, drp->ds, key, 1.0, ledger);
          std::lock_guard<std::mutex> lock(m);
          drp->pretrain_hashes[key] = h;
        });
    }
    run_parallel(std::move(tasks), jobs);
  }
  // Stage 2: fine-tunes (identical seed across cells) and baselines.
  {
    std::vector<std::function<void()>> tasks;
    std::mutex m;
    for (DatasetRuns& dr : runs) {
      DatasetRuns* drp = &dr;
      for (const StrategyKey& key : grid) {
        const std::string ph = dr.pretrain_hashes.at(key);
        for (double fraction : cfg.fractions) {
          tasks.push_back([&, drp, ph, fraction] {
            const std::string h =
                run_finetune_cell(cfg, drp->ds, ph, fraction, cfg.transfer,
                                  std::nullopt, cfg.seeds.finetune, ledger);
            std::lock_guard<std::mutex> lock(m);
            drp->finetune_hashes[{ph, fraction}] = h;
          });
        }
      }
      for (double fraction : cfg.fractions) {
        tasks.push_back([&, drp, fraction] {
          const std::string h = run_supervised_cell(cfg, drp->ds, fraction,
                                                    cfg.seeds.finetune, ledger);
          std::lock_guard<std::mutex> lock(m);
          drp->baseline_hashes[fraction] = h;
        });
      }
    }
    run_parallel(std::move(tasks), jobs);
  }

  // Reports are pure views of ledger records.
  const std::string rep = reports_dir(out_dir);
  CsvWriter l2_csv("dataset,task,patch,sampler,l2_mean,l2_std");
  CsvWriter dice_csv("dataset,task,patch,sampler,fraction,class,dice");
  CsvWriter items_csv("dataset,task,patch,sampler,fraction,item,mean_dice");
  for (DatasetRuns& dr : runs) {
    for (const StrategyKey& key : grid) {
      const json pre = ledger.load_record(dr.pretrain_hashes.at(key));
      l2_csv.row({dr.ds.name, task_name(key.task), std::to_string(key.patch),
                  sampler_name(key.sampler),
                  fmt_double(pre.at("metrics").at("test_l2_mean").get<double>()),
                  fmt_double(pre.at("metrics").at("test_l2_std").get<double>())});
      for (double fraction : cfg.fractions) {
        const json rec = ledger.load_record(
            dr.finetune_hashes.at({dr.pretrain_hashes.at(key), fraction}));
        const auto class_mean =
            rec.at("metrics").at("dice_per_class_mean").get<std::vector<double>>();
        for (std::size_t c = 0; c < class_mean.size(); ++c)
          dice_csv.row({dr.ds.name, task_name(key.task), std::to_string(key.patch),
                        sampler_name(key.sampler), fmt_double(fraction),
                        std::to_string(c), fmt_double(class_mean[c])});
        const auto item_mean =
            rec.at("metrics").at("dice_per_item_mean").get<std::vector<double>>();
        for (std::size_t i = 0; i < item_mean.size(); ++i)
          items_csv.row({dr.ds.name, task_name(key.task), std::to_string(key.patch),
                         sampler_name(key.sampler), fmt_double(fraction),
                         std::to_string(i), fmt_double(item_mean[i])});
      }
    }
    for (double fraction : cfg.fractions) {
      const json rec = ledger.load_record(dr.baseline_hashes.at(fraction));
      const auto class_mean =
          rec.at("metrics").at("dice_per_class_mean").get<std::vector<double>>();
      for (std::size_t c = 0; c < class_mean.size(); ++c)
        dice_csv.row({dr.ds.name, "supervised", "0", "none", fmt_double(fraction),
                      std::to_string(c), fmt_double(class_mean[c])});
      const auto item_mean =
          rec.at("metrics").at("dice_per_item_mean").get<std::vector<double>>();
      for (std::size_t i = 0; i < item_mean.size(); ++i)
        items_csv.row({dr.ds.name, "supervised", "0", "none", fmt_double(fraction),
                       std::to_string(i), fmt_double(item_mean[i])});
    }
  }
  l2_csv.save(rep + "/inpaint_l2.csv");
  dice_csv.save(rep + "/dice.csv");
  items_csv.save(rep + "/dice_items.csv");
}

namespace {

struct TransferCellSpec {
  TransferScope scope;
  FinetunePolicy policy;
  std::string label_prefix;  // FE / FB / FFE / FFB
};

const TransferCellSpec kTransferCells[4] = {
    {TransferScope::EncoderOnly, FinetunePolicy::FinetuneImmediately, "FE"},
    {TransferScope::EncoderAndDecoder, FinetunePolicy::FinetuneImmediately, "FB"},
    {TransferScope::EncoderOnly, FinetunePolicy::FreezeThenFinetune, "FFE"},
    {TransferScope::EncoderAndDecoder, FinetunePolicy::FreezeThenFinetune, "FFB"},
};

// Second-run cell: retrains an existing fine-tuned model once at lr2.
std::string run_second_run_cell(const HarnessConfig& cfg, const PreparedDataset& ds,
                                const std::string& first_hash, double fraction,
                                double lr2, const RunLedger& ledger) {
  json cell = {
      {"kind", "second_run"},
      {"dataset", dataset_cfg_json(cfg, ds)},
      {"first_run", first_hash},
      {"fraction", fraction},
      {"lr"
       , lr2},
      {"unet", unet_cfg_json(cfg)},
      {"adam", adam_cfg_json(cfg)},
      {"stage", stage_to_json(cfg.segment)},
      {"seed", cfg.seeds.finetune},
  };
  const std::string hash = config_hash(cell);
  if (ledger.has(hash)) return hash;

  log_line("[second-run] from " + first_hash.substr(0, 8) + " lr=" + fmt_double(lr2));
  const std::string dir = ledger.prepare(hash);
  UNet model = load_checkpoint(ledger.dir_for(first_hash) + "/checkpoint");
  DataSplit labeled = fraction_split(ds, fraction);
  TrainOptions opts = make_train_options(cfg.segment, cfg.adam, cfg.seeds.finetune);
  opts.schedule.lr0 = lr2;
  TrainHistory history =
      train(model, labeled, ds.val, RegimeKind::Segment, nullptr, opts);

  save_checkpoint(model, dir + "/checkpoint");
  write_history_csv({history}, dir + "/history.csv");
  json record = {
      {"kind", "second_run"},
      {"config", cell},
      {"metrics", segment_run_record(model, ds, {history})},
      {"artifacts", {{"checkpoint", "checkpoint"}, {"history", "history.csv"}}},
  };
  ledger.commit(hash, record);
  return hash;
}

}  // namespace

void cmd_transfer_grid(const HarnessConfig& cfg, const std::string& out_dir,
                       std::size_t jobs) {
  RunLedger ledger(out_dir + "/ledger");
  PreparedDataset ds = prepare_dataset(cfg, 0);
  const double fraction = cfg.transfer_grid.fraction;

  const std::string pretrain_hash =
      run_pretrain_cell(cfg, ds, cfg.transfer_grid.source, 1.0, ledger);

  // First training run: 4 model types x 4 initial learning rates.
  struct FirstRun {
    TransferCellSpec spec;
    double lr1;
    std::string hash;
  };
  std::vector<FirstRun> first_runs;
  for (const TransferCellSpec& spec : kTransferCells)
    for (double lr1 : cfg.transfer_grid.learning_rates)
      first_runs.push_back({spec, lr1, ""});
  {
    std::vector<std::function<void()>> tasks;
    std::mutex m;
    for (FirstRun& fr : first_runs) {
      FirstRun* frp = &fr;
      tasks.push_back([&, frp] {
        TransferConfig t;
        t.scope = frp->spec.scope;
        t.policy = frp->spec.policy;
        t.lr_first = frp->lr1;
        const std::string h =
            run_finetune_cell(cfg, ds, pretrain_hash, fraction, t, std::nullopt,
                              cfg.seeds.finetune, ledger);
        std::lock_guard<std::mutex> lock(m);
        frp->hash = h;
      });
    }
    run_parallel(std::move(tasks), jobs);
  }
  // Second training run: each of the sixteen models again at each rate.
  struct SecondRun {
    const FirstRun* first;
    double lr2;
    std::string hash;
  };
  std::vector<SecondRun> second_runs;
  for (const FirstRun& fr : first_runs)
    for (double lr2 : cfg.transfer_grid.learning_rates)
      second_runs.push_back({&fr, lr2, ""});
  {
    std::vector<std::function<void()>> tasks;
    std::mutex m;
    for (SecondRun& sr : second_runs) {
      SecondRun* srp = &sr;
      tasks.push_back([&, srp] {
        const std::string h = run_second_run_cell(cfg, ds, srp->first->hash,
                                                  fraction, srp->lr2, ledger);
        std::lock_guard<std::mutex> lock(m);
        srp->hash = h;
      });
    }
    run_parallel(std::move(tasks), jobs);
  }

  // Box-plot rows (one per test item) plus the best-combination record.
  const std::string rep = reports_dir(out_dir);
  CsvWriter csv("dataset,label,scope,policy,lr_first,lr_second,item,dice");
  double best_mean = -1.0, best_first_mean = -1.0;
  json best, best_first;
  auto consider = [&](const std::string& label, const TransferCellSpec& spec,
                      double lr1, std::optional<double> lr2,
                      const std::string& hash, bool is_first_run) {
    const json rec = ledger.load_record(hash);
    const auto item_mean =
        rec.at("metrics").at("dice_per_item_mean").get<std::vector<double>>();
    for (std::size_t i = 0; i < item_mean.size(); ++i)
      csv.row({ds.name, label, scope_name(spec.scope), policy_name(spec.policy),
               fmt_double(lr1), lr2 ? fmt_double(*lr2) : "",
               std::to_string(i), fmt_double(item_mean[i])});
    const double mean = rec.at("metrics").at("dice_mean").get<double>();
    json desc = {{"label", label},
                 {"scope", scope_name(spec.scope)},
                 {"policy", policy_name(spec.policy)},
                 {"lr_first", lr1},
                 {"lr_second", lr2 ? json(*lr2) : json(nullptr)},
                 {"dice_mean", mean}};
    if (mean > best_mean) {
      best_mean = mean;
      best = desc;
    }
    if (is_first_run && mean > best_first_mean) {
      best_first_mean = mean;
      best_first = desc;
    }
  };
  for (const FirstRun& fr : first_runs)
    consider(fr.spec.label_prefix + "F", fr.spec, fr.lr1, std::nullopt, fr.hash,
             true);
  for (const SecondRun& sr : second_runs)
    consider(sr.first->spec.label_prefix + "S", sr.first->spec, sr.first->lr1,
             sr.lr2, sr.hash, false);
  csv.save(rep + "/transfer_grid.csv");

  // Prefer the single-run model unless a second run is clearly better; this
  // mirrors picking high performance at minimal training time.
  const bool first_good = best_first_mean >= best_mean - 0.01;
  json summary = {
      {"best_overall", best},
      {"best_first_run", best_first},
      {"recommended", first_good ? best_first : best},
      {"rule", "best first-run cell unless a second-run cell beats it by more than 0.01 mean Dice"},
  };
  write_file_atomic(rep + "/transfer_best.json", summary.dump(2) + "\n");
}

void cmd_extent_sweep(const HarnessConfig& cfg, const std::string& out_dir,
                      std::size_t jobs) {
  RunLedger ledger(out_dir + "/ledger");
  for (double m : cfg.extent.multipliers) {
    if (m < 1.0) {
      throw ConfigError("extent multiplier must be >= 1.0, got " + fmt_double(m));
    }
  }
  PreparedDataset ds = prepare_dataset(cfg, 0);

  std::map<double, std::string> pretrain_hashes;
  {
    std::vector<std::function<void()>> tasks;
    std::mutex mu;
    for (double m : cfg.extent.multipliers)
      tasks.push_back([&, m] {
        const std::string h =
            run_pretrain_cell(cfg, ds, cfg.extent.strategy, m, ledger);
        std::lock_guard<std::mutex> lock(mu);
        pretrain_hashes[m] = h;
      });
    run_parallel(std::move(tasks), jobs);
  }
  std::map<std::pair<double, double>, std::string> finetune_hashes;
  std::map<double, std::string> baseline_hashes;
  {
    std::vector<std::function<void()>> tasks;
    std::mutex mu;
    for (double m : cfg.extent.multipliers)
      for (double fraction : cfg.fractions)
        tasks.push_back([&, m, fraction] {
          const std::string h = run_finetune_cell(
              cfg, ds, pretrain_hashes.at(m), fraction, cfg.transfer,
              std::nullopt, cfg.seeds.finetune, ledger);
          std::lock_guard<std::mutex> lock(mu);
          finetune_hashes[{m, fraction}] = h;
        });
    for (double fraction : cfg.fractions)
      tasks.push_back([&, fraction] {
        const std::string h = run_supervised_cell(cfg, ds, fraction,
                                                  cfg.seeds.finetune, ledger);
        std::lock_guard<std::mutex> lock(mu);
        baseline_hashes[fraction] = h;
      });
    run_parallel(std::move(tasks), jobs);
  }

  const std::string rep = reports_dir(out_dir);
  CsvWriter csv("dataset,multiplier,fraction,mean_dice");
  // The 0x row is the shared supervised baseline.
  for (double fraction : cfg.fractions) {
    const json rec = ledger.load_record(baseline_hashes.at(fraction));
    csv.row({ds.name, "0", fmt_double(fraction),
             fmt_double(rec.at("metrics").at("dice_mean").get<double>())});
  }
  double best_avg = -1.0, chosen = cfg.extent.multipliers.front();
  for (double m : cfg.extent.multipliers) {
    double avg = 0.0;
    for (double fraction : cfg.fractions) {
      const json rec = ledger.load_record(finetune_hashes.at({m, fraction}));
      const double mean = rec.at("metrics").at("dice_mean").get<double>();
      csv.row({ds.name, fmt_double(m), fmt_double(fraction), fmt_double(mean)});
      avg += mean;
    }
    avg /= static_cast<double>(cfg.fractions.size());
    if (avg > best_avg) {
      best_avg = avg;
      chosen = m;
    }
  }
  csv.save(rep + "/extent.csv");
  json summary = {{"dataset", ds.name},
                  {"chosen_multiplier", chosen},
                  {"mean_dice_across_fractions", best_avg}};
  write_file_atomic(rep + "/extent.json", summary.dump(2) + "\n");
}

namespace {

struct ClinicalRow {
  double area_pe = 0.0, volume_pe = 0.0;
  std::optional<double> mi_pe;
  bool defined_area = false, defined_volume = false;
};

// Percent errors of the clinical metrics for one model on the test split.
// Returns [item][tissue] rows.
std::vector<std::vector<ClinicalRow>> clinical_errors(const UNet& model,
                                                      const PreparedDataset& ds) {
  const Tensor pred = binarize(model.run(ds.test.inputs));
  const std::size_t n = pred.dim(0), classes = pred.dim(3);
  const std::size_t pixels = pred.dim(1) * pred.dim(2);
  std::vector<std::vector<ClinicalRow>> rows(n, std::vector<ClinicalRow>(classes));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < classes; ++c) {
      Tensor pm({pixels}), gm({pixels});
      for (std::size_t px = 0; px < pixels; ++px) {
        pm[px] = pred[(i * pixels + px) * classes + c];
        gm[px] = ds.test.targets[(i * pixels + px) * classes + c];
      }
      Tensor raw({pixels});
      for (std::size_t px = 0; px < pixels; ++px)
        raw[px] = ds.test_raw[i * pixels + px];

      ClinicalRow& row = rows[i][c];
      const auto area_pe = percent_error(tissue_area(pm, 1.0), tissue_area(gm, 1.0));
      if (area_pe) {
        row.area_pe = *area_pe;
        row.defined_area = true;
      }
      const auto vol_pe =
          percent_error(tissue_volume(pm, 1.0), tissue_volume(gm, 1.0));
      if (vol_pe) {
        row.volume_pe = *vol_pe;
        row.defined_volume = true;
      }
      const auto mi_p = mean_intensity(raw, pm);
      const auto mi_g = mean_intensity(raw, gm);
      if (mi_p && mi_g) row.mi_pe = percent_error(*mi_p, *mi_g);
      rows[i][c] = row;
    }
  }
  return rows;
}

}  // namespace

void cmd_compare_clinical(const HarnessConfig& cfg, const std::string& out_dir,
                          std::size_t jobs, std::size_t directional_seeds) {
  RunLedger ledger(out_dir + "/ledger");
  PreparedDataset ds = prepare_dataset(cfg, 0);

  // The optimally trained models: the extent-sweep strategy pretrained with
  // the maximum configured multiplier.
  const double multiplier =
      *std::max_element(cfg.extent.multipliers.begin(), cfg.extent.multipliers.end());
  const std::string pretrain_hash =
      run_pretrain_cell(cfg, ds, cfg.extent.strategy, multiplier, ledger);

  std::map<double, std::string> ssl_hashes, sup_hashes;
  {
    std::vector<std::function<void()>> tasks;
    std::mutex mu;
    for (double fraction : cfg.fractions) {
      tasks.push_back([&, fraction] {
        const std::string h =
            run_finetune_cell(cfg, ds, pretrain_hash, fraction, cfg.transfer,
                              std::nullopt, cfg.seeds.finetune, ledger);
        std::lock_guard<std::mutex> lock(mu);
        ssl_hashes[fraction] = h;
      });
      tasks.push_back([&, fraction] {
        const std::string h = run_supervised_cell(cfg, ds, fraction,
                                                  cfg.seeds.finetune, ledger);
        std::lock_guard<std::mutex> lock(mu);
        sup_hashes[fraction] = h;
      });
    }
    run_parallel(std::move(tasks), jobs);
  }

  const std::string rep = reports_dir(out_dir);
  CsvWriter csv("dataset,arm,fraction,tissue,metric,median_pct_err,n_defined");
  CsvWriter metrics_csv(
      "run_id,dataset,label_fraction,class,dice,area_pct_err,volume_pct_err,"
      "mean_intensity_pct_err");
  const char* metric_names[3] = {"area", "volume", "mean_intensity"};
  for (double fraction : cfg.fractions) {
    for (const auto& [arm, hash] :
         {std::pair<std::string, std::string>{"ssl", ssl_hashes.at(fraction)},
          {"supervised", sup_hashes.at(fraction)}}) {
      const UNet model = load_checkpoint(ledger.dir_for(hash) + "/checkpoint");
      const auto rows = clinical_errors(model, ds);
      const json rec = ledger.load_record(hash);
      const auto class_dice =
          rec.at("metrics").at("dice_per_class_mean").get<std::vector<double>>();
      const std::size_t classes = rows.empty() ? 0 : rows[0].size();
      for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> collected[3];
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (rows[i][c].defined_area) collected[0].push_back(rows[i][c].area_pe);
          if (rows[i][c].defined_volume) collected[1].push_back(rows[i][c].volume_pe);
          if (rows[i][c].mi_pe) collected[2].push_back(*rows[i][c].mi_pe);
        }
        std::string med[3];
        for (int k = 0; k < 3; ++k) {
          csv.row({ds.name, arm, fmt_double(fraction), std::to_string(c),
                   metric_names[k],
                   collected[k].empty() ? "" : fmt_double(median(collected[k])),
                   std::to_string(collected[k].size())});
          med[k] = collected[k].empty() ? "" : fmt_double(median(collected[k]));
        }
        metrics_csv.row({hash.substr(0, 12), ds.name, fmt_double(fraction),
                         std::to_string(c), fmt_double(class_dice[c]), med[0],
                         med[1], med[2]});
      }
    }
  }
  csv.save(rep + "/clinical.csv");
  metrics_csv.save(rep + "/metrics.csv");

  if (directional_seeds > 0) {
    // Optimal-strategy SSL vs supervised at the smallest label fraction,
    // repeated across seeds (multiplier 1.0: the plain training set).
    const double fraction =
        *std::min_element(cfg.fractions.begin(), cfg.fractions.end());
    const std::string base_pretrain =
        run_pretrain_cell(cfg, ds, cfg.extent.strategy, 1.0, ledger);
    std::vector<double> ssl_means, sup_means;
    std::vector<std::function<void()>> tasks;
    std::mutex mu;
    ssl_means.resize(directional_seeds);
    sup_means.resize(directional_seeds);
    for (std::size_t s = 0; s < directional_seeds; ++s) {
      tasks.push_back([&, s] {
        const std::uint64_t seed = mix_seed(cfg.seeds.finetune, 0xD17Eu, s);
        const std::string fh = run_finetune_cell(
            cfg, ds, base_pretrain, fraction, cfg.transfer, std::nullopt, seed, ledger);
        const std::string sh = run_supervised_cell(cfg, ds, fraction, seed, ledger);
        const double fd =
            ledger.load_record(fh).at("metrics").at("dice_mean").get<double>();
        const double sd =
            ledger.load_record(sh).at("metrics").at("dice_mean").get<double>();
        std::lock_guard<std::mutex> lock(mu);
        ssl_means[s] = fd;
        sup_means[s] = sd;
      });
    }
    run_parallel(std::move(tasks), jobs);
    const double ssl_mean =
        std::accumulate(ssl_means.begin(), ssl_means.end(), 0.0) /
        static_cast<double>(directional_seeds);
    const double sup_mean =
        std::accumulate(sup_means.begin(), sup_means.end(), 0.0) /
        static_cast<double>(directional_seeds);
    const bool holds = ssl_mean >= sup_mean;
    json directional = {
        {"dataset", ds.name},
        {"fraction", fraction},
        {"strategy", strategy_to_json(cfg.extent.strategy)},
        {"transfer",
         {{"scope", scope_name(cfg.transfer.scope)},
          {"policy", policy_name(cfg.transfer.policy)},
          {"lr_first", cfg.transfer.lr_first}}},
        {"seeds", directional_seeds},
        {"ssl_mean_dice", ssl_mean},
        {"supervised_mean_dice", sup_mean},
        {"ssl_mean_per_seed", ssl_means},
        {"supervised_mean_per_seed", sup_means},
        {"direction_holds", holds},
        {"flag", holds ? "ssl >= supervised on phantom benchmark"
                       : "DIRECTION DOES NOT HOLD on phantom benchmark"},
    };
    write_file_atomic(rep + "/directional.json", directional.dump(2) + "\n");
  }
}

void cmd_stats(const HarnessConfig& cfg, const std::string& out_dir) {
  RunLedger ledger(out_dir + "/ledger");
  const std::vector<StrategyKey> grid = full_grid_for(cfg);

  // Fractions pooled into the paired test: everything below 100%.
  std::vector<double> pooled;
  for (double f : cfg.fractions)
    if (f < 1.0) pooled.push_back(f);

  std::vector<DatasetRankingInput> inputs;
  std::string missing;
  for (std::size_t di = 0; di < cfg.datasets.size(); ++di) {
    PreparedDataset ds = prepare_dataset(cfg, di);
    DatasetRankingInput in;
    in.dataset = ds.name;
    // Paired per (fraction, test item).
    for (double fraction : pooled) {
      json cell = {
          {"kind", "supervised"},
          {"dataset", dataset_cfg_json(cfg, ds)},
          {"fraction", fraction},
          {"unet", unet_cfg_json(cfg)},
          {"adam", adam_cfg_json(cfg)},
          {"stage", stage_to_json(cfg.segment)},
          {"seed", cfg.seeds.finetune},
      };
      const std::string h = config_hash(cell);
      if (!ledger.has(h)) {
        missing += (missing.empty() ? "" : ", ") + ds.name + ":supervised/" +
                   fmt_double(fraction);
        continue;
      }
      const auto items = ledger.load_record(h)
                             .at("metrics")
                             .at("dice_per_item_mean")
                             .get<std::vector<double>>();
      in.supervised.insert(in.supervised.end(), items.begin(), items.end());
    }
    for (const StrategyKey& key : grid) {
      json pre_cell = {
          {"kind", "pretrain"},
          {"dataset", dataset_cfg_json(cfg, ds)},
          {"strategy", strategy_to_json(key)},
          {"multiplier", 1.0},
          {"unet", unet_cfg_json(cfg)},
          {"adam", adam_cfg_json(cfg)},
          {"stage", stage_to_json(cfg.pretrain)},
          {"seeds", {{"pretrain", cfg.seeds.pretrain}, {"bank", cfg.seeds.bank}}},
      };
      const std::string ph = config_hash(pre_cell);
      std::vector<double> pooled_items;
      bool cell_missing = false;
      for (double fraction : pooled) {
        json ft_cell = {
            {"kind", "finetune"},
            {"dataset", dataset_cfg_json(cfg, ds)},
            {"pretrain", ph},
            {"fraction", fraction},
            {"transfer",
             {{"scope", scope_name(cfg.transfer.scope)},
              {"policy", policy_name(cfg.transfer.policy)},
              {"lr_first", cfg.transfer.lr_first},
              {"lr_second", json(nullptr)}}},
            {"unet", unet_cfg_json(cfg)},
            {"adam", adam_cfg_json(cfg)},
            {"stage", stage_to_json(cfg.segment)},
            {"seed", cfg.seeds.finetune},
        };
        const std::string fh = config_hash(ft_cell);
        if (!ledger.has(fh)) {
          cell_missing = true;
          continue;
        }
        const auto items = ledger.load_record(fh)
                               .at("metrics")
                               .at("dice_per_item_mean")
                               .get<std::vector<double>>();
        pooled_items.insert(pooled_items.end(), items.begin(), items.end());
      }
      if (cell_missing) {
        missing += (missing.empty() ? "" : ", ") + ds.name + ":" + key.label();
      } else {
        in.ssl[key] = std::move(pooled_items);
      }
    }
    inputs.push_back(std::move(in));
  }
  if (!missing.empty()) {
    throw IncompleteGridError("stats: incomplete grid, missing cells: " + missing);
  }

  RankingResult result = rank_strategies(inputs, grid);

  const std::string rep = reports_dir(out_dir);
  CsvWriter csv("dataset,rank,task,patch,sampler,p_value");
  json rankings = json::array();
  for (const DatasetRanking& dr : result.per_dataset) {
    json entries = json::array();
    for (std::size_t r = 0; r < dr.ranking.size(); ++r) {
      const StrategyPValue& s = dr.ranking[r];
      csv.row({dr.dataset, std::to_string(r + 1), task_name(s.key.task),
               std::to_string(s.key.patch), sampler_name(s.key.sampler),
               fmt_double(s.p)});
      entries.push_back({{"rank", r + 1},
                         {"task", task_name(s.key.task)},
                         {"patch", s.key.patch},
                         {"sampler", sampler_name(s.key.sampler)},
                         {"p_value", s.p}});
    }
    rankings.push_back({{"dataset", dr.dataset}, {"ranking", entries}});
  }
  csv.save(rep + "/ranking.csv");
  json stats = {
      {"rankings", rankings},
      {"optimal", result.optimal ? strategy_to_json(*result.optimal) : json(nullptr)},
      {"no_intersection", result.no_intersection},
  };
  write_file_atomic(rep + "/stats.json", stats.dump(2) + "\n");
}

void cmd_show_ledger(const std::string& out_dir, std::ostream& os) {
  RunLedger ledger(out_dir + "/ledger");
  for (const std::string& hash : ledger.all_hashes()) {
    const json rec = ledger.load_record(hash);
    const std::string kind = rec.at("kind").get<std::string>();
    std::string detail;
    const json& c = rec.at("config");
    if (kind == "pretrain") {
      detail = strategy_from_json(c.at("strategy")).label() + " x" +
               fmt_double(c.at("multiplier").get<double>()) + "  test_l2=" +
               fmt_double(rec.at("metrics").at("test_l2_mean").get<double>());
    } else if (kind == "finetune" || kind == "supervised" || kind == "second_run") {
      detail = "frac=" + fmt_double(c.at("fraction").get<double>()) + "  dice=" +
               fmt_double(rec.at("metrics").at("dice_mean").get<double>());
    }
    os << hash.substr(0, 12) << "  " << kind << "  "
       << c.at("dataset").at("name").get<std::string>() << "  " << detail << "\n";
  }
}

}  // namespace sslseg
