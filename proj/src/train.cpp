#include "sslseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "sslseg/errors.hpp"
#include "sslseg/io_util.hpp"
#include "sslseg/rng.hpp"

namespace sslseg {

namespace {

Tensor gather_rows(const Tensor& data, const std::vector<std::size_t>& idx) {
  const std::size_t row = data.size() / data.dim(0);
  Tensor out({idx.size(), data.dim(1), data.dim(2), data.dim(3)});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double* src = data.data().data() + idx[i] * row;
    double* dst = out.data().data() + i * row;
    std::copy(src, src + row, dst);
  }
  return out;
}

std::size_t effective_batch(std::size_t requested, std::size_t dataset) {
  if (requested != 0) return std::min(requested, dataset);
  return dataset < 9 ? std::min<std::size_t>(4, dataset) : 9;
}

struct StepResult {
  double loss;
  std::vector<Tensor> grads;
};

StepResult training_step(const UNet& model, const Tensor& inputs,
                         const Tensor& targets, RegimeKind regime,
                         const TrainOptions& opts) {
  Tape tape;
  std::vector<ValueId> param_ids;
  ValueId out = model.forward(tape, tape.leaf(inputs), param_ids);
  ValueId loss = regime == RegimeKind::Inpaint
                     ? tape.l2_loss(out, targets)
                     : tape.dice_loss(out, targets, opts.dice.epsilon);
  const double loss_value = tape.value(loss).item();
  tape.backward(loss);
  StepResult res;
  res.loss = loss_value;
  res.grads.reserve(param_ids.size());
  for (ValueId id : param_ids) res.grads.push_back(tape.grad(id));
  return res;
}

double eval_loss(const UNet& model, const Tensor& inputs, const Tensor& targets,
                 RegimeKind regime, const TrainOptions& opts) {
  Tensor out = model.run(inputs);
  return regime == RegimeKind::Inpaint ? l2_loss(out, targets)
                                       : dice_loss(out, targets, opts.dice);
}

// Corrupts image i of a stack with its fixed validation-stream mask.
Tensor corrupt_with_stream(const MaskBank& bank, const Tensor& stack,
                           std::uint64_t stream_base) {
  Tensor out = stack;
  const std::size_t row = stack.size() / stack.dim(0);
  for (std::size_t i = 0; i < stack.dim(0); ++i) {
    Tensor one({1, stack.dim(1), stack.dim(2), stack.dim(3)});
    std::copy(stack.data().data() + i * row, stack.data().data() + (i + 1) * row,
              one.data().data());
    Tensor corrupted = apply_mask_batch(draw_mask(bank, stream_base + i), one);
    std::copy(corrupted.data().data(), corrupted.data().data() + row,
              out.data().data() + i * row);
  }
  return out;
}

}  // namespace

TrainHistory train(UNet& model, const DataSplit& train_data,
                   const DataSplit& val_data, RegimeKind regime,
                   const MaskBank* bank, const TrainOptions& opts) {
  if (train_data.inputs.empty() || train_data.inputs.dim(0) == 0) {
    throw ConfigError("train: empty training data");
  }
  if (regime == RegimeKind::Inpaint && bank == nullptr) {
    throw ConfigError("train: inpainting regime needs a mask bank");
  }
  const std::size_t n = train_data.inputs.dim(0);
  const std::size_t batch = effective_batch(opts.batch_size, n);

  Adam adam(model, opts.adam);
  EarlyStopper stopper(opts.stop_rule);
  TrainHistory history;

  // Fixed validation tensors; inpainting corrupts them once with the held-out
  // mask stream.
  Tensor val_inputs, val_targets;
  const bool has_val = !val_data.inputs.empty() && val_data.inputs.dim(0) > 0;
  if (has_val) {
    if (regime == RegimeKind::Inpaint) {
      val_targets = val_data.inputs;
      val_inputs = corrupt_with_stream(*bank, val_data.inputs, kValMaskStream);
    } else {
      val_inputs = val_data.inputs;
      val_targets = val_data.targets;
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t iteration = 0;

  for (std::size_t epoch = 0; epoch < opts.max_epochs; ++epoch) {
    const double lr = opts.schedule.lr(epoch);
    Rng shuffle_rng(mix_seed(opts.seed, 0xE90Cu, epoch));
    shuffle_rng.shuffle(order);

    double train_loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(start + batch, n);
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + stop);
      Tensor inputs = gather_rows(train_data.inputs, idx);
      Tensor targets;
      if (regime == RegimeKind::Inpaint) {
        targets = inputs;
        inputs = apply_mask_batch(draw_mask(*bank, iteration), inputs);
      } else {
        targets = gather_rows(train_data.targets, idx);
      }
      StepResult res = training_step(model, inputs, targets, regime, opts);
      if (!std::isfinite(res.loss)) {
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + ", iteration " +
                           std::to_string(iteration));
      }
      adam.step(model, res.grads, lr);
      train_loss_sum += res.loss;
      ++steps;
      ++iteration;
    }

    const double train_loss = train_loss_sum / static_cast<double>(steps);
    const double val_loss =
        has_val ? eval_loss(model, val_inputs, val_targets, regime, opts)
                : train_loss;
    history.epochs.push_back({epoch, train_loss, val_loss, lr});
    if (stopper.update(val_loss)) {
      history.early_stopped = true;
      break;
    }
  }
  return history;
}

FinetuneResult finetune(const UNet& pretrained, const TransferStrategy& strategy,
                        const DataSplit& train_data, const DataSplit& val_data,
                        std::size_t out_channels, const TrainOptions& base_opts,
                        std::uint64_t model_seed) {
  UNetConfig cfg = pretrained.config();
  cfg.out_channels = out_channels;
  cfg.head = Head::Segment;
  cfg.seed = model_seed;
  FinetuneResult result{UNet::build(cfg), {}};
  result.model.transfer_from(pretrained, strategy.scope);

  auto run_once = [&](double lr0) {
    TrainOptions opts = base_opts;
    opts.schedule.lr0 = lr0;
    result.histories.push_back(train(result.model, train_data, val_data,
                                     RegimeKind::Segment, nullptr, opts));
  };

  if (strategy.policy == FinetunePolicy::FreezeThenFinetune) {
    result.model.set_frozen(strategy.scope, true);
    run_once(strategy.lr_first);
    result.model.set_frozen(strategy.scope, false);
    run_once(strategy.lr_first);
  } else {
    run_once(strategy.lr_first);
  }
  if (strategy.lr_second.has_value()) {
    run_once(*strategy.lr_second);
  }
  return result;
}

void write_history_csv(const std::vector<TrainHistory>& histories,
                       const std::string& path) {
  std::ostringstream os;
  os << "run,epoch,train_loss,val_loss,lr\n";
  char buf[64];
  for (std::size_t r = 0; r < histories.size(); ++r) {
    for (const EpochStats& e : histories[r].epochs) {
      os << r << "," << e.epoch;
      std::snprintf(buf, sizeof buf, ",%.17g", e.train_loss);
      os << buf;
      std::snprintf(buf, sizeof buf, ",%.17g", e.val_loss);
      os << buf;
      std::snprintf(buf, sizeof buf, ",%.17g", e.lr);
      os << buf << "\n";
    }
  }
  write_file_atomic(path, os.str());
}

}  // namespace sslseg
