#include <cmath>

#include "doctest.h"
#include "sslseg/corruption.hpp"
#include "sslseg/datapipe.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/losses.hpp"
#include "sslseg/optim.hpp"
#include "sslseg/rng.hpp"
#include "sslseg/train.hpp"

using namespace sslseg;

namespace {

// Literal index-by-index transcriptions of the loss definitions, kept
// independent of the library implementation.
double l2_oracle(const Tensor& x, const Tensor& y) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  double total = 0.0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    double per_class = 0.0;
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi) {
          const double d = x.at4(ni, hi, wi, ci) - y.at4(ni, hi, wi, ci);
          per_class += d * d;
        }
    total += per_class / static_cast<double>(n);
  }
  return total / static_cast<double>(c);
}

double dice_oracle(const Tensor& x, const Tensor& y, double eps) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  double total = 0.0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    double inter = 0.0, uni = 0.0;
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi) {
          inter += x.at4(ni, hi, wi, ci) * y.at4(ni, hi, wi, ci);
          uni += x.at4(ni, hi, wi, ci) + y.at4(ni, hi, wi, ci);
        }
    total += 1.0 - (2.0 * inter + eps) / (uni + eps);
  }
  return total / static_cast<double>(c);
}

bool close_rel(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

UNetConfig tiny_cfg(std::uint64_t seed, std::size_t out, Head head) {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_filters = 4;
  cfg.in_channels = 1;
  cfg.out_channels = out;
  cfg.head = head;
  cfg.seed = seed;
  return cfg;
}

DataSplit tiny_segment_data(std::size_t n, std::uint64_t seed) {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.n_images = n;
  spec.seed = seed;
  PhantomDataset ds = gen_phantom(spec);
  DataSplit split;
  split.inputs = normalize(ds.images, NormalizeMode::PerVolume);
  split.targets = ds.labels;
  return split;
}

bool group_equal(const UNet& a, const UNet& b, Group g) {
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].group != g) continue;
    const Tensor& pa = a.params()[i].value;
    const Tensor& pb = b.params()[i].value;
    for (std::size_t j = 0; j < pa.size(); ++j)
      if (pa[j] != pb[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("l2 loss: trivial cases and the naive-loop oracle") {
  Tensor x({2, 4, 4, 3});
  Rng rng(1);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  CHECK(l2_loss(x, x) == 0.0);

  // N=C=1, difference of ones on 2x2 sums to 4.
  Tensor a({1, 2, 2, 1}, 1.0), b({1, 2, 2, 1}, 0.0);
  CHECK(l2_loss(a, b) == doctest::Approx(4.0));

  Tensor y({2, 4, 4, 3});
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = rng.normal();
  CHECK(close_rel(l2_loss(x, y), l2_oracle(x, y), 1e-12));

  // 100 random shapes.
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(3), h = 1 + rng.below(6),
                      w = 1 + rng.below(6), c = 1 + rng.below(4);
    Tensor p({n, h, w, c}), q({n, h, w, c});
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = 3.0 * rng.normal();
      q[i] = 3.0 * rng.normal();
    }
    CHECK(close_rel(l2_loss(p, q), l2_oracle(p, q), 1e-12));
  }

  CHECK_THROWS_AS(l2_loss(a, x), ShapeError);
}

TEST_CASE("dice loss: trivial cases, epsilon rescue, oracle, domain errors") {
  // Perfect binary prediction: 1 - (2S+eps)/(2S+eps) = 0.
  Tensor y({1, 4, 4, 2});
  Rng rng(2);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = rng.below(2) ? 1.0 : 0.0;
  CHECK(dice_loss(y, y) == doctest::Approx(0.0));

  // Disjoint foregrounds: loss about 1.
  Tensor p({1, 4, 4, 1}, 0.0), g({1, 4, 4, 1}, 0.0);
  p[0] = 1.0;
  p[1] = 1.0;
  g[2] = 1.0;
  g[3] = 1.0;
  CHECK(dice_loss(p, g) > 0.9999);

  // Both empty: epsilon rescues to zero loss.
  Tensor zero({1, 4, 4, 1}, 0.0);
  CHECK(dice_loss(zero, zero) == doctest::Approx(0.0));

  // Oracle on random soft predictions, 100 shapes.
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(3), h = 1 + rng.below(6),
                      w = 1 + rng.below(6), c = 1 + rng.below(4);
    Tensor x({n, h, w, c}), t({n, h, w, c});
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = rng.uniform();
      t[i] = rng.below(2) ? 1.0 : 0.0;
    }
    CHECK(close_rel(dice_loss(x, t), dice_oracle(x, t, kDiceEps), 1e-12));
  }

  Tensor bad({1, 4, 4, 1}, 1.5);
  CHECK_THROWS_AS(dice_loss(bad, zero), NumericError);
  Tensor nonbinary({1, 4, 4, 1}, 0.5);
  CHECK_THROWS_AS(dice_loss(zero, nonbinary), NumericError);
}

TEST_CASE("dice loss gradient matches finite differences") {
  Rng rng(3);
  Tensor x({2, 3, 3, 2}), y({2, 3, 3, 2});
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = 0.1 + 0.8 * rng.uniform();  // away from the [0,1] boundary
    y[i] = rng.below(2) ? 1.0 : 0.0;
  }
  Tape tape;
  ValueId xid = tape.leaf(x);
  tape.backward(tape.dice_loss(xid, y, kDiceEps));
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor up = x, down = x;
    up[i] += h;
    down[i] -= h;
    const double fd = (dice_loss(up, y) - dice_loss(down, y)) / (2.0 * h);
    const double an = tape.grad(xid)[i];
    CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8}) < 1e-4);
  }
}

TEST_CASE("adam single-step oracle and zero-grad behavior") {
  UNet model = UNet::build(tiny_cfg(4, 1, Head::Inpaint));
  AdamConfig cfg;
  cfg.lr0 = 1e-2;
  Adam adam(model, cfg);
  UNet before = model;

  std::vector<Tensor> grads;
  for (const Param& p : model.params()) grads.emplace_back(p.value.shape(), 0.5);
  adam.step(model, grads, 1e-2);
  CHECK(adam.t() == 1);

  // Step 1 with constant gradient g: delta = -lr * g / (|g| + eps).
  const double expected_delta = -1e-2 * 0.5 / (0.5 + cfg.eps);
  const Tensor& p0 = model.params()[0].value;
  const Tensor& q0 = before.params()[0].value;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    CHECK(p0[i] - q0[i] == doctest::Approx(expected_delta).epsilon(1e-9));
    // And that is -lr * sign(g) up to eps.
    CHECK(std::abs((p0[i] - q0[i]) + 1e-2) < 1e-6);
  }

  // Zero gradient on fresh state: parameters unchanged, t still advances.
  UNet m2 = UNet::build(tiny_cfg(4, 1, Head::Inpaint));
  Adam adam2(m2, cfg);
  UNet m2_before = m2;
  for (Tensor& g : grads) g.fill(0.0);
  adam2.step(m2, grads, 1e-2);
  CHECK(adam2.t() == 1);
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    CHECK(group_equal(m2, m2_before, g));
}

TEST_CASE("lr schedule decays by 0.9 every 2 epochs") {
  LRSchedule s{1e-3, 0.9, 2};
  CHECK(s.lr(0) == doctest::Approx(1e-3));
  CHECK(s.lr(1) == doctest::Approx(1e-3));
  CHECK(s.lr(2) == doctest::Approx(0.9e-3));
  CHECK(s.lr(3) == doctest::Approx(0.9e-3));
  CHECK(s.lr(4) == doctest::Approx(0.81e-3));
}

TEST_CASE("early stopping fires after patience non-improving epochs") {
  EarlyStopper stopper(EarlyStopRule{0.2, 10});
  std::size_t stopped_at = 0;
  for (std::size_t epoch = 1; epoch <= 50; ++epoch) {
    const double val = 10.0 - 0.01 * static_cast<double>(epoch - 1);
    if (stopper.update(val)) {
      stopped_at = epoch;
      break;
    }
  }
  CHECK(stopped_at == 11);

  // Qualifying improvements reset the counter.
  EarlyStopper s2(EarlyStopRule{0.5, 3});
  CHECK_FALSE(s2.update(10.0));
  CHECK_FALSE(s2.update(9.0));   // improved by 1.0
  CHECK_FALSE(s2.update(8.9));   // stale 1
  CHECK_FALSE(s2.update(8.8));   // stale 2
  CHECK(s2.update(8.85));        // stale 3 -> stop
}

TEST_CASE("training is deterministic and respects freezing") {
  DataSplit data = tiny_segment_data(6, 5);
  TrainOptions opts;
  opts.batch_size = 3;
  opts.max_epochs = 2;
  opts.schedule = {1e-3, 0.9, 2};
  opts.stop_rule = {1e-3, 10};
  opts.seed = 7;

  UNet a = UNet::build(tiny_cfg(9, 4, Head::Segment));
  UNet b = UNet::build(tiny_cfg(9, 4, Head::Segment));
  TrainHistory ha = train(a, data, data, RegimeKind::Segment, nullptr, opts);
  TrainHistory hb = train(b, data, data, RegimeKind::Segment, nullptr, opts);
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    CHECK(group_equal(a, b, g));
  REQUIRE(ha.epochs.size() == hb.epochs.size());
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    CHECK(ha.epochs[e].train_loss == hb.epochs[e].train_loss);
    CHECK(ha.epochs[e].val_loss == hb.epochs[e].val_loss);
  }

  // Frozen encoder stays bitwise constant; unfreezing lets it move.
  UNet c = UNet::build(tiny_cfg(10, 4, Head::Segment));
  UNet c0 = c;
  c.set_frozen(Group::Encoder, true);
  train(c, data, data, RegimeKind::Segment, nullptr, opts);
  CHECK(group_equal(c, c0, Group::Encoder));
  CHECK_FALSE(group_equal(c, c0, Group::Decoder));

  c.set_frozen(Group::Encoder, false);
  UNet c1 = c;
  TrainOptions one = opts;
  one.max_epochs = 1;
  train(c, data, data, RegimeKind::Segment, nullptr, one);
  CHECK_FALSE(group_equal(c, c1, Group::Encoder));
}

TEST_CASE("freezing every group pins the loss to the data order") {
  DataSplit data = tiny_segment_data(4, 6);
  TrainOptions opts;
  opts.batch_size = 4;  // single fixed batch per epoch
  opts.max_epochs = 3;
  opts.schedule = {1e-3, 1.0, 2};
  opts.seed = 3;
  UNet model = UNet::build(tiny_cfg(11, 4, Head::Segment));
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    model.set_frozen(g, true);
  TrainHistory h = train(model, data, data, RegimeKind::Segment, nullptr, opts);
  REQUIRE(h.epochs.size() == 3);
  // Constant up to the data order: the shuffled batch changes only the
  // floating-point accumulation order.
  CHECK(h.epochs[0].train_loss ==
        doctest::Approx(h.epochs[1].train_loss).epsilon(1e-12));
  CHECK(h.epochs[1].train_loss ==
        doctest::Approx(h.epochs[2].train_loss).epsilon(1e-12));
  // Validation sees a fixed order, so it is bitwise constant.
  CHECK(h.epochs[0].val_loss == h.epochs[1].val_loss);
  CHECK(h.epochs[1].val_loss == h.epochs[2].val_loss);
}

TEST_CASE("inpainting regime: corruption on inputs only, loss decreases") {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.n_images = 6;
  spec.seed = 8;
  PhantomDataset ds = gen_phantom(spec);
  DataSplit data;
  data.inputs = normalize(ds.images, NormalizeMode::PerVolume);

  PatchSpec patch{8, 32, 32, SamplerKind::Random};
  MaskBank bank = make_bank(patch, PretextTask::ContextPrediction, 12, 10);

  UNet model = UNet::build(tiny_cfg(13, 1, Head::Inpaint));
  TrainOptions opts;
  opts.batch_size = 3;
  opts.max_epochs = 8;
  opts.schedule = {1e-3, 0.9, 2};
  opts.stop_rule = {1e-6, 50};
  opts.seed = 2;
  TrainHistory h = train(model, data, data, RegimeKind::Inpaint, &bank, opts);
  REQUIRE(h.epochs.size() >= 2);
  CHECK(h.epochs.back().val_loss < h.epochs.front().val_loss);

  CHECK_THROWS_AS(train(model, data, data, RegimeKind::Inpaint, nullptr, opts),
                  ConfigError);
}

TEST_CASE("finetune transfers at step zero and honors freeze-then-finetune") {
  UNetConfig pre_cfg = tiny_cfg(20, 1, Head::Inpaint);
  UNet pretrained = UNet::build(pre_cfg);

  DataSplit data = tiny_segment_data(4, 9);
  TrainOptions opts;
  opts.batch_size = 2;
  opts.max_epochs = 0;  // no steps: observe the transfer itself
  TransferStrategy strategy;
  strategy.scope = TransferScope::EncoderOnly;
  strategy.policy = FinetunePolicy::FinetuneImmediately;
  strategy.lr_first = 1e-3;

  FinetuneResult r = finetune(pretrained, strategy, data, data, 4, opts, 33);
  CHECK(group_equal(r.model, pretrained, Group::Encoder));
  CHECK(r.model.config().out_channels == 4);

  // Freeze-then-finetune: phase 1 leaves the encoder at the pretrained
  // weights, phase 2 moves it.
  opts.max_epochs = 2;
  strategy.policy = FinetunePolicy::FreezeThenFinetune;
  // Phase 1 replica: transferred, frozen, trained.
  UNetConfig seg_cfg = pre_cfg;
  seg_cfg.out_channels = 4;
  seg_cfg.head = Head::Segment;
  seg_cfg.seed = 33;
  UNet phase1 = UNet::build(seg_cfg);
  phase1.transfer_from(pretrained, TransferScope::EncoderOnly);
  phase1.set_frozen(TransferScope::EncoderOnly, true);
  train(phase1, data, data, RegimeKind::Segment, nullptr, opts);
  CHECK(group_equal(phase1, pretrained, Group::Encoder));

  FinetuneResult full = finetune(pretrained, strategy, data, data, 4, opts, 33);
  CHECK(full.histories.size() == 2);
  CHECK_FALSE(group_equal(full.model, pretrained, Group::Encoder));
  CHECK_FALSE(full.model.frozen(Group::Encoder));

  // lr_second adds one more full run.
  strategy.policy = FinetunePolicy::FinetuneImmediately;
  strategy.lr_second = 1e-4;
  FinetuneResult twice = finetune(pretrained, strategy, data, data, 4, opts, 33);
  CHECK(twice.histories.size() == 2);
}

TEST_CASE("empty training data is rejected") {
  UNet model = UNet::build(tiny_cfg(1, 4, Head::Segment));
  DataSplit empty;
  TrainOptions opts;
  CHECK_THROWS_AS(train(model, empty, empty, RegimeKind::Segment, nullptr, opts),
                  ConfigError);
}
