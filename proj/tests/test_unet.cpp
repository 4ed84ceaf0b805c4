#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "sslseg/errors.hpp"
#include "sslseg/rng.hpp"
#include "sslseg/unet.hpp"

using namespace sslseg;

namespace {

UNetConfig small_cfg() {
  UNetConfig cfg;
  cfg.depth = 2;
  cfg.base_filters = 4;
  cfg.in_channels = 1;
  cfg.out_channels = 1;
  cfg.groups = 8;
  cfg.head = Head::Inpaint;
  cfg.seed = 5;
  return cfg;
}

bool params_equal(const UNet& a, const UNet& b, Group only) {
  for (const Param& pa : a.params()) {
    if (pa.group != only) continue;
    bool matched = false;
    for (const Param& pb : b.params()) {
      if (pb.name != pa.name) continue;
      matched = true;
      if (!pa.value.same_shape(pb.value)) return false;
      for (std::size_t i = 0; i < pa.value.size(); ++i)
        if (pa.value[i] != pb.value[i]) return false;
    }
    if (!matched) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("parameter count matches the closed-form layer list") {
  UNet model = UNet::build(small_cfg());
  // depth 2, base 4, in 1, out 1. Conv blocks carry w, b, gamma, beta.
  auto block = [](std::size_t in, std::size_t out) {
    return 3 * 3 * in * out + out + out + out;
  };
  const std::size_t expected = block(1, 4) + block(4, 4) +    // enc0
                               block(4, 8) + block(8, 8) +    // enc1 (bottleneck)
                               block(8, 4) +                  // dec0 up
                               block(8, 4) + block(4, 4) +    // dec0 convs
                               1 * 1 * 4 * 1 + 1;             // post
  CHECK(model.param_count() == expected);
}

TEST_CASE("build is deterministic per seed") {
  UNet a = UNet::build(small_cfg());
  UNet b = UNet::build(small_cfg());
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    CHECK(params_equal(a, b, g));

  UNetConfig other = small_cfg();
  other.seed = 6;
  UNet c = UNet::build(other);
  CHECK_FALSE(params_equal(a, c, Group::Encoder));
}

TEST_CASE("He init variance approximates 2/fan_in") {
  Rng rng(3);
  Tensor w = he_conv_kernel(3, 64, 64, rng);
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mean += w[i];
  mean /= static_cast<double>(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(w.size());
  const double target = 2.0 / (3.0 * 3.0 * 64.0);
  CHECK(var > 0.8 * target);
  CHECK(var < 1.2 * target);
}

TEST_CASE("weight groups partition all parameters") {
  for (std::size_t depth : {2u, 3u, 4u}) {
    UNetConfig cfg = small_cfg();
    cfg.depth = depth;
    UNet model = UNet::build(cfg);
    std::set<std::string> names;
    std::size_t by_group[3] = {0, 0, 0};
    for (const Param& p : model.params()) {
      CHECK(names.insert(p.name).second);  // no duplicates
      by_group[static_cast<int>(p.group)] += p.value.size();
    }
    CHECK(by_group[0] + by_group[1] + by_group[2] == model.param_count());
    CHECK(by_group[0] > 0);
    CHECK(by_group[1] > 0);
    CHECK(by_group[2] > 0);
  }
}

TEST_CASE("run preserves spatial dims and honors the head") {
  UNetConfig cfg = small_cfg();
  cfg.depth = 3;
  cfg.base_filters = 4;
  cfg.out_channels = 4;
  cfg.head = Head::Segment;
  UNet model = UNet::build(cfg);

  Rng rng(1);
  Tensor batch({1, 16, 16, 1});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.normal();
  Tensor out = model.run(batch);
  CHECK(out.shape() == std::vector<std::size_t>{1, 16, 16, 4});
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i] > 0.0);
    CHECK(out[i] < 1.0);
  }

  // Inpainting head: channels in == channels out, no activation squashing.
  UNetConfig ct = cfg;
  ct.in_channels = 3;
  ct.out_channels = 3;
  ct.head = Head::Inpaint;
  UNet inpaint = UNet::build(ct);
  Tensor ct_batch({1, 16, 16, 3});
  for (std::size_t i = 0; i < ct_batch.size(); ++i) ct_batch[i] = rng.normal();
  CHECK(inpaint.run(ct_batch).shape() == std::vector<std::size_t>{1, 16, 16, 3});

  // Channel mismatch is a shape error.
  CHECK_THROWS_AS(inpaint.run(batch), ShapeError);
  // H, W not divisible by 2^(depth-1).
  Tensor odd({1, 10, 10, 1});
  CHECK_THROWS_AS(model.run(odd), ShapeError);
}

TEST_CASE("zero weights with segmentation head give 0.5 everywhere") {
  UNetConfig cfg = small_cfg();
  cfg.out_channels = 4;
  cfg.head = Head::Segment;
  UNet model = UNet::build(cfg);
  for (Param& p : model.params_mut()) p.value.fill(0.0);
  // Keep gammas at zero too: normalized zeros scaled by zero stay zero.
  Tensor batch({1, 8, 8, 1}, 0.25);
  Tensor out = model.run(batch);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(out[i] == doctest::Approx(0.5));
}

TEST_CASE("swap_post_layer reinitializes only the post group") {
  UNet model = UNet::build(small_cfg());
  UNet before = model;
  model.swap_post_layer(4, Head::Segment, 11);
  CHECK(params_equal(model, before, Group::Encoder));
  CHECK(params_equal(model, before, Group::Decoder));
  CHECK(model.config().out_channels == 4);

  Tensor batch({1, 8, 8, 1}, 0.5);
  CHECK(model.run(batch).dim(3) == 4);

  // Same swap seed, same post weights.
  UNet again = UNet::build(small_cfg());
  again.swap_post_layer(4, Head::Segment, 11);
  CHECK(params_equal(model, again, Group::Post));

  CHECK_THROWS_AS(model.swap_post_layer(0, Head::Segment, 1), ConfigError);
}

TEST_CASE("transfer copies scoped groups bitwise and nothing else") {
  UNetConfig src_cfg = small_cfg();
  src_cfg.seed = 21;
  UNet src = UNet::build(src_cfg);

  UNetConfig dst_cfg = small_cfg();
  dst_cfg.seed = 22;
  dst_cfg.out_channels = 4;
  dst_cfg.head = Head::Segment;

  UNet enc_only = UNet::build(dst_cfg);
  UNet enc_only_orig = enc_only;
  enc_only.transfer_from(src, TransferScope::EncoderOnly);
  CHECK(params_equal(enc_only, src, Group::Encoder));
  CHECK(params_equal(enc_only, enc_only_orig, Group::Decoder));
  CHECK(params_equal(enc_only, enc_only_orig, Group::Post));

  UNet both = UNet::build(dst_cfg);
  UNet both_orig = both;
  both.transfer_from(src, TransferScope::EncoderAndDecoder);
  CHECK(params_equal(both, src, Group::Encoder));
  CHECK(params_equal(both, src, Group::Decoder));
  CHECK(params_equal(both, both_orig, Group::Post));

  // EncoderOnly then EncoderAndDecoder equals EncoderAndDecoder directly.
  UNet staged = UNet::build(dst_cfg);
  staged.transfer_from(src, TransferScope::EncoderOnly);
  staged.transfer_from(src, TransferScope::EncoderAndDecoder);
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    CHECK(params_equal(staged, both, g));
}

TEST_CASE("transfer between mismatched architectures fails atomically") {
  UNet src = UNet::build(small_cfg());
  UNetConfig deep = small_cfg();
  deep.depth = 3;
  UNet dst = UNet::build(deep);
  UNet dst_orig = dst;
  CHECK_THROWS_AS(dst.transfer_from(src, TransferScope::EncoderAndDecoder),
                  IncompatibleError);
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    CHECK(params_equal(dst, dst_orig, g));

  // Deeper source must not silently transfer a prefix.
  UNet shallow = UNet::build(small_cfg());
  UNet deep_src = UNet::build(deep);
  CHECK_THROWS_AS(shallow.transfer_from(deep_src, TransferScope::EncoderAndDecoder),
                  IncompatibleError);
}

TEST_CASE("no NaN in outputs across 100 random seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_filters = 2;
    cfg.in_channels = 1;
    cfg.out_channels = 2;
    cfg.groups = 8;
    cfg.head = Head::Segment;
    cfg.seed = seed;
    UNet model = UNet::build(cfg);
    Rng rng(mix_seed(seed, 123));
    Tensor batch({1, 8, 8, 1});
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = 3.0 * rng.normal();
    CHECK(model.run(batch).all_finite());
  }
}

TEST_CASE("checkpoint round-trip is bitwise exact") {
  const std::string dir = "ckpt_test_dir";
  UNetConfig cfg = small_cfg();
  cfg.out_channels = 4;
  cfg.head = Head::Segment;
  UNet model = UNet::build(cfg);
  model.set_frozen(Group::Encoder, true);
  save_checkpoint(model, dir);
  UNet loaded = load_checkpoint(dir);
  for (Group g : {Group::Encoder, Group::Decoder, Group::Post})
    CHECK(params_equal(model, loaded, g));
  CHECK(loaded.config().out_channels == 4);
  CHECK(loaded.config().head == Head::Segment);
  CHECK(loaded.frozen(Group::Encoder));
  CHECK_FALSE(loaded.frozen(Group::Decoder));
  std::filesystem::remove_all(dir);
}

TEST_CASE("norm group selection divides channel counts") {
  CHECK(norm_groups_for(8, 8) == 8);
  CHECK(norm_groups_for(16, 8) == 8);
  CHECK(norm_groups_for(4, 8) == 4);
  CHECK(norm_groups_for(6, 8) == 6);
  CHECK(norm_groups_for(12, 8) == 6);
  CHECK(norm_groups_for(7, 8) == 7);
}
