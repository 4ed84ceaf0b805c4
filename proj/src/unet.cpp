#include "sslseg/unet.hpp"

#include <algorithm>

#include "sslseg/errors.hpp"
#include "sslseg/rng.hpp"

namespace sslseg {

const char* group_name(Group g) {
  switch (g) {
    case Group::Encoder: return "encoder";
    case Group::Decoder: return "decoder";
    case Group::Post: return "post";
  }
  return "?";
}

std::size_t norm_groups_for(std::size_t channels, std::size_t requested) {
  std::size_t g = std::min(requested, channels);
  while (g > 1 && channels % g != 0) --g;
  return g;
}

namespace {

void validate_config(const UNetConfig& cfg) {
  if (cfg.depth < 2) throw ConfigError("unet: depth must be >= 2");
  if (cfg.base_filters < 1) throw ConfigError("unet: base_filters must be >= 1");
  if (cfg.in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
  if (cfg.out_channels < 1) throw ConfigError("unet: out_channels must be >= 1");
}

void push_conv_block(std::vector<Param>& params, const std::string& prefix,
                     Group group, std::size_t k, std::size_t in_ch,
                     std::size_t out_ch, Rng& rng) {
  params.push_back({prefix + ".w", group, he_conv_kernel(k, in_ch, out_ch, rng)});
  params.push_back({prefix + ".b", group, Tensor({out_ch}, 0.0)});
  params.push_back({prefix + ".gn.g", group, Tensor({out_ch}, 1.0)});
  params.push_back({prefix + ".gn.b", group, Tensor({out_ch}, 0.0)});
}

Tensor he_post_kernel(std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  return he_conv_kernel(1, in_ch, out_ch, rng);
}

}  // namespace

UNet UNet::build(const UNetConfig& config) {
  validate_config(config);
  UNet model;
  model.cfg_ = config;
  Rng rng(mix_seed(config.seed, 0x5E7A11u));

  const std::size_t depth = config.depth;
  auto ch = [&](std::size_t level) { return config.base_filters << level; };

  // Encoder, bottleneck included as the deepest level.
  for (std::size_t i = 0; i < depth; ++i) {
    const std::size_t in_ch = i == 0 ? config.in_channels : ch(i - 1);
    const std::string lv = "enc" + std::to_string(i);
    push_conv_block(model.params_, lv + ".c0", Group::Encoder, 3, in_ch, ch(i), rng);
    push_conv_block(model.params_, lv + ".c1", Group::Encoder, 3, ch(i), ch(i), rng);
  }
  // Decoder, deepest level first.
  for (std::size_t i = depth - 1; i-- > 0;) {
    const std::string lv = "dec" + std::to_string(i);
    push_conv_block(model.params_, lv + ".up", Group::Decoder, 3, ch(i + 1), ch(i), rng);
    push_conv_block(model.params_, lv + ".c0", Group::Decoder, 3, 2 * ch(i), ch(i), rng);
    push_conv_block(model.params_, lv + ".c1", Group::Decoder, 3, ch(i), ch(i), rng);
  }
  model.params_.push_back(
      {"post.w", Group::Post, he_post_kernel(ch(0), config.out_channels, rng)});
  model.params_.push_back({"post.b", Group::Post, Tensor({config.out_channels}, 0.0)});
  return model;
}

std::size_t UNet::param_count() const {
  std::size_t n = 0;
  for (const Param& p : params_) n += p.value.size();
  return n;
}

void UNet::set_frozen(TransferScope scope, bool frozen) {
  set_frozen(Group::Encoder, frozen);
  if (scope == TransferScope::EncoderAndDecoder) set_frozen(Group::Decoder, frozen);
}

std::size_t UNet::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw IncompatibleError("unet: missing parameter " + name);
}

void UNet::validate_input(const Tensor& batch) const {
  if (batch.rank() != 4) {
    throw ShapeError("unet: input must be N x H x W x C, got " +
                     shape_to_string(batch.shape()));
  }
  if (batch.dim(3) != cfg_.in_channels) {
    throw ShapeError("unet: input has " + std::to_string(batch.dim(3)) +
                     " channels, model expects " + std::to_string(cfg_.in_channels));
  }
  const std::size_t div = std::size_t(1) << (cfg_.depth - 1);
  if (batch.dim(1) % div != 0 || batch.dim(2) % div != 0) {
    throw ShapeError("unet: H and W must be divisible by " + std::to_string(div) +
                     " for depth " + std::to_string(cfg_.depth) + ", got " +
                     shape_to_string(batch.shape()));
  }
}

ValueId UNet::forward(Tape& tape, ValueId input,
                      std::vector<ValueId>& param_ids) const {
  validate_input(tape.value(input));
  param_ids.clear();
  param_ids.reserve(params_.size());
  for (const Param& p : params_) param_ids.push_back(tape.leaf(p.value));

  std::size_t cursor = 0;
  auto conv_block = [&](ValueId x, std::size_t channels, bool pre_upsample) {
    const ValueId w = param_ids[cursor++], b = param_ids[cursor++];
    const ValueId gn_g = param_ids[cursor++], gn_b = param_ids[cursor++];
    ValueId h = pre_upsample ? tape.upsample_nearest2x(x) : x;
    h = tape.conv2d(h, tape.weight_standardize(w, kWeightStdEps), b, 1);
    h = tape.group_norm(h, gn_g, gn_b, norm_groups_for(channels, cfg_.groups),
                        kGroupNormEps);
    return tape.relu(h);
  };

  const std::size_t depth = cfg_.depth;
  auto ch = [&](std::size_t level) { return cfg_.base_filters << level; };

  std::vector<ValueId> skips;
  ValueId x = input;
  for (std::size_t i = 0; i < depth; ++i) {
    x = conv_block(x, ch(i), false);
    x = conv_block(x, ch(i), false);
    if (i + 1 < depth) {
      skips.push_back(x);
      x = tape.max_pool2x2(x);
    }
  }
  for (std::size_t i = depth - 1; i-- > 0;) {
    x = conv_block(x, ch(i), true);  // nearest x2 + conv
    x = tape.concat_channels(x, skips[i]);
    x = conv_block(x, ch(i), false);
    x = conv_block(x, ch(i), false);
  }
  // Post-processing: plain 1x1 conv, no normalization.
  const ValueId pw = param_ids[cursor++], pb = param_ids[cursor++];
  x = tape.conv2d(x, pw, pb, 1);
  if (cfg_.head == Head::Segment) x = tape.sigmoid(x);
  return x;
}

Tensor UNet::run(const Tensor& batch) const {
  Tape tape;
  std::vector<ValueId> param_ids;
  ValueId out = forward(tape, tape.leaf(batch), param_ids);
  return tape.value(out);
}

void UNet::swap_post_layer(std::size_t new_out_channels, Head head,
                           std::uint64_t seed) {
  if (new_out_channels < 1) throw ConfigError("swap_post_layer: out_channels must be >= 1");
  Rng rng(mix_seed(seed, 0x9057u));
  const std::size_t in_ch = cfg_.base_filters;
  params_[find_param("post.w")].value = he_post_kernel(in_ch, new_out_channels, rng);
  params_[find_param("post.b")].value = Tensor({new_out_channels}, 0.0);
  cfg_.out_channels = new_out_channels;
  cfg_.head = head;
}

void UNet::transfer_from(const UNet& src, TransferScope scope) {
  auto in_scope = [scope](const Param& p) {
    if (p.group == Group::Post) return false;
    if (p.group == Group::Decoder && scope == TransferScope::EncoderOnly)
      return false;
    return true;
  };
  if (cfg_.groups != src.cfg_.groups) {
    throw IncompatibleError("transfer: group-norm group counts differ");
  }
  // Validate the whole transfer before touching anything, naming the first
  // mismatched parameter.
  std::vector<std::pair<std::size_t, std::size_t>> plan;  // dst idx, src idx
  for (std::size_t di = 0; di < params_.size(); ++di) {
    const Param& dst = params_[di];
    if (!in_scope(dst)) continue;
    const std::size_t si = src.find_param(dst.name);
    if (!src.params_[si].value.same_shape(dst.value)) {
      throw IncompatibleError("transfer: shape mismatch for " + dst.name + ": " +
                              shape_to_string(dst.value.shape()) + " vs " +
                              shape_to_string(src.params_[si].value.shape()));
    }
    plan.emplace_back(di, si);
  }
  // A deeper source would otherwise silently transfer only a prefix.
  for (const Param& sp : src.params_) {
    if (!in_scope(sp)) continue;
    bool found = false;
    for (const Param& dp : params_)
      if (dp.name == sp.name) { found = true; break; }
    if (!found) {
      throw IncompatibleError("transfer: source parameter " + sp.name +
                              " has no destination");
    }
  }
  for (auto [di, si] : plan) params_[di].value = src.params_[si].value;
}

}  // namespace sslseg
