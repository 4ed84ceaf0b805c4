#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sslseg/layers.hpp"
#include "sslseg/tape.hpp"
#include "sslseg/tensor.hpp"

namespace sslseg {

enum class Group { Encoder = 0, Decoder = 1, Post = 2 };
enum class Head { Inpaint, Segment };  // identity vs per-channel sigmoid
enum class TransferScope { EncoderOnly, EncoderAndDecoder };

const char* group_name(Group g);

struct UNetConfig {
  std::size_t depth = 3;         // levels including the bottleneck
  std::size_t base_filters = 8;  // channels at level 0, doubling per level
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t groups = 8;        // group-norm groups (capped per layer)
  Head head = Head::Inpaint;
  std::uint64_t seed = 0;

  bool arch_equal_ignoring_head(const UNetConfig& other) const {
    return depth == other.depth && base_filters == other.base_filters &&
           in_channels == other.in_channels && groups == other.groups;
  }
};

struct Param {
  std::string name;
  Group group;
  Tensor value;
};

/// U-Net with group-normalized, weight-standardized conv blocks. Weights are
/// partitioned into encoder / decoder / post-processing groups; the post
/// group is exactly the final 1x1 conv.
class UNet {
 public:
  static UNet build(const UNetConfig& config);

  const UNetConfig& config() const { return cfg_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params_mut() { return params_; }
  std::size_t param_count() const;

  bool frozen(Group g) const { return frozen_[static_cast<int>(g)]; }
  void set_frozen(Group g, bool frozen) { frozen_[static_cast<int>(g)] = frozen; }
  void set_frozen(TransferScope scope, bool frozen);

  /// Forward pass for training: registers every parameter on the tape and
  /// returns the output node. param_ids comes back aligned with params().
  ValueId forward(Tape& tape, ValueId input,
                  std::vector<ValueId>& param_ids) const;

  /// Inference on a batch (N x H x W x in_channels).
  Tensor run(const Tensor& batch) const;

  /// Re-initializes the post-processing layer for a new task; encoder and
  /// decoder weights are untouched.
  void swap_post_layer(std::size_t new_out_channels, Head head,
                       std::uint64_t seed);

  /// Copies the scoped groups from src bitwise. Validates the whole transfer
  /// before touching anything.
  void transfer_from(const UNet& src, TransferScope scope);

 private:
  UNetConfig cfg_;
  std::vector<Param> params_;
  std::array<bool, 3> frozen_{false, false, false};

  std::size_t find_param(const std::string& name) const;
  void validate_input(const Tensor& batch) const;
};

/// Group-norm group count for a layer: largest divisor of `channels` that is
/// <= min(requested, channels).
std::size_t norm_groups_for(std::size_t channels, std::size_t requested);

// Checkpoint I/O: <dir>/manifest.json + <dir>/weights.bin (little-endian
// float-64). Round-trips are bitwise exact.
void save_checkpoint(const UNet& model, const std::string& dir);
UNet load_checkpoint(const std::string& dir);

}  // namespace sslseg
