#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sslseg/tensor.hpp"

namespace sslseg {

enum class SamplerKind { Random, PoissonDisc };
enum class PretextTask { ContextPrediction, ContextRestoration };

const char* sampler_name(SamplerKind s);
const char* task_name(PretextTask t);

struct PatchSpec {
  std::size_t patch = 16;  // K, side length in pixels
  std::size_t height = 64;
  std::size_t width = 64;
  SamplerKind sampler = SamplerKind::Random;

  void validate() const;
  /// Minimum number of corrupted pixels: ceil(H*W/4).
  std::size_t coverage_target() const { return (height * width + 3) / 4; }
};

/// Binary zero-out mask for context prediction. `capped` marks masks whose
/// sampler saturated below the coverage target.
struct PredictionMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bitmap;  // H*W row-major, 1 = corrupted
  bool capped = false;

  std::size_t coverage() const;
};

struct PatchPair {
  std::size_t r1, c1, r2, c2;  // top-left corners of the swapped patches
  bool operator==(const PatchPair&) const = default;
};

/// Ordered patch-swap list for context restoration. All patches across all
/// pairs are pairwise disjoint, so the swaps commute and applying the mask
/// twice restores the original image.
struct RestorationMask {
  std::size_t height = 0, width = 0, patch = 0;
  std::vector<PatchPair> pairs;
  bool capped = false;

  std::size_t coverage() const { return pairs.size() * 2 * patch * patch; }
};

using Mask = std::variant<PredictionMask, RestorationMask>;

std::size_t mask_coverage(const Mask& m);
bool mask_capped(const Mask& m);

/// Top-left patch corners (row, col).
using PatchList = std::vector<std::pair<std::size_t, std::size_t>>;

/// Dart-throwing Poisson-disc sampling: patch centers at least K*sqrt(2)
/// apart (checked exactly in integer arithmetic), stopping at `max_patches`
/// or after 10,000 consecutive rejections. max_patches of 0 derives the
/// count from the coverage target.
PatchList sample_poisson_disc(const PatchSpec& spec, std::uint64_t seed,
                              std::size_t max_patches = 0);

/// `count` i.i.d. uniform patch positions; overlaps allowed.
PatchList sample_random(const PatchSpec& spec, std::uint64_t seed,
                        std::size_t count);

/// Uniform positions with overlapping candidates rejected and resampled,
/// capped at 10,000 consecutive rejections.
PatchList sample_random_disjoint(const PatchSpec& spec, std::uint64_t seed,
                                 std::size_t max_patches);

PredictionMask build_prediction_mask(const PatchSpec& spec, std::uint64_t seed);
RestorationMask build_restoration_mask(const PatchSpec& spec, std::uint64_t seed);
Mask build_mask(const PatchSpec& spec, PretextTask task, std::uint64_t seed);

/// Applies a mask to an H x W x C image: zero-out for prediction, in-order
/// patch swaps for restoration; all channels are corrupted identically.
Tensor apply_mask(const Mask& mask, const Tensor& image);

/// Applies one mask to every image of an N x H x W x C batch.
Tensor apply_mask_batch(const Mask& mask, const Tensor& batch);

/// Quarter-turn counter-clockwise rotations; requires a square mask.
Mask rotate_mask(const Mask& mask, unsigned quarter_turns);

/// Precomputed bank of `count` base masks; draws expand it by the four
/// right-angle rotations (4 * count effective variants).
struct MaskBank {
  PatchSpec spec;
  PretextTask task;
  std::uint64_t bank_seed = 0;
  std::vector<Mask> base;

  std::size_t effective_size() const { return 4 * base.size(); }
};

MaskBank make_bank(const PatchSpec& spec, PretextTask task,
                   std::uint64_t bank_seed, std::size_t count = 100);

/// Variant index chosen at an iteration: (base mask, quarter turns).
/// A pure function of (bank_seed, iteration), uniform over the variants.
std::pair<std::size_t, unsigned> draw_index(const MaskBank& bank,
                                            std::uint64_t iteration);

/// Uniform draw over the 4*count variants; a pure function of
/// (bank_seed, iteration).
Mask draw_mask(const MaskBank& bank, std::uint64_t iteration);

// Bank file I/O: <dir>/manifest.json + <dir>/bank.bin. Layout per mask,
// little-endian: prediction = u32 capped + ceil(H*W/8) bitmap bytes
// (row-major, LSB first); restoration = u32 capped + u32 n_pairs +
// n_pairs * (4 x u32). Round-trips are bitwise exact.
void save_bank(const MaskBank& bank, const std::string& dir);
MaskBank load_bank(const std::string& dir);

}  // namespace sslseg
