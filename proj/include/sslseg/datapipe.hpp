#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslseg/tensor.hpp"

namespace sslseg {

// ---------------------------------------------------------------------------
// Synthetic phantom generation

struct ClassIntensity {
  double mean = 0.0;
  double std = 1.0;
};

/// Each phantom holds four structures on a background: a bulky body ellipse,
/// a thin ring (the hard class), a core disc, and a small offset nodule.
/// Labels are exact; noise perturbs intensities only.
struct PhantomSpec {
  std::size_t image_size = 64;
  std::size_t n_images = 16;
  static constexpr std::size_t n_classes = 4;
  ClassIntensity background{-80.0, 8.0};
  // Order: body, ring, core, nodule.
  std::vector<ClassIntensity> classes{
      {40.0, 6.0}, {110.0, 8.0}, {190.0, 10.0}, {-30.0, 6.0}};
  double noise_std = 12.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PhantomDataset {
  PhantomSpec spec;
  Tensor images;  // N x S x S x 1, raw intensities + noise
  Tensor labels;  // N x S x S x 4, binary one-hot per class
  Tensor raw;     // N x S x S x 1, noiseless intensity map
};

PhantomDataset gen_phantom(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Preprocessing

enum class NormalizeMode { PerVolume, PerChannel };

/// Affine rescale to zero mean, unit std over the scope (the whole stack, or
/// each channel across the stack). Throws DegenerateInputError on zero
/// variance.
Tensor normalize(const Tensor& stack, NormalizeMode mode);

struct WindowLevel {
  double width = 400.0;
  double level = 50.0;
};

/// Linear map of [L-W/2, L+W/2] onto [0,1], clipped outside.
Tensor hu_window(const Tensor& raw, const WindowLevel& wl);

/// Applies each window to a single-channel stack and concatenates the
/// results channel-wise, in the given order.
Tensor hu_window_stack(const Tensor& raw, const std::vector<WindowLevel>& windows);

// ---------------------------------------------------------------------------
// Label-fraction splits

struct SplitSpec {
  std::vector<double> fractions{1.0, 0.5, 0.25, 0.10, 0.05};
  std::uint64_t seed = 0;
};

/// Nested subsets: |subset(f)| = ceil(f * n) and every smaller subset is
/// contained in every larger one. Requires at least 20 ids.
std::map<double, std::vector<std::size_t>> make_splits(
    const std::vector<std::size_t>& ids, const SplitSpec& spec);

// ---------------------------------------------------------------------------
// Dataset directory I/O: manifest.json + images.bin + labels.bin + raw.bin.
// Images and raw maps are little-endian float-64; labels are uint8. The
// manifest records the spec, seed, shapes and SHA-256 checksums; loads verify
// them and round-trips are bitwise exact.

void save_dataset(const PhantomDataset& ds, const std::string& dir);
PhantomDataset load_dataset(const std::string& dir);

}  // namespace sslseg
