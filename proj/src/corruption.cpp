#include "sslseg/corruption.hpp"

#include <algorithm>

#include "json.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/io_util.hpp"
#include "sslseg/rng.hpp"

namespace sslseg {

namespace {

constexpr std::size_t kRejectionCap = 10000;

using Pos = std::pair<std::size_t, std::size_t>;

bool patches_overlap(const Pos& a, const Pos& b, std::size_t k) {
  const auto near = [k](std::size_t x, std::size_t y) {
    return x > y ? x - y < k : y - x < k;
  };
  return near(a.first, b.first) && near(a.second, b.second);
}

}  // namespace

const char* sampler_name(SamplerKind s) {
  return s == SamplerKind::Random ? "random" : "poisson";
}

const char* task_name(PretextTask t) {
  return t == PretextTask::ContextPrediction ? "prediction" : "restoration";
}

void PatchSpec::validate() const {
  if (patch == 0) throw ConfigError("patch spec: K must be positive");
  if (patch > std::min(height, width)) {
    throw ConfigError("patch spec: K=" + std::to_string(patch) +
                      " exceeds image side min(" + std::to_string(height) +
                      "," + std::to_string(width) + ")");
  }
}

std::size_t PredictionMask::coverage() const {
  std::size_t n = 0;
  for (std::uint8_t b : bitmap) n += b;
  return n;
}

std::size_t mask_coverage(const Mask& m) {
  return std::visit([](const auto& v) { return v.coverage(); }, m);
}

bool mask_capped(const Mask& m) {
  return std::visit([](const auto& v) { return v.capped; }, m);
}

PatchList sample_poisson_disc(const PatchSpec& spec, std::uint64_t seed,
                              std::size_t max_patches) {
  spec.validate();
  const std::size_t k = spec.patch;
  if (max_patches == 0) {
    max_patches = (spec.coverage_target() + k * k - 1) / (k * k);
  }
  const std::size_t rows = spec.height - k + 1;
  const std::size_t cols = spec.width - k + 1;
  // Patch-center distances equal corner distances; the K*sqrt(2) constraint
  // is dr*dr + dc*dc >= 2*K*K, exactly, in integers.
  const std::size_t min_sq = 2 * k * k;

  // Grid accelerator with cell size K: the spacing bound leaves at most one
  // accepted corner per cell, and conflicts lie within two cells.
  const std::size_t gr = (rows + k - 1) / k, gc = (cols + k - 1) / k;
  std::vector<std::int64_t> grid(gr * gc, -1);

  Rng rng(mix_seed(seed, 0x50D1u));
  PatchList accepted;
  std::size_t rejections = 0;
  while (accepted.size() < max_patches && rejections < kRejectionCap) {
    const std::size_t r = rng.below(rows);
    const std::size_t c = rng.below(cols);
    const std::size_t cr = r / k, cc = c / k;
    bool ok = true;
    for (std::size_t ar = cr >= 2 ? cr - 2 : 0; ok && ar <= std::min(cr + 2, gr - 1); ++ar) {
      for (std::size_t ac = cc >= 2 ? cc - 2 : 0; ac <= std::min(cc + 2, gc - 1); ++ac) {
        const std::int64_t idx = grid[ar * gc + ac];
        if (idx < 0) continue;
        const auto& p = accepted[static_cast<std::size_t>(idx)];
        const std::int64_t dr = static_cast<std::int64_t>(p.first) - static_cast<std::int64_t>(r);
        const std::int64_t dc = static_cast<std::int64_t>(p.second) - static_cast<std::int64_t>(c);
        if (static_cast<std::size_t>(dr * dr + dc * dc) < min_sq) {
          ok = false;
          break;
        }
      }
    }
    if (ok) {
      grid[cr * gc + cc] = static_cast<std::int64_t>(accepted.size());
      accepted.emplace_back(r, c);
      rejections = 0;
    } else {
      ++rejections;
    }
  }
  return accepted;
}

PatchList sample_random(const PatchSpec& spec, std::uint64_t seed,
                        std::size_t count) {
  spec.validate();
  const std::size_t rows = spec.height - spec.patch + 1;
  const std::size_t cols = spec.width - spec.patch + 1;
  Rng rng(mix_seed(seed, 0xA4D0u));
  PatchList out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.emplace_back(rng.below(rows), rng.below(cols));
  return out;
}

PatchList sample_random_disjoint(const PatchSpec& spec, std::uint64_t seed,
                                 std::size_t max_patches) {
  spec.validate();
  const std::size_t rows = spec.height - spec.patch + 1;
  const std::size_t cols = spec.width - spec.patch + 1;
  Rng rng(mix_seed(seed, 0xA4D1u));
  PatchList accepted;
  std::size_t rejections = 0;
  while (accepted.size() < max_patches && rejections < kRejectionCap) {
    const Pos cand{rng.below(rows), rng.below(cols)};
    bool ok = true;
    for (const Pos& p : accepted) {
      if (patches_overlap(cand, p, spec.patch)) {
        ok = false;
        break;
      }
    }
    if (ok) {
      accepted.push_back(cand);
      rejections = 0;
    } else {
      ++rejections;
    }
  }
  return accepted;
}

PredictionMask build_prediction_mask(const PatchSpec& spec, std::uint64_t seed) {
  spec.validate();
  PredictionMask mask;
  mask.height = spec.height;
  mask.width = spec.width;
  mask.bitmap.assign(spec.height * spec.width, 0);
  const std::size_t target = spec.coverage_target();
  const std::size_t k = spec.patch;

  auto stamp = [&](const Pos& p) {
    for (std::size_t dr = 0; dr < k; ++dr)
      for (std::size_t dc = 0; dc < k; ++dc)
        mask.bitmap[(p.first + dr) * spec.width + (p.second + dc)] = 1;
  };

  if (spec.sampler == SamplerKind::PoissonDisc) {
    for (const Pos& p : sample_poisson_disc(spec, seed)) stamp(p);
  } else {
    // Overlaps allowed; coverage counts the union. Keep drawing until the
    // union reaches the target (always reachable for the random sampler).
    Rng rng(mix_seed(seed, 0xA4D0u));
    const std::size_t rows = spec.height - k + 1;
    const std::size_t cols = spec.width - k + 1;
    std::size_t covered = 0;
    std::size_t draws = 0;
    const std::size_t draw_cap = 64 * (target / (k * k) + 1) + kRejectionCap;
    while (covered < target && draws < draw_cap) {
      const Pos p{rng.below(rows), rng.below(cols)};
      for (std::size_t dr = 0; dr < k; ++dr)
        for (std::size_t dc = 0; dc < k; ++dc) {
          std::uint8_t& bit =
              mask.bitmap[(p.first + dr) * spec.width + (p.second + dc)];
          covered += 1 - bit;
          bit = 1;
        }
      ++draws;
    }
  }
  mask.capped = mask.coverage() < target;
  return mask;
}

RestorationMask build_restoration_mask(const PatchSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t k = spec.patch;
  const std::size_t target = spec.coverage_target();
  const std::size_t pairs_needed = (target + 2 * k * k - 1) / (2 * k * k);
  const std::size_t patches_needed = 2 * pairs_needed;

  PatchList patches = spec.sampler == SamplerKind::PoissonDisc
                          ? sample_poisson_disc(spec, seed, patches_needed)
                          : sample_random_disjoint(spec, seed, patches_needed);

  RestorationMask mask;
  mask.height = spec.height;
  mask.width = spec.width;
  mask.patch = k;
  for (std::size_t i = 0; i + 1 < patches.size(); i += 2) {
    mask.pairs.push_back({patches[i].first, patches[i].second,
                          patches[i + 1].first, patches[i + 1].second});
  }
  mask.capped = mask.coverage() < target;
  return mask;
}

Mask build_mask(const PatchSpec& spec, PretextTask task, std::uint64_t seed) {
  if (task == PretextTask::ContextPrediction)
    return build_prediction_mask(spec, seed);
  return build_restoration_mask(spec, seed);
}

namespace {

void require_mask_dims(std::size_t mh, std::size_t mw, const Tensor& image,
                       std::size_t h_axis) {
  if (image.dim(h_axis) != mh || image.dim(h_axis + 1) != mw) {
    throw ShapeError("apply_mask: mask " + std::to_string(mh) + "x" +
                     std::to_string(mw) + " does not match image " +
                     shape_to_string(image.shape()));
  }
}

void apply_to_image(const Mask& mask, Tensor& img, std::size_t n,
                    std::size_t h, std::size_t w, std::size_t c) {
  if (const auto* pm = std::get_if<PredictionMask>(&mask)) {
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t col = 0; col < w; ++col) {
        if (!pm->bitmap[r * w + col]) continue;
        for (std::size_t ch = 0; ch < c; ++ch) img.at4(n, r, col, ch) = 0.0;
      }
  } else {
    const auto& rm = std::get<RestorationMask>(mask);
    const std::size_t k = rm.patch;
    for (const PatchPair& p : rm.pairs)
      for (std::size_t dr = 0; dr < k; ++dr)
        for (std::size_t dc = 0; dc < k; ++dc)
          for (std::size_t ch = 0; ch < c; ++ch)
            std::swap(img.at4(n, p.r1 + dr, p.c1 + dc, ch),
                      img.at4(n, p.r2 + dr, p.c2 + dc, ch));
  }
}

std::pair<std::size_t, std::size_t> mask_dims(const Mask& m) {
  return std::visit(
      [](const auto& v) { return std::pair<std::size_t, std::size_t>{v.height, v.width}; },
      m);
}

}  // namespace

Tensor apply_mask(const Mask& mask, const Tensor& image) {
  if (image.rank() != 3) {
    throw ShapeError("apply_mask: image must be H x W x C, got " +
                     shape_to_string(image.shape()));
  }
  const auto [mh, mw] = mask_dims(mask);
  if (image.dim(0) != mh || image.dim(1) != mw) {
    throw ShapeError("apply_mask: mask " + std::to_string(mh) + "x" +
                     std::to_string(mw) + " does not match image " +
                     shape_to_string(image.shape()));
  }
  Tensor out = Tensor::from_data({1, image.dim(0), image.dim(1), image.dim(2)},
                                 std::vector<double>(image.data().begin(),
                                                     image.data().end()));
  apply_to_image(mask, out, 0, image.dim(0), image.dim(1), image.dim(2));
  return Tensor::from_data(
      {image.dim(0), image.dim(1), image.dim(2)},
      std::vector<double>(out.data().begin(), out.data().end()));
}

Tensor apply_mask_batch(const Mask& mask, const Tensor& batch) {
  if (batch.rank() != 4) {
    throw ShapeError("apply_mask_batch: batch must be N x H x W x C");
  }
  const auto [mh, mw] = mask_dims(mask);
  require_mask_dims(mh, mw, batch, 1);
  Tensor out = batch;
  for (std::size_t n = 0; n < batch.dim(0); ++n)
    apply_to_image(mask, out, n, batch.dim(1), batch.dim(2), batch.dim(3));
  return out;
}

Mask rotate_mask(const Mask& mask, unsigned quarter_turns) {
  quarter_turns %= 4;
  if (quarter_turns == 0) return mask;
  const auto [h, w] = mask_dims(mask);
  if (h != w) {
    throw ConfigError("rotate_mask: quarter-turn rotation requires square masks");
  }
  const std::size_t s = h;
  Mask cur = mask;
  for (unsigned t = 0; t < quarter_turns; ++t) {
    if (auto* pm = std::get_if<PredictionMask>(&cur)) {
      PredictionMask rot = *pm;
      // Counter-clockwise: rot[i][j] = src[j][S-1-i].
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j)
          rot.bitmap[i * s + j] = pm->bitmap[j * s + (s - 1 - i)];
      cur = std::move(rot);
    } else {
      auto& rm = std::get<RestorationMask>(cur);
      RestorationMask rot = rm;
      const std::size_t k = rm.patch;
      // Top-left (r, c) of a K x K patch maps to (S-K-c, r).
      for (PatchPair& p : rot.pairs) {
        p = {s - k - p.c1, p.r1, s - k - p.c2, p.r2};
      }
      cur = std::move(rot);
    }
  }
  return cur;
}

MaskBank make_bank(const PatchSpec& spec, PretextTask task,
                   std::uint64_t bank_seed, std::size_t count) {
  spec.validate();
  if (spec.height != spec.width) {
    throw ConfigError("make_bank: rotations require square images");
  }
  MaskBank bank;
  bank.spec = spec;
  bank.task = task;
  bank.bank_seed = bank_seed;
  bank.base.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    bank.base.push_back(build_mask(spec, task, mix_seed(bank_seed, 0xBA5Eu, i)));
  return bank;
}

std::pair<std::size_t, unsigned> draw_index(const MaskBank& bank,
                                            std::uint64_t iteration) {
  Rng rng(mix_seed(bank.bank_seed, 0xD4A3u, iteration));
  const std::size_t idx = rng.below(bank.effective_size());
  return {idx / 4, static_cast<unsigned>(idx % 4)};
}

Mask draw_mask(const MaskBank& bank, std::uint64_t iteration) {
  const auto [base, turns] = draw_index(bank, iteration);
  return rotate_mask(bank.base[base], turns);
}

void save_bank(const MaskBank& bank, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint8_t> blob;
  for (const Mask& m : bank.base) {
    if (const auto* pm = std::get_if<PredictionMask>(&m)) {
      append_u32_le(blob, pm->capped ? 1 : 0);
      const std::size_t nbits = pm->bitmap.size();
      std::vector<std::uint8_t> packed((nbits + 7) / 8, 0);
      for (std::size_t i = 0; i < nbits; ++i)
        if (pm->bitmap[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
      blob.insert(blob.end(), packed.begin(), packed.end());
    } else {
      const auto& rm = std::get<RestorationMask>(m);
      append_u32_le(blob, rm.capped ? 1 : 0);
      append_u32_le(blob, static_cast<std::uint32_t>(rm.pairs.size()));
      for (const PatchPair& p : rm.pairs) {
        append_u32_le(blob, static_cast<std::uint32_t>(p.r1));
        append_u32_le(blob, static_cast<std::uint32_t>(p.c1));
        append_u32_le(blob, static_cast<std::uint32_t>(p.r2));
        append_u32_le(blob, static_cast<std::uint32_t>(p.c2));
      }
    }
  }
  nlohmann::json manifest = {
      {"task", task_name(bank.task)},
      {"sampler", sampler_name(bank.spec.sampler)},
      {"patch", bank.spec.patch},
      {"height", bank.spec.height},
      {"width", bank.spec.width},
      {"seed", bank.bank_seed},
      {"count", bank.base.size()},
  };
  write_file_atomic(dir + "/bank.bin", blob);
  write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

MaskBank load_bank(const std::string& dir) {
  const nlohmann::json manifest =
      nlohmann::json::parse(read_text_file(dir + "/manifest.json"));
  const std::vector<std::uint8_t> blob = read_binary_file(dir + "/bank.bin");

  MaskBank bank;
  const std::string task = manifest.at("task").get<std::string>();
  bank.task = task == "prediction" ? PretextTask::ContextPrediction
                                   : PretextTask::ContextRestoration;
  const std::string sampler = manifest.at("sampler").get<std::string>();
  bank.spec.sampler =
      sampler == "random" ? SamplerKind::Random : SamplerKind::PoissonDisc;
  bank.spec.patch = manifest.at("patch").get<std::size_t>();
  bank.spec.height = manifest.at("height").get<std::size_t>();
  bank.spec.width = manifest.at("width").get<std::size_t>();
  bank.bank_seed = manifest.at("seed").get<std::uint64_t>();
  const std::size_t count = manifest.at("count").get<std::size_t>();

  std::size_t off = 0;
  auto need = [&](std::size_t n) {
    if (off + n > blob.size()) throw ChecksumError("bank.bin truncated");
  };
  for (std::size_t i = 0; i < count; ++i) {
    if (bank.task == PretextTask::ContextPrediction) {
      PredictionMask pm;
      pm.height = bank.spec.height;
      pm.width = bank.spec.width;
      need(4);
      pm.capped = read_u32_le(blob.data() + off) != 0;
      off += 4;
      const std::size_t nbits = pm.height * pm.width;
      const std::size_t nbytes = (nbits + 7) / 8;
      need(nbytes);
      pm.bitmap.assign(nbits, 0);
      for (std::size_t b = 0; b < nbits; ++b)
        pm.bitmap[b] = (blob[off + b / 8] >> (b % 8)) & 1u;
      off += nbytes;
      bank.base.emplace_back(std::move(pm));
    } else {
      RestorationMask rm;
      rm.height = bank.spec.height;
      rm.width = bank.spec.width;
      rm.patch = bank.spec.patch;
      need(8);
      rm.capped = read_u32_le(blob.data() + off) != 0;
      const std::size_t npairs = read_u32_le(blob.data() + off + 4);
      off += 8;
      need(16 * npairs);
      for (std::size_t p = 0; p < npairs; ++p) {
        rm.pairs.push_back({read_u32_le(blob.data() + off),
                            read_u32_le(blob.data() + off + 4),
                            read_u32_le(blob.data() + off + 8),
                            read_u32_le(blob.data() + off + 12)});
        off += 16;
      }
      bank.base.emplace_back(std::move(rm));
    }
  }
  return bank;
}

}  // namespace sslseg
