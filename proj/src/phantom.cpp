#include <cmath>
#include <string>

#include "sslseg/datapipe.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/rng.hpp"

namespace sslseg {

namespace {

// Relative geometry of the four structures. The ring is deliberately thin so
// one class stays hard to segment.
constexpr double kBodyRxLo = 0.36, kBodyRxHi = 0.42;
constexpr double kBodyRyLo = 0.34, kBodyRyHi = 0.40;
constexpr double kRingOuterLo = 0.24, kRingOuterHi = 0.28;
constexpr double kRingThickLo = 0.045, kRingThickHi = 0.06;
constexpr double kCoreLo = 0.10, kCoreHi = 0.14;
constexpr double kNoduleLo = 0.035, kNoduleHi = 0.05;
constexpr double kNoduleRadialPos = 0.78;  // fraction of the body radius

}  // namespace

void PhantomSpec::validate() const {
  if (image_size < 32) {
    throw ConfigError("phantom: image_size must be >= 32 so every class keeps "
                      "at least one pixel");
  }
  if (n_images < 1) throw ConfigError("phantom: n_images must be >= 1");
  if (classes.size() != n_classes) {
    throw ConfigError("phantom: expected " + std::to_string(n_classes) +
                      " class intensity models");
  }
  if (noise_std < 0.0 || background.std < 0.0) {
    throw ConfigError("phantom: negative std");
  }
  for (const ClassIntensity& c : classes) {
    if (c.std < 0.0) throw ConfigError("phantom: negative std");
  }
}

PhantomDataset gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t s = spec.image_size;
  const double sd = static_cast<double>(s);

  PhantomDataset ds;
  ds.spec = spec;
  ds.images = Tensor({spec.n_images, s, s, 1});
  ds.labels = Tensor({spec.n_images, s, s, PhantomSpec::n_classes});
  ds.raw = Tensor({spec.n_images, s, s, 1});

  for (std::size_t img = 0; img < spec.n_images; ++img) {
    Rng rng(mix_seed(spec.seed, 0xFA47u, img));

    const double cx = sd / 2.0 + rng.uniform(-0.03, 0.03) * sd;
    const double cy = sd / 2.0 + rng.uniform(-0.03, 0.03) * sd;
    const double body_rx = rng.uniform(kBodyRxLo, kBodyRxHi) * sd;
    const double body_ry = rng.uniform(kBodyRyLo, kBodyRyHi) * sd;
    const double ring_outer = rng.uniform(kRingOuterLo, kRingOuterHi) * sd;
    const double ring_inner = ring_outer - rng.uniform(kRingThickLo, kRingThickHi) * sd;
    const double core_r = rng.uniform(kCoreLo, kCoreHi) * sd;
    const double nodule_r = rng.uniform(kNoduleLo, kNoduleHi) * sd;
    const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);

    // Place the nodule at a fixed fraction of the body radius along theta so
    // it stays inside the body for every sampled shape.
    const double er = body_rx * body_ry /
                      std::sqrt(body_ry * body_ry * std::cos(theta) * std::cos(theta) +
                                body_rx * body_rx * std::sin(theta) * std::sin(theta));
    const double nx = cx + kNoduleRadialPos * er * std::cos(theta);
    const double ny = cy + kNoduleRadialPos * er * std::sin(theta);

    const double v_bg = rng.normal(spec.background.mean, spec.background.std);
    double v_class[PhantomSpec::n_classes];
    for (std::size_t k = 0; k < PhantomSpec::n_classes; ++k)
      v_class[k] = rng.normal(spec.classes[k].mean, spec.classes[k].std);

    std::size_t class_pixels[PhantomSpec::n_classes] = {0, 0, 0, 0};
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) {
        const double y = static_cast<double>(r) + 0.5;
        const double x = static_cast<double>(c) + 0.5;
        const double dx = x - cx, dy = y - cy;
        const double rho = std::sqrt(dx * dx + dy * dy);
        const double body_q = (dx / body_rx) * (dx / body_rx) +
                              (dy / body_ry) * (dy / body_ry);
        const double ndx = x - nx, ndy = y - ny;

        int owner = -1;  // -1 background, else class index
        if (body_q <= 1.0) owner = 0;
        if (rho < ring_outer && rho >= ring_inner) owner = 1;
        if (rho < core_r) owner = 2;
        if (ndx * ndx + ndy * ndy <= nodule_r * nodule_r) owner = 3;

        const double value = owner < 0 ? v_bg : v_class[owner];
        ds.raw.at4(img, r, c, 0) = value;
        ds.images.at4(img, r, c, 0) = value + rng.normal(0.0, spec.noise_std);
        if (owner >= 0) {
          ds.labels.at4(img, r, c, static_cast<std::size_t>(owner)) = 1.0;
          ++class_pixels[owner];
        }
      }
    }
    for (std::size_t k = 0; k < PhantomSpec::n_classes; ++k) {
      if (class_pixels[k] == 0) {
        throw NumericError("phantom: class " + std::to_string(k) +
                           " has no pixels in image " + std::to_string(img));
      }
    }
  }
  return ds;
}

}  // namespace sslseg
