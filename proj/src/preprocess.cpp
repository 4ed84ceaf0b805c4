#include <algorithm>
#include <cmath>
#include <string>

#include "sslseg/datapipe.hpp"
#include "sslseg/errors.hpp"

namespace sslseg {

namespace {

// Mean/std over a strided view: elements i*stride + offset.
std::pair<double, double> moments(const Tensor& t, std::size_t offset,
                                  std::size_t stride) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = offset; i < t.size(); i += stride, ++n) sum += t[i];
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = offset; i < t.size(); i += stride) {
    const double d = t[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  return {mean, var};
}

}  // namespace

Tensor normalize(const Tensor& stack, NormalizeMode mode) {
  if (stack.empty()) throw ShapeError("normalize: empty tensor");
  Tensor out = stack;
  const std::size_t channels = mode == NormalizeMode::PerChannel
                                   ? stack.shape().back()
                                   : 1;
  const std::size_t stride = mode == NormalizeMode::PerChannel ? channels : 1;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto [mean, var] = moments(stack, c, stride);
    if (var <= 1e-20 * std::max(1.0, mean * mean)) {
      const std::string scope = mode == NormalizeMode::PerChannel
                                    ? "channel " + std::to_string(c)
                                    : "volume";
      throw DegenerateInputError("normalize: zero variance over " + scope);
    }
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t i = c; i < out.size(); i += stride)
      out[i] = (out[i] - mean) * inv;
  }
  return out;
}

Tensor hu_window(const Tensor& raw, const WindowLevel& wl) {
  if (wl.width <= 0.0) throw ConfigError("hu_window: window width must be > 0");
  const double lo = wl.level - wl.width / 2.0;
  Tensor out = raw;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp((out[i] - lo) / wl.width, 0.0, 1.0);
  return out;
}

Tensor hu_window_stack(const Tensor& raw,
                       const std::vector<WindowLevel>& windows) {
  if (raw.rank() != 4 || raw.dim(3) != 1) {
    throw ShapeError("hu_window_stack: expected N x H x W x 1, got " +
                     shape_to_string(raw.shape()));
  }
  if (windows.empty()) throw ConfigError("hu_window_stack: no windows given");
  const std::size_t pixels = raw.size();
  Tensor out({raw.dim(0), raw.dim(1), raw.dim(2), windows.size()});
  for (std::size_t w = 0; w < windows.size(); ++w) {
    Tensor ch = hu_window(raw, windows[w]);
    for (std::size_t i = 0; i < pixels; ++i)
      out[i * windows.size() + w] = ch[i];
  }
  return out;
}

}  // namespace sslseg
