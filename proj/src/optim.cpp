#include "sslseg/optim.hpp"

#include <cmath>

#include "sslseg/errors.hpp"

namespace sslseg {

Adam::Adam(const UNet& model, const AdamConfig& cfg) : cfg_(cfg) {
  m_.reserve(model.params().size());
  v_.reserve(model.params().size());
  for (const Param& p : model.params()) {
    m_.emplace_back(p.value.shape(), 0.0);
    v_.emplace_back(p.value.shape(), 0.0);
  }
}

void Adam::step(UNet& model, const std::vector<Tensor>& grads, double lr) {
  auto& params = model.params_mut();
  if (grads.size() != params.size()) {
    throw ShapeError("adam: gradient count does not match parameter count");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (model.frozen(params[pi].group)) continue;
    Tensor& p = params[pi].value;
    const Tensor& g = grads[pi];
    require_same_shape(p, g, "adam");
    Tensor& m = m_[pi];
    Tensor& v = v_[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double LRSchedule::lr(std::size_t epoch) const {
  return lr0 * std::pow(decay, static_cast<double>(epoch / period));
}

bool EarlyStopper::update(double val_loss) {
  if (stopped_) return true;
  // The reference value only moves on a qualifying improvement, so slow
  // sub-threshold drift still counts as stale.
  if (best_ - val_loss >= rule_.threshold) {
    best_ = val_loss;
    stale_ = 0;
  } else {
    ++stale_;
    if (stale_ >= rule_.patience) stopped_ = true;
  }
  return stopped_;
}

}  // namespace sslseg
