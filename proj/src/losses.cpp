#include "sslseg/losses.hpp"

#include "sslseg/errors.hpp"

namespace sslseg {

double l2_loss(const Tensor& x, const Tensor& y) {
  Tape tape;
  return tape.value(tape.l2_loss(tape.leaf(x), y)).item();
}

double dice_loss(const Tensor& x, const Tensor& y, const DiceLossConfig& cfg) {
  if (cfg.epsilon <= 0.0) throw ConfigError("dice_loss: epsilon must be > 0");
  Tape tape;
  return tape.value(tape.dice_loss(tape.leaf(x), y, cfg.epsilon)).item();
}

}  // namespace sslseg
