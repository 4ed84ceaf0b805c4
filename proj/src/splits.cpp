#include <algorithm>
#include <cmath>

#include "sslseg/datapipe.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/rng.hpp"

namespace sslseg {

std::map<double, std::vector<std::size_t>> make_splits(
    const std::vector<std::size_t>& ids, const SplitSpec& spec) {
  if (ids.size() < 20) {
    throw ConfigError("make_splits: need at least 20 ids, got " +
                      std::to_string(ids.size()));
  }
  for (double f : spec.fractions) {
    if (f <= 0.0 || f > 1.0) {
      throw ConfigError("make_splits: fraction out of (0,1]");
    }
  }
  // One shuffled order; every subset is a prefix, which makes nesting hold by
  // construction.
  std::vector<std::size_t> order = ids;
  Rng rng(mix_seed(spec.seed, 0x5117u));
  rng.shuffle(order);

  std::map<double, std::vector<std::size_t>> out;
  const double n = static_cast<double>(ids.size());
  for (double f : spec.fractions) {
    // ceil(f*n); the epsilon keeps exact decimal products (0.1 * 60) from
    // rounding up through float representation error.
    const std::size_t size = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(f * n - 1e-9)));
    out[f] = std::vector<std::size_t>(order.begin(),
                                      order.begin() + std::min(size, ids.size()));
  }
  return out;
}

}  // namespace sslseg
