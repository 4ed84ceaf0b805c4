#include "sslseg/wilcoxon.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sslseg/errors.hpp"

namespace sslseg {

namespace {

struct RankedDiffs {
  std::vector<double> ranks;      // mid-ranks of |d|, aligned with signs
  std::vector<bool> positive;     // sign of each retained difference
  double w_plus = 0.0;
  std::vector<std::size_t> tie_sizes;
};

std::optional<RankedDiffs> rank_differences(std::span<const double> a,
                                            std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("wilcoxon: paired samples must have equal length");
  }
  std::vector<double> absd;
  std::vector<bool> pos;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d == 0.0) continue;
    absd.push_back(std::abs(d));
    pos.push_back(d > 0.0);
  }
  if (absd.empty()) return std::nullopt;

  const std::size_t n = absd.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return absd[x] < absd[y]; });

  RankedDiffs out;
  out.ranks.resize(n);
  out.positive = pos;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && absd[order[j]] == absd[order[i]]) ++j;
    // Mid-rank over positions i..j-1 (1-based ranks).
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) out.ranks[order[k]] = mid;
    out.tie_sizes.push_back(j - i);
    i = j;
  }
  for (std::size_t k = 0; k < n; ++k)
    if (out.positive[k]) out.w_plus += out.ranks[k];
  return out;
}

double exact_p(const RankedDiffs& rd) {
  // Mid-ranks are multiples of 1/2; doubling makes every rank integral.
  const std::size_t n = rd.ranks.size();
  std::vector<std::size_t> r2(n);
  std::size_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r2[i] = static_cast<std::size_t>(std::llround(2.0 * rd.ranks[i]));
    total += r2[i];
  }
  // counts[s] = number of sign assignments with doubled W+ equal to s.
  std::vector<double> counts(total + 1, 0.0);
  counts[0] = 1.0;
  std::size_t reach = 0;
  for (std::size_t i = 0; i < n; ++i) {
    reach += r2[i];
    for (std::size_t s = reach + 1; s-- > r2[i];)
      counts[s] += counts[s - r2[i]];
  }
  const std::size_t w2 =
      static_cast<std::size_t>(std::llround(2.0 * rd.w_plus));
  double tail = 0.0;
  for (std::size_t s = w2; s <= total; ++s) tail += counts[s];
  return tail / std::pow(2.0, static_cast<double>(n));
}

double approx_p(const RankedDiffs& rd) {
  const double n = static_cast<double>(rd.ranks.size());
  const double mu = n * (n + 1.0) / 4.0;
  double tie_term = 0.0;
  for (std::size_t t : rd.tie_sizes) {
    const double td = static_cast<double>(t);
    tie_term += td * td * td - td;
  }
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
  const double z = (rd.w_plus - mu - 0.5) / std::sqrt(var);
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace

std::optional<double> wilcoxon_one_sided(std::span<const double> a,
                                         std::span<const double> b) {
  const auto rd = rank_differences(a, b);
  if (!rd) return std::nullopt;
  return rd->ranks.size() <= kWilcoxonExactLimit ? exact_p(*rd) : approx_p(*rd);
}

std::optional<double> wilcoxon_one_sided_approx(std::span<const double> a,
                                                std::span<const double> b) {
  const auto rd = rank_differences(a, b);
  if (!rd) return std::nullopt;
  return approx_p(*rd);
}

std::optional<double> wilcoxon_one_sided_exact(std::span<const double> a,
                                               std::span<const double> b) {
  const auto rd = rank_differences(a, b);
  if (!rd) return std::nullopt;
  return exact_p(*rd);
}

}  // namespace sslseg
