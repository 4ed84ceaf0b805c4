#pragma once

#include <optional>
#include <span>
#include <vector>

namespace sslseg {

// Exact enumeration is used up to this sample size, the normal approximation
// beyond it. Exactness matters near alpha = 0.05; 2^25 subset sums are the
// practical desk limit.
inline constexpr std::size_t kWilcoxonExactLimit = 25;

/// One-sided Wilcoxon signed-rank test of H1: a > b on paired samples.
/// Zero differences are dropped; tied |differences| receive mid-ranks.
/// Returns the undefined marker when every difference is zero.
std::optional<double> wilcoxon_one_sided(std::span<const double> a,
                                         std::span<const double> b);

/// Normal-approximation path with tie and continuity corrections, callable
/// directly at any n (used to validate the approximation against the exact
/// distribution).
std::optional<double> wilcoxon_one_sided_approx(std::span<const double> a,
                                                std::span<const double> b);

/// Exact path at any n (subset-sum distribution over signed ranks).
std::optional<double> wilcoxon_one_sided_exact(std::span<const double> a,
                                               std::span<const double> b);

}  // namespace sslseg
