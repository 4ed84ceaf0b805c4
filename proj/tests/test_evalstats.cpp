#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "sslseg/errors.hpp"
#include "sslseg/metrics.hpp"
#include "sslseg/ranking.hpp"
#include "sslseg/rng.hpp"
#include "sslseg/wilcoxon.hpp"

using namespace sslseg;

namespace {

// Brute-force oracle: enumerate every sign assignment over the mid-ranked
// |differences| and count tail mass directly.
double enumeration_oracle(const std::vector<double>& a,
                          const std::vector<double>& b) {
  std::vector<double> absd;
  std::vector<int> sign;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d == 0.0) continue;
    absd.push_back(std::abs(d));
    sign.push_back(d > 0 ? 1 : -1);
  }
  const std::size_t n = absd.size();
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0.0, equal = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (absd[j] < absd[i]) less += 1.0;
      if (absd[j] == absd[i]) equal += 1.0;
    }
    ranks[i] = less + (equal + 1.0) / 2.0;  // mid-rank
  }
  double w_obs = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (sign[i] > 0) w_obs += ranks[i];
  std::size_t hits = 0;
  const std::size_t total = std::size_t(1) << n;
  for (std::size_t m = 0; m < total; ++m) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (m & (std::size_t(1) << i)) w += ranks[i];
    if (w >= w_obs - 1e-12) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

Tensor mask_of(std::initializer_list<double> values) {
  std::vector<double> v(values);
  const std::size_t n = v.size();
  return Tensor::from_data({n}, std::move(v));
}

}  // namespace

TEST_CASE("dice coefficient basics and properties") {
  Tensor p = mask_of({1, 1, 0, 0});
  Tensor g = mask_of({1, 1, 0, 0});
  CHECK(dice_coeff(p, g) == 1.0);

  Tensor disjoint = mask_of({0, 0, 1, 1});
  CHECK(dice_coeff(p, disjoint) == 0.0);

  // |P| = |G| = 2, |intersection| = 1 -> 2*1/4.
  Tensor half = mask_of({1, 0, 1, 0});
  CHECK(dice_coeff(p, half) == doctest::Approx(0.5));

  // Both empty.
  Tensor empty = mask_of({0, 0, 0, 0});
  CHECK(dice_coeff(empty, empty) == 1.0);

  // Symmetry and monotonicity under growing intersection with fixed sizes.
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x({64}), y({64});
    for (std::size_t i = 0; i < 64; ++i) {
      x[i] = rng.below(2) ? 1.0 : 0.0;
      y[i] = rng.below(2) ? 1.0 : 0.0;
    }
    CHECK(dice_coeff(x, y) == dice_coeff(y, x));
  }
  // 100-pixel masks with |P| = |G| = 100 and |intersection| = 50 -> 0.5.
  Tensor big_p({200}, 0.0), big_g({200}, 0.0);
  for (std::size_t i = 0; i < 100; ++i) big_p[i] = 1.0;
  for (std::size_t i = 50; i < 150; ++i) big_g[i] = 1.0;
  CHECK(dice_coeff(big_p, big_g) == doctest::Approx(0.5));

  CHECK_THROWS_AS(dice_coeff(p, Tensor({5}, 0.0)), ShapeError);
  CHECK_THROWS_AS(dice_coeff(mask_of({0.5, 0, 0, 0}), g), NumericError);
}

TEST_CASE("inpaint_l2: zero at equality, counts unit differences") {
  Tensor a({1, 4, 4, 1}, 0.3);
  CHECK(inpaint_l2(a, a) == 0.0);

  Tensor b = a;
  b[0] += 1.0;
  b[5] -= 1.0;
  b[9] += 1.0;
  CHECK(inpaint_l2(b, a) == doctest::Approx(3.0));

  // Rank-3 view matches the N=1 reduction.
  Tensor hwc({4, 4, 1}, 0.3);
  Tensor hwc2 = hwc;
  hwc2[2] += 2.0;
  CHECK(inpaint_l2(hwc2, hwc) == doctest::Approx(4.0));
}

TEST_CASE("tissue metrics and the undefined markers") {
  Tensor mask({10, 10}, 0.0);
  for (std::size_t i = 0; i < 100; ++i) mask[i] = i < 100 ? 1.0 : 0.0;
  CHECK(tissue_area(mask, 0.5) == doctest::Approx(50.0));
  CHECK(tissue_volume(mask, 2.0) == doctest::Approx(200.0));

  Tensor raw({10, 10}, 7.25);
  auto mi = mean_intensity(raw, mask);
  REQUIRE(mi.has_value());
  CHECK(*mi == doctest::Approx(7.25));

  Tensor empty({10, 10}, 0.0);
  CHECK_FALSE(mean_intensity(raw, empty).has_value());

  CHECK(*percent_error(110.0, 100.0) == doctest::Approx(10.0));
  CHECK(*percent_error(5.0, 5.0) == 0.0);
  CHECK(*percent_error(12.0, 30.0) == doctest::Approx(60.0));
  CHECK_FALSE(percent_error(1.0, 0.0).has_value());

  // Scale invariance.
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const double x = rng.normal(), y = 1.0 + std::abs(rng.normal());
    const double k = 0.1 + std::abs(rng.normal());
    CHECK(*percent_error(k * x, k * y) ==
          doctest::Approx(*percent_error(x, y)).epsilon(1e-9));
  }
}

TEST_CASE("wilcoxon: five all-positive differences give exactly 1/32") {
  std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0};
  std::vector<double> b{0.5, 1.0, 2.0, 3.0, 4.0};
  auto p = wilcoxon_one_sided(a, b);
  REQUIRE(p.has_value());
  CHECK(*p == 0.03125);
}

TEST_CASE("wilcoxon: identical samples yield the undefined marker") {
  std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0};
  CHECK_FALSE(wilcoxon_one_sided(a, a).has_value());
  std::vector<double> b{2.0, 2.0};
  std::vector<double> c{1.0, 3.0};
  CHECK(wilcoxon_one_sided(b, c).has_value());
}

TEST_CASE("wilcoxon exact path matches brute-force enumeration, n <= 10") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + rng.below(6);  // 5..10
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Integer-valued so ties (and zero differences) actually happen.
      a[i] = static_cast<double>(rng.below(8));
      b[i] = static_cast<double>(rng.below(8));
    }
    const auto p = wilcoxon_one_sided(a, b);
    bool all_zero = true;
    for (std::size_t i = 0; i < n; ++i) all_zero &= (a[i] == b[i]);
    if (all_zero) {
      CHECK_FALSE(p.has_value());
      continue;
    }
    REQUIRE(p.has_value());
    CHECK(*p == doctest::Approx(enumeration_oracle(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("wilcoxon approximation is close to exact at n = 12") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(12), b(12);
    for (std::size_t i = 0; i < 12; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal() - 0.3;
    }
    const auto exact = wilcoxon_one_sided_exact(a, b);
    const auto approx = wilcoxon_one_sided_approx(a, b);
    REQUIRE(exact.has_value());
    REQUIRE(approx.has_value());
    CHECK(std::abs(*exact - *approx) < 0.01);
    // n = 12 <= 25, so the dispatching path must take the exact branch.
    CHECK(*wilcoxon_one_sided(a, b) == *exact);
  }
}

TEST_CASE("wilcoxon rejects unpaired samples") {
  std::vector<double> a{1, 2, 3};
  std::vector<double> b{1, 2};
  CHECK_THROWS_AS(wilcoxon_one_sided(a, b), ShapeError);
}

TEST_CASE("rank_strategies: ordering, single dataset, intersection rules") {
  // Three cells with controlled effect sizes.
  const StrategyKey strong{PretextTask::ContextRestoration, 32, SamplerKind::PoissonDisc};
  const StrategyKey medium{PretextTask::ContextPrediction, 16, SamplerKind::Random};
  const StrategyKey weak{PretextTask::ContextPrediction, 64, SamplerKind::Random};
  const std::vector<StrategyKey> cells{strong, medium, weak};

  // A signed-rank test sees only signs and rank order of the differences, so
  // the cells differ in their fraction of positive pairs, not just the shift.
  Rng rng(31);
  DatasetRankingInput in;
  in.dataset = "phantomA";
  in.supervised.resize(30);
  for (double& v : in.supervised) v = 0.7 + 0.02 * rng.normal();
  auto shifted = [&](double delta) {
    std::vector<double> out = in.supervised;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] += delta + 0.03 * rng.normal();
    return out;
  };
  in.ssl[strong] = shifted(0.10);   // nearly all differences positive
  in.ssl[medium] = shifted(0.015);  // mixed signs
  in.ssl[weak] = shifted(-0.05);    // mostly negative

  RankingResult single = rank_strategies({in}, cells);
  REQUIRE(single.per_dataset.size() == 1);
  const auto& ranking = single.per_dataset[0].ranking;
  CHECK(ranking.size() == 3);
  CHECK(ranking[0].key == strong);
  for (std::size_t i = 0; i + 1 < ranking.size(); ++i)
    CHECK(ranking[i].p <= ranking[i + 1].p);
  // Output is a permutation of the inputs.
  for (const StrategyKey& key : cells) {
    CHECK(std::count_if(ranking.begin(), ranking.end(),
                        [&](const StrategyPValue& s) { return s.key == key; }) == 1);
  }
  REQUIRE(single.optimal.has_value());
  CHECK(*single.optimal == strong);

  // Two identical datasets: identical rankings, intersection keeps top-1.
  DatasetRankingInput in2 = in;
  in2.dataset = "phantomB";
  RankingResult both = rank_strategies({in, in2}, cells);
  REQUIRE(both.per_dataset.size() == 2);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(both.per_dataset[0].ranking[i].key == both.per_dataset[1].ranking[i].key);
  REQUIRE(both.optimal.has_value());
  CHECK(*both.optimal == strong);

  // Disjoint top-3 sets: explicit no-intersection result. Needs > 3 cells
  // per dataset so the windows can be disjoint.
  const StrategyKey extra1{PretextTask::ContextRestoration, 8, SamplerKind::Random};
  const StrategyKey extra2{PretextTask::ContextRestoration, 16, SamplerKind::Random};
  const StrategyKey extra3{PretextTask::ContextRestoration, 64, SamplerKind::Random};
  std::vector<StrategyKey> six{strong, medium, weak, extra1, extra2, extra3};
  DatasetRankingInput da = in;
  da.ssl[strong] = shifted(0.10);
  da.ssl[medium] = shifted(0.10);
  da.ssl[weak] = shifted(0.10);
  da.ssl[extra1] = shifted(-0.10);
  da.ssl[extra2] = shifted(-0.10);
  da.ssl[extra3] = shifted(-0.10);
  DatasetRankingInput db = da;
  db.dataset = "phantomB";
  // Invert the effect pattern for the second dataset.
  db.ssl[strong] = shifted(-0.10);
  db.ssl[medium] = shifted(-0.10);
  db.ssl[weak] = shifted(-0.10);
  db.ssl[extra1] = shifted(0.10);
  db.ssl[extra2] = shifted(0.10);
  db.ssl[extra3] = shifted(0.10);
  RankingResult disjoint = rank_strategies({da, db}, six);
  CHECK(disjoint.no_intersection);
  CHECK_FALSE(disjoint.optimal.has_value());

  // Missing cell: incomplete-grid error naming the cell.
  DatasetRankingInput incomplete = in;
  incomplete.ssl.erase(medium);
  CHECK_THROWS_WITH_AS(rank_strategies({incomplete}, cells),
                       doctest::Contains("prediction/16/random"),
                       IncompleteGridError);
}
