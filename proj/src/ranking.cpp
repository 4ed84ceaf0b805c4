#include "sslseg/ranking.hpp"

#include <algorithm>
#include <set>
#include <tuple>

#include "sslseg/errors.hpp"
#include "sslseg/wilcoxon.hpp"

namespace sslseg {

std::string StrategyKey::label() const {
  return std::string(task_name(task)) + "/" + std::to_string(patch) + "/" +
         sampler_name(sampler);
}

bool StrategyKey::operator<(const StrategyKey& other) const {
  return std::make_tuple(std::string(task_name(task)), patch,
                         std::string(sampler_name(sampler))) <
         std::make_tuple(std::string(task_name(other.task)), other.patch,
                         std::string(sampler_name(other.sampler)));
}

std::vector<StrategyKey> full_strategy_grid() {
  std::vector<StrategyKey> grid;
  for (PretextTask task :
       {PretextTask::ContextPrediction, PretextTask::ContextRestoration})
    for (std::size_t patch : {64u, 32u, 16u, 8u})
      for (SamplerKind sampler : {SamplerKind::Random, SamplerKind::PoissonDisc})
        grid.push_back({task, patch, sampler});
  return grid;
}

RankingResult rank_strategies(const std::vector<DatasetRankingInput>& inputs,
                              const std::vector<StrategyKey>& expected_cells) {
  if (inputs.empty()) throw ConfigError("rank_strategies: no datasets");

  std::string missing;
  for (const DatasetRankingInput& in : inputs) {
    for (const StrategyKey& key : expected_cells) {
      if (!in.ssl.count(key)) {
        missing += (missing.empty() ? "" : ", ") + in.dataset + ":" + key.label();
      }
    }
  }
  if (!missing.empty()) {
    throw IncompleteGridError("rank_strategies: missing cells: " + missing);
  }

  RankingResult result;
  for (const DatasetRankingInput& in : inputs) {
    DatasetRanking dr;
    dr.dataset = in.dataset;
    for (const StrategyKey& key : expected_cells) {
      const std::vector<double>& ssl = in.ssl.at(key);
      if (ssl.size() != in.supervised.size()) {
        throw ConfigError("rank_strategies: unpaired samples for " + key.label());
      }
      const auto p = wilcoxon_one_sided(ssl, in.supervised);
      // Identical paired samples carry no evidence of superiority.
      dr.ranking.push_back({key, p.value_or(1.0)});
    }
    std::sort(dr.ranking.begin(), dr.ranking.end(),
              [](const StrategyPValue& x, const StrategyPValue& y) {
                if (x.p != y.p) return x.p < y.p;
                return x.key < y.key;
              });
    result.per_dataset.push_back(std::move(dr));
  }

  // Rank position per dataset (1-based).
  auto rank_of = [](const DatasetRanking& dr, const StrategyKey& key) {
    for (std::size_t i = 0; i < dr.ranking.size(); ++i)
      if (dr.ranking[i].key == key) return i + 1;
    return dr.ranking.size() + 1;
  };

  if (result.per_dataset.size() == 1) {
    result.optimal = result.per_dataset[0].ranking.front().key;
    return result;
  }

  std::set<StrategyKey> intersection;
  for (std::size_t i = 0; i < result.per_dataset.size(); ++i) {
    std::set<StrategyKey> top;
    const auto& ranking = result.per_dataset[i].ranking;
    for (std::size_t k = 0; k < std::min(kRankingTopK, ranking.size()); ++k)
      top.insert(ranking[k].key);
    if (i == 0) {
      intersection = std::move(top);
    } else {
      std::set<StrategyKey> kept;
      for (const StrategyKey& key : intersection)
        if (top.count(key)) kept.insert(key);
      intersection = std::move(kept);
    }
  }
  if (intersection.empty()) {
    result.no_intersection = true;
    return result;
  }
  std::optional<StrategyKey> best;
  std::size_t best_sum = 0;
  for (const StrategyKey& key : intersection) {
    std::size_t sum = 0;
    for (const DatasetRanking& dr : result.per_dataset) sum += rank_of(dr, key);
    if (!best || sum < best_sum || (sum == best_sum && key < *best)) {
      best = key;
      best_sum = sum;
    }
  }
  result.optimal = best;
  return result;
}

}  // namespace sslseg
