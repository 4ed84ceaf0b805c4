#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslseg/corruption.hpp"

namespace sslseg {

struct StrategyKey {
  PretextTask task = PretextTask::ContextPrediction;
  std::size_t patch = 16;
  SamplerKind sampler = SamplerKind::Random;

  std::string label() const;
  bool operator==(const StrategyKey&) const = default;
  // Lexicographic on (task name, K, sampler name); also the tie-break order.
  bool operator<(const StrategyKey& other) const;
};

struct StrategyPValue {
  StrategyKey key;
  double p = 1.0;
};

struct DatasetRankingInput {
  std::string dataset;
  std::vector<double> supervised;  // paired baseline Dice scores
  std::map<StrategyKey, std::vector<double>> ssl;  // aligned with supervised
};

struct DatasetRanking {
  std::string dataset;
  std::vector<StrategyPValue> ranking;  // ascending p
};

struct RankingResult {
  std::vector<DatasetRanking> per_dataset;
  std::optional<StrategyKey> optimal;
  bool no_intersection = false;
};

/// Top-k window used for the cross-dataset intersection rule.
inline constexpr std::size_t kRankingTopK = 3;

/// Ranks every expected strategy per dataset by its one-sided Wilcoxon
/// p-value (SSL > supervised), ascending, ties broken lexicographically.
/// The optimal strategy is the lowest combined-rank member of the top-3
/// intersection across datasets; a single dataset degenerates to its top-1.
/// Missing cells raise IncompleteGridError listing every absent cell.
RankingResult rank_strategies(const std::vector<DatasetRankingInput>& inputs,
                              const std::vector<StrategyKey>& expected_cells);

/// The paper's full pretraining grid: 2 tasks x 4 patch sizes x 2 samplers.
std::vector<StrategyKey> full_strategy_grid();

}  // namespace sslseg
