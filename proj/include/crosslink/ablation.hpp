#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "crosslink/data.hpp"
#include "crosslink/metrics.hpp"
#include "crosslink/trainer.hpp"

namespace crosslink::ablation {

/// Outcome of one training run evaluated on the test split.
struct RunSummary {
  train::TrainConfig config;
  std::size_t parameters = 0;
  std::size_t epochs = 0;
  bool diverged = false;
  std::vector<metrics::CaseMetrics> cases;
  metrics::MetricSummary test;
};

using Progress = std::function<void(const std::string&)>;

/// Trains on the dataset's train split (validating on val when present) for
/// the configured number of epochs and evaluates the final weights on test.
/// With `out_dir`, checkpoints and the run log go there and the test cases
/// are appended to the log.
RunSummary train_and_test(const train::TrainConfig& cfg, const data::Dataset& dataset,
                          const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                          const Progress& progress = {});

/// Grid file: one `lambda = l1,l2,l3` line per row. Every row is checked to
/// lie on the simplex before anything runs.
std::vector<LossWeights> parse_lambda_grid(const KeyValueConfig& grid);

/// Parses a comma-separated variant list; "all" expands to every variant.
std::vector<Variant> parse_variant_list(const std::string& text);

void write_lambda_table(std::ostream& os, const std::vector<RunSummary>& rows, char delimiter = ',');
void write_arch_table(std::ostream& os, const std::vector<RunSummary>& rows, char delimiter = ',');

/// Parameter counts must strictly decrease along
/// Double2SingleNet, SquareCrosslink, Crosslink, single-branch.
/// Returns the violations (empty when the ordering holds).
std::vector<std::string> parameter_ordering_violations();

/// Directional checks with slack, in percentage points of mean test DSC.
/// Returns human-readable violations; rows missing from the study are skipped.
std::vector<std::string> arch_direction_violations(const std::vector<RunSummary>& rows,
                                                   double slack = 1.0);
std::vector<std::string> lambda_direction_violations(const std::vector<RunSummary>& rows,
                                                     double slack = 1.0);

}  // namespace crosslink::ablation
