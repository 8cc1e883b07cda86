#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crosslink/image.hpp"

namespace crosslink::metrics {

struct PixelSpacing {
  double sy = 1.0;
  double sx = 1.0;
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::uint64_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Throws std::invalid_argument when the dimensions differ.
ConfusionCounts confusion(const BinaryMask& prediction, const BinaryMask& truth);

// Percentages; std::nullopt marks an undefined value (zero denominator).
std::optional<double> dsc(const ConfusionCounts& c);
std::optional<double> sensitivity(const ConfusionCounts& c);
std::optional<double> specificity(const ConfusionCounts& c);
std::optional<double> over_rate(const ConfusionCounts& c);
std::optional<double> under_rate(const ConfusionCounts& c);

/// Foreground pixels with a background 4-neighbour or touching the image edge.
std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const BinaryMask& mask);

/// Symmetric Hausdorff distance between the boundary sets, exact all-pairs
/// search. Undefined when either mask is empty.
std::optional<double> hausdorff(const BinaryMask& a, const BinaryMask& b,
                                PixelSpacing spacing = {});

/// Thresholds probabilities at `threshold` (value >= threshold is foreground).
BinaryMask binarize(const std::vector<float>& probs, std::size_t h, std::size_t w,
                    double threshold = 0.5);

struct CaseMetrics {
  std::string id;
  double truth_fraction = 0;
  ConfusionCounts counts;
  std::optional<double> dsc, sen, spe, over, under, hd;
};

CaseMetrics evaluate_case(std::string id, const BinaryMask& prediction, const BinaryMask& truth,
                          PixelSpacing spacing = {});

/// Mean of each metric over defined values plus the number of undefined ones.
struct MetricSummary {
  std::size_t cases = 0;
  std::optional<double> dsc, sen, spe, over, under, hd;
  std::size_t undefined_dsc = 0, undefined_sen = 0, undefined_spe = 0, undefined_over = 0,
              undefined_under = 0, undefined_hd = 0;
};
MetricSummary summarize(const std::vector<CaseMetrics>& cases);

/// Default area-fraction bin edges: 0, 0.6%, 2%, 100%.
std::vector<double> default_bins();

struct StratumRow {
  double lo = 0, hi = 0;
  std::size_t count = 0;
  std::optional<double> mean_dsc;
  std::size_t undefined = 0;
};

/// Bins are [edge_i, edge_{i+1}) except the last, which is closed. Cases
/// outside every bin are ignored. Throws unless the edges strictly increase.
std::vector<StratumRow> stratified_report(const std::vector<CaseMetrics>& cases,
                                          const std::vector<double>& edges);

/// Undefined values print as "NA".
std::string format_value(const std::optional<double>& v);

/// One row per case (id, DSC, Sen, Spe, OR, UR, HD) then a "mean" row.
void write_case_table(std::ostream& os, const std::vector<CaseMetrics>& cases,
                      char delimiter = ',');
void write_strata_table(std::ostream& os, const std::vector<StratumRow>& rows,
                        char delimiter = ',');

}  // namespace crosslink::metrics
