#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hetmt/inference.hpp"
#include "hetmt/volume.hpp"

namespace hetmt {

/// Mean of |pred - ref| over voxels where mask != 0. ConfigError on an empty mask.
double mae_masked(std::span<const float> pred, std::span<const float> ref, std::span<const std::uint8_t> mask);

/// Mask of voxels whose label is in `classes`.
std::vector<std::uint8_t> label_mask(std::span<const std::uint8_t> labels, const std::vector<int>& classes);

/// 2 sum(p_c g_c) / (sum p_c + sum g_c) for class c of a C x N probability
/// map; 1 when both sums are zero.
double fuzzy_dice(std::span<const float> prob, std::span<const std::uint8_t> labels, int classes, int c);

/// z = (ref - mean) / sqrt(total_var) on the mask, NaN elsewhere.
/// ConfigError when total_var <= 0 inside the mask.
std::vector<double> zscore_map(std::span<const float> mean, std::span<const float> total_var,
                               std::span<const float> ref, std::span<const std::uint8_t> mask);

/// K - 1 interior edges splitting the standard normal into K equal-probability bins.
std::vector<double> normal_bin_edges(int bins);

/// Bin i covers [edge[i-1], edge[i]) with -inf / +inf outer edges.
std::vector<std::size_t> bin_counts(std::span<const double> z, std::span<const double> edges);

struct ZStats {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // population
  double chi2 = 0.0;
  int dof = 0;
  double p_value = 1.0;
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

/// Chi-squared goodness of fit against N(0,1) with K equal-probability bins.
/// ConfigError when fewer than 5 K samples are given.
ZStats zscore_stats_chi2(std::span<const double> z, int bins);

struct EvalSettings {
  int bins = 8;
  std::vector<std::string> class_names;  // defaults to class_<c>
  // Named MAE regions; an empty class list means the whole body.
  std::vector<std::pair<std::string, std::vector<int>>> regions;

  /// body + bone (classes 1, 2) + one region per class >= 1.
  static EvalSettings defaults(int classes, std::vector<std::string> names = {});
};

struct ReferenceCase {
  std::string id;
  Volume ct;
  Volume labels;
};

struct MetricRow {
  std::string variant;
  std::string region;  // MAE region or Dice class name
  std::string metric;  // "mae" or "fuzzy_dice"
  double value = 0.0;
  std::string case_id;  // case id or "pooled"
};

struct CalibrationRow {
  std::string variant;
  std::string case_id;
  ZStats stats;
};

struct VariantEvaluation {
  std::string variant;
  int T = 0;
  std::vector<std::string> checkpoints;
  std::vector<std::string> case_ids;
  std::vector<MetricRow> metrics;
  std::vector<CalibrationRow> calibration;  // per case, then "pooled"
};

struct CalibrationReport {
  int bins = 8;
  std::vector<VariantEvaluation> variants;
};

/// Metrics and calibration for one variant's predictions against the references.
VariantEvaluation evaluate_variant(const std::string& variant, const std::vector<StochasticPrediction>& predictions,
                                   const std::vector<ReferenceCase>& references, const EvalSettings& settings);

struct VariantPredictions {
  std::string variant;
  std::vector<StochasticPrediction> predictions;  // aligned with the references
};

CalibrationReport make_report(const std::vector<VariantPredictions>& variants,
                              const std::vector<ReferenceCase>& references, const EvalSettings& settings);

/// Writes report.json, metrics.csv and z_histogram.csv into dir.
void write_report(const CalibrationReport& report, const std::filesystem::path& dir);

/// Individual parts, used by the eval and calibrate commands.
std::string metrics_csv(const CalibrationReport& report);
std::string histogram_csv(const CalibrationReport& report);
std::string calibration_csv(const CalibrationReport& report);
std::string report_json(const CalibrationReport& report);

/// Pooled calibration row of a variant (throws when absent).
const ZStats& pooled_stats(const VariantEvaluation& v);
double pooled_metric(const VariantEvaluation& v, const std::string& metric, const std::string& region);

}  // namespace hetmt
