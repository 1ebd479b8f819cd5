#include "hetmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "hetmt/errors.hpp"
#include "hetmt/io.hpp"
#include "hetmt/stats.hpp"

namespace hetmt {

namespace fs = std::filesystem;
using nlohmann::json;

double mae_masked(std::span<const float> pred, std::span<const float> ref, std::span<const std::uint8_t> mask) {
  if (pred.size() != ref.size() || pred.size() != mask.size()) throw ConfigError("mae_masked: shape mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (mask[i]) {
      sum += std::abs(static_cast<double>(pred[i]) - static_cast<double>(ref[i]));
      ++n;
    }
  if (n == 0) throw ConfigError("mae_masked: empty mask");
  return sum / static_cast<double>(n);
}

std::vector<std::uint8_t> label_mask(std::span<const std::uint8_t> labels, const std::vector<int>& classes) {
  std::vector<std::uint8_t> m(labels.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    m[i] = classes.empty() || std::find(classes.begin(), classes.end(), labels[i]) != classes.end();
  return m;
}

double fuzzy_dice(std::span<const float> prob, std::span<const std::uint8_t> labels, int classes, int c) {
  if (c < 0 || c >= classes) throw ConfigError("fuzzy_dice: class index out of range");
  const std::size_t n = labels.size();
  if (prob.size() != n * static_cast<std::size_t>(classes)) throw ConfigError("fuzzy_dice: shape mismatch");
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double p = prob[static_cast<std::size_t>(c) * n + v];
    const double g = labels[v] == c ? 1.0 : 0.0;
    inter += p * g;
    psum += p;
    gsum += g;
  }
  if (psum + gsum == 0.0) return 1.0;
  return 2.0 * inter / (psum + gsum);
}

std::vector<double> zscore_map(std::span<const float> mean, std::span<const float> total_var,
                               std::span<const float> ref, std::span<const std::uint8_t> mask) {
  if (mean.size() != total_var.size() || mean.size() != ref.size() || mean.size() != mask.size())
    throw ConfigError("zscore_map: shape mismatch");
  std::vector<double> z(mean.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!mask[i]) continue;
    if (!(total_var[i] > 0.0f)) throw ConfigError("zscore_map: non-positive variance inside the mask");
    z[i] = (static_cast<double>(ref[i]) - static_cast<double>(mean[i])) / std::sqrt(static_cast<double>(total_var[i]));
  }
  return z;
}

std::vector<double> normal_bin_edges(int bins) {
  if (bins < 2) throw ConfigError("need at least 2 bins");
  std::vector<double> edges(bins - 1);
  for (int i = 1; i < bins; ++i) edges[i - 1] = stats::normal_quantile(static_cast<double>(i) / bins);
  return edges;
}

std::vector<std::size_t> bin_counts(std::span<const double> z, std::span<const double> edges) {
  std::vector<std::size_t> counts(edges.size() + 1, 0);
  for (double v : z) {
    const auto it = std::upper_bound(edges.begin(), edges.end(), v);
    ++counts[static_cast<std::size_t>(it - edges.begin())];
  }
  return counts;
}

ZStats zscore_stats_chi2(std::span<const double> z, int bins) {
  if (bins < 2) throw ConfigError("need at least 2 bins");
  if (z.size() < static_cast<std::size_t>(5 * bins))
    throw ConfigError("chi-squared test needs at least 5 samples per bin (" + std::to_string(5 * bins) + "), got " +
                      std::to_string(z.size()));
  ZStats s;
  s.n = z.size();
  double sum = 0.0;
  for (double v : z) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : z) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.n));
  s.edges = normal_bin_edges(bins);
  s.counts = bin_counts(z, s.edges);
  const double expected = static_cast<double>(s.n) / bins;
  for (std::size_t c : s.counts) {
    const double d = static_cast<double>(c) - expected;
    s.chi2 += d * d / expected;
  }
  s.dof = bins - 1;
  s.p_value = stats::chi2_sf(s.chi2, s.dof);
  return s;
}

EvalSettings EvalSettings::defaults(int classes, std::vector<std::string> names) {
  EvalSettings s;
  if (names.empty())
    for (int c = 0; c < classes; ++c) names.push_back("class_" + std::to_string(c));
  s.class_names = std::move(names);
  s.regions.push_back({"body", {}});
  if (classes > 2) s.regions.push_back({"bone", {1, 2}});
  for (int c = 1; c < classes; ++c) s.regions.push_back({s.class_names[c], {c}});
  return s;
}

VariantEvaluation evaluate_variant(const std::string& variant, const std::vector<StochasticPrediction>& predictions,
                                   const std::vector<ReferenceCase>& references, const EvalSettings& settings) {
  if (predictions.size() != references.size()) throw ConfigError("predictions and references are not aligned");
  if (predictions.empty()) throw ConfigError("nothing to evaluate for variant " + variant);
  VariantEvaluation ev;
  ev.variant = variant;
  ev.T = predictions.front().T;
  ev.checkpoints = predictions.front().checkpoint_ids;
  const bool reg = predictions.front().has_regression;
  const bool seg = predictions.front().has_segmentation;
  const int C = predictions.front().classes;

  // Pooled accumulators.
  std::vector<double> mae_sum(settings.regions.size(), 0.0);
  std::vector<std::size_t> mae_n(settings.regions.size(), 0);
  std::vector<double> inter(C, 0.0), psum(C, 0.0), gsum(C, 0.0);
  std::vector<double> z_pooled;

  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const StochasticPrediction& p = predictions[k];
    const ReferenceCase& r = references[k];
    ev.case_ids.push_back(r.id);
    const std::span<const std::uint8_t> labels(r.labels.labels);
    if (reg) {
      if (p.reg_mean.shape != r.ct.shape) throw ConfigError("prediction/reference shape mismatch for " + r.id);
      for (std::size_t ri = 0; ri < settings.regions.size(); ++ri) {
        const auto mask = label_mask(labels, settings.regions[ri].second);
        if (std::find(mask.begin(), mask.end(), 1) == mask.end()) continue;
        const double mae = mae_masked(p.reg_mean.values, r.ct.values, mask);
        ev.metrics.push_back({variant, settings.regions[ri].first, "mae", mae, r.id});
        for (std::size_t i = 0; i < mask.size(); ++i)
          if (mask[i]) {
            mae_sum[ri] += std::abs(static_cast<double>(p.reg_mean.values[i]) - static_cast<double>(r.ct.values[i]));
            ++mae_n[ri];
          }
      }
      const auto body = label_mask(labels, {});
      const auto z = zscore_map(p.reg_mean.values, p.reg_total_var.values, r.ct.values, body);
      std::vector<double> zv;
      for (double v : z)
        if (!std::isnan(v)) zv.push_back(v);
      ev.calibration.push_back({variant, r.id, zscore_stats_chi2(zv, settings.bins)});
      z_pooled.insert(z_pooled.end(), zv.begin(), zv.end());
    }
    if (seg) {
      std::vector<float> prob;
      for (int c = 0; c < C; ++c) prob.insert(prob.end(), p.seg_mean_prob[c].values.begin(), p.seg_mean_prob[c].values.end());
      const std::size_t n = labels.size();
      for (int c = 0; c < C; ++c) {
        ev.metrics.push_back({variant, settings.class_names.at(c), "fuzzy_dice", fuzzy_dice(prob, labels, C, c), r.id});
        for (std::size_t v = 0; v < n; ++v) {
          const double pc = prob[c * n + v];
          const double g = labels[v] == c ? 1.0 : 0.0;
          inter[c] += pc * g;
          psum[c] += pc;
          gsum[c] += g;
        }
      }
    }
  }

  if (reg) {
    for (std::size_t ri = 0; ri < settings.regions.size(); ++ri)
      if (mae_n[ri] > 0)
        ev.metrics.push_back({variant, settings.regions[ri].first, "mae", mae_sum[ri] / mae_n[ri], "pooled"});
    ev.calibration.push_back({variant, "pooled", zscore_stats_chi2(z_pooled, settings.bins)});
  }
  if (seg)
    for (int c = 0; c < C; ++c) {
      const double d = psum[c] + gsum[c] == 0.0 ? 1.0 : 2.0 * inter[c] / (psum[c] + gsum[c]);
      ev.metrics.push_back({variant, settings.class_names.at(c), "fuzzy_dice", d, "pooled"});
    }
  return ev;
}

CalibrationReport make_report(const std::vector<VariantPredictions>& variants,
                              const std::vector<ReferenceCase>& references, const EvalSettings& settings) {
  if (variants.empty()) throw ConfigError("report needs at least one evaluated variant");
  CalibrationReport rep;
  rep.bins = settings.bins;
  for (const auto& v : variants) rep.variants.push_back(evaluate_variant(v.variant, v.predictions, references, settings));
  return rep;
}

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json stats_json(const ZStats& s) {
  return json{{"n", s.n},       {"z_mean", s.mean}, {"z_std", s.std}, {"chi2", s.chi2},
              {"dof", s.dof},   {"p_value", s.p_value}, {"counts", s.counts}};
}

}  // namespace

std::string metrics_csv(const CalibrationReport& report) {
  std::string out = "variant,region,metric,value,case\n";
  for (const auto& v : report.variants)
    for (const auto& m : v.metrics) out += m.variant + "," + m.region + "," + m.metric + "," + num(m.value) + "," + m.case_id + "\n";
  return out;
}

std::string histogram_csv(const CalibrationReport& report) {
  std::string out = "variant,bin_lo,bin_hi,count\n";
  for (const auto& v : report.variants) {
    if (v.calibration.empty()) continue;
    const ZStats& s = pooled_stats(v);
    for (std::size_t b = 0; b < s.counts.size(); ++b) {
      const double lo = b == 0 ? -INFINITY : s.edges[b - 1];
      const double hi = b == s.edges.size() ? INFINITY : s.edges[b];
      out += v.variant + "," + num(lo) + "," + num(hi) + "," + std::to_string(s.counts[b]) + "\n";
    }
  }
  return out;
}

std::string calibration_csv(const CalibrationReport& report) {
  std::string out = "variant,case,n,z_mean,z_std,chi2,dof,p_value\n";
  for (const auto& v : report.variants)
    for (const auto& c : v.calibration)
      out += v.variant + "," + c.case_id + "," + std::to_string(c.stats.n) + "," + num(c.stats.mean) + "," +
             num(c.stats.std) + "," + num(c.stats.chi2) + "," + std::to_string(c.stats.dof) + "," +
             num(c.stats.p_value) + "\n";
  return out;
}

std::string report_json(const CalibrationReport& report) {
  json variants = json::array();
  for (const auto& v : report.variants) {
    json mae = json::array(), dice = json::array(), calib = json::array();
    for (const auto& m : v.metrics) {
      json row{{"case", m.case_id}, {"value", m.value}};
      if (m.metric == "mae") {
        row["region"] = m.region;
        mae.push_back(row);
      } else {
        row["class"] = m.region;
        dice.push_back(row);
      }
    }
    for (const auto& c : v.calibration) {
      json row = stats_json(c.stats);
      row["case"] = c.case_id;
      calib.push_back(row);
    }
    json entry{{"variant", v.variant},   {"T", v.T},       {"checkpoints", v.checkpoints},
               {"cases", v.case_ids},    {"mae", mae},     {"fuzzy_dice", dice},
               {"calibration", calib}};
    if (!v.calibration.empty()) entry["z_bin_edges"] = pooled_stats(v).edges;
    variants.push_back(entry);
  }
  json root{{"version", 1}, {"bins", report.bins}, {"variants", variants}};
  return root.dump(2) + "\n";
}

void write_report(const CalibrationReport& report, const fs::path& dir) {
  io::ensure_dir(dir);
  io::write_text(dir / "report.json", report_json(report));
  io::write_text(dir / "metrics.csv", metrics_csv(report));
  io::write_text(dir / "z_histogram.csv", histogram_csv(report));
}

const ZStats& pooled_stats(const VariantEvaluation& v) {
  for (const auto& c : v.calibration)
    if (c.case_id == "pooled") return c.stats;
  throw ConfigError("variant " + v.variant + " has no pooled calibration");
}

double pooled_metric(const VariantEvaluation& v, const std::string& metric, const std::string& region) {
  for (const auto& m : v.metrics)
    if (m.case_id == "pooled" && m.metric == metric && m.region == region) return m.value;
  throw ConfigError("variant " + v.variant + " has no pooled " + metric + " for " + region);
}

}  // namespace hetmt
