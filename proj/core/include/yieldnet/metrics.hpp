#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "yieldnet/chip.hpp"

namespace yieldnet {

// Unit conversion constants. A canola bushel is 50 lb = 22.6796 kg; the
// bu/ac divisor follows from that and the acre/hectare ratio.
inline constexpr double kAcresPerHectare = 2.47105;
inline constexpr double kKgPerBushelCanola = 22.6796;
inline constexpr double kKgHaPerBuAc = kKgPerBushelCanola * kAcresPerHectare;

enum class YieldUnit { kKgPerHa, kKgPerAc, kBuPerAc };

YieldUnit yield_unit_from_string(const std::string& s);
double convert_from_kg_ha(double value, YieldUnit unit);

/// Streaming sufficient statistics for RMSE/MAE/R^2/Pearson over pooled
/// pixels. Mergeable; merge order must be fixed for bitwise determinism.
struct MetricAccumulator {
  int64_t n = 0;
  double sum_sq_err = 0, sum_abs_err = 0;
  double sum_y = 0, sum_y2 = 0;
  double sum_p = 0, sum_p2 = 0;
  double sum_yp = 0;

  void add(double truth, double pred) {
    double e = truth - pred;
    ++n;
    sum_sq_err += e * e;
    sum_abs_err += std::abs(e);
    sum_y += truth;
    sum_y2 += truth * truth;
    sum_p += pred;
    sum_p2 += pred * pred;
    sum_yp += truth * pred;
  }

  void merge(const MetricAccumulator& o) {
    n += o.n;
    sum_sq_err += o.sum_sq_err;
    sum_abs_err += o.sum_abs_err;
    sum_y += o.sum_y;
    sum_y2 += o.sum_y2;
    sum_p += o.sum_p;
    sum_p2 += o.sum_p2;
    sum_yp += o.sum_yp;
  }

  double rmse() const;
  double mae() const;
  double r2() const;       // 1 - SS_res / SS_tot; throws on constant truth
  double pearson() const;  // population convention; throws on zero variance
};

/// Evaluation report: error metrics in standardized units plus the three
/// physical units implied by the yield statistics.
struct EvalReport {
  std::string split;
  int64_t pixels = 0;
  double rmse_std = 0, mae_std = 0;
  double rmse_kg_ha = 0, mae_kg_ha = 0;
  double rmse_kg_ac = 0, mae_kg_ac = 0;
  double rmse_bu_ac = 0, mae_bu_ac = 0;
  double r2 = 0, pearson = 0;

  nlohmann::json to_json() const;
};

/// Metrics are accumulated in standardized units; de-standardization scales
/// RMSE/MAE by the yield std while R^2 and Pearson are scale-invariant.
EvalReport destandardized_report(const MetricAccumulator& acc, const YieldStats& ys,
                                 const std::string& split);

}  // namespace yieldnet
