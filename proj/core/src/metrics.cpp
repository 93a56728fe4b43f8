#include "yieldnet/metrics.hpp"

#include <cmath>

#include "yieldnet/errors.hpp"

namespace yieldnet {

YieldUnit yield_unit_from_string(const std::string& s) {
  if (s == "kg_ha") return YieldUnit::kKgPerHa;
  if (s == "kg_ac") return YieldUnit::kKgPerAc;
  if (s == "bu_ac") return YieldUnit::kBuPerAc;
  throw ConfigError("unknown yield unit: " + s);
}

double convert_from_kg_ha(double value, YieldUnit unit) {
  switch (unit) {
    case YieldUnit::kKgPerHa:
      return value;
    case YieldUnit::kKgPerAc:
      return value / kAcresPerHectare;
    case YieldUnit::kBuPerAc:
      return value / kKgHaPerBuAc;
  }
  throw ConfigError("unknown yield unit");
}

double MetricAccumulator::rmse() const {
  if (n == 0) throw ValidationError("metrics: empty input");
  return std::sqrt(sum_sq_err / double(n));
}

double MetricAccumulator::mae() const {
  if (n == 0) throw ValidationError("metrics: empty input");
  return sum_abs_err / double(n);
}

double MetricAccumulator::r2() const {
  if (n == 0) throw ValidationError("metrics: empty input");
  double ss_tot = sum_y2 - sum_y * sum_y / double(n);
  if (ss_tot <= 0) throw ValidationError("r2: ground truth has zero variance");
  return 1.0 - sum_sq_err / ss_tot;
}

double MetricAccumulator::pearson() const {
  if (n == 0) throw ValidationError("metrics: empty input");
  double var_y = sum_y2 - sum_y * sum_y / double(n);
  double var_p = sum_p2 - sum_p * sum_p / double(n);
  if (var_y <= 0 || var_p <= 0) throw ValidationError("pearson: zero variance input");
  double cov = sum_yp - sum_y * sum_p / double(n);
  return cov / std::sqrt(var_y * var_p);
}

EvalReport destandardized_report(const MetricAccumulator& acc, const YieldStats& ys,
                                 const std::string& split) {
  if (ys.std <= 0) throw ValidationError("destandardized_report: yield std must be > 0");
  EvalReport r;
  r.split = split;
  r.pixels = acc.n;
  r.rmse_std = acc.rmse();
  r.mae_std = acc.mae();
  r.r2 = acc.r2();
  // a constant prediction map (e.g. a barely trained model) has no defined
  // correlation; report 0 instead of aborting an evaluation pass
  double var_p = acc.sum_p2 - acc.sum_p * acc.sum_p / double(acc.n);
  r.pearson = var_p > 0 ? acc.pearson() : 0.0;
  r.rmse_kg_ha = r.rmse_std * ys.std;
  r.mae_kg_ha = r.mae_std * ys.std;
  r.rmse_kg_ac = convert_from_kg_ha(r.rmse_kg_ha, YieldUnit::kKgPerAc);
  r.mae_kg_ac = convert_from_kg_ha(r.mae_kg_ha, YieldUnit::kKgPerAc);
  r.rmse_bu_ac = convert_from_kg_ha(r.rmse_kg_ha, YieldUnit::kBuPerAc);
  r.mae_bu_ac = convert_from_kg_ha(r.mae_kg_ha, YieldUnit::kBuPerAc);
  return r;
}

nlohmann::json EvalReport::to_json() const {
  return nlohmann::json{
      {"split", split},
      {"pixels", pixels},
      {"rmse",
       {{"standardized", rmse_std},
        {"kg_ha", rmse_kg_ha},
        {"kg_ac", rmse_kg_ac},
        {"bu_ac", rmse_bu_ac}}},
      {"mae",
       {{"standardized", mae_std},
        {"kg_ha", mae_kg_ha},
        {"kg_ac", mae_kg_ac},
        {"bu_ac", mae_bu_ac}}},
      {"r2", r2},
      {"pearson", pearson}};
}

}  // namespace yieldnet
