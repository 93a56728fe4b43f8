#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "yieldnet/chip.hpp"
#include "yieldnet/tensor.hpp"

namespace yieldnet {

/// Month x month attention mass at one transformer layer. Rows are the source
/// month, columns the target month; every row sums to 1.
struct TemporalAttentionMatrix {
  int64_t layer = 0;  // 1-based transformer layer index
  std::vector<std::string> months;
  Tensor<double> m;  // [T, T]

  nlohmann::json to_json() const;
};

/// Incoming attention per month: column sums of a row-stochastic matrix,
/// so the scores total T.
struct ReceivingScore {
  std::vector<std::string> months;
  std::vector<double> score;

  nlohmann::json to_json() const;
};

/// Per-band share of patch-embedding weight magnitude, normalized to sum 1.
struct SpectralImportance {
  std::vector<std::string> bands;
  std::vector<double> score;

  nlohmann::json to_json() const;
};

/// Collapse captured token attention [B, heads, N, N] into a T x T month
/// matrix: mean over batch, heads and all token pairs within each month pair,
/// rows renormalized. Only meaningful with time-indexed tokens, so
/// FLATTENED_CHANNELS mode is rejected.
TemporalAttentionMatrix temporal_attention(const Tensor<float>& attention, int64_t t,
                                           int64_t layer, InputMode mode);

ReceivingScore receiving_score(const TemporalAttentionMatrix& m);

/// L2 norm of the patch-embedding weights feeding each spectral band, summed
/// over time steps in FLATTENED_CHANNELS mode (t-major channel rule).
SpectralImportance spectral_importance(const Tensor<float>& patch_weights, int64_t c,
                                       int64_t t, InputMode mode,
                                       const std::vector<std::string>& band_names);

/// Linear grayscale export: [lo, hi] maps to [0, 65535]. A JSON sidecar
/// `<path>.json` records the value range and units.
void write_pgm16(const std::filesystem::path& path, const Tensor<float>& map, double lo,
                 double hi, const std::string& units);

/// Full interpretability pass over the validation split of `manifest`:
/// per-layer temporal attention and receiving scores (aggregated across
/// chips), spectral importance, and a prediction / truth / residual map
/// triple for the first validation chip. Writes report.json and the PGM
/// exports under out_dir and returns the report. Layers are 1-based; an
/// empty list selects taps 2-of-4 and 4-of-4.
nlohmann::json explain(const std::filesystem::path& checkpoint,
                       const DatasetManifest& manifest, std::vector<int64_t> layers,
                       const std::filesystem::path& out_dir);

}  // namespace yieldnet
