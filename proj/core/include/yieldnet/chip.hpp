#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "yieldnet/errors.hpp"
#include "yieldnet/tensor.hpp"

namespace yieldnet {

inline constexpr char kChipMagic[4] = {'C', 'Y', 'P', 'C'};
inline constexpr uint16_t kChipFormatVersion = 1;
inline const std::vector<std::string> kDefaultBands = {"BLUE",  "GREEN", "RED",
                                                       "NIR_NARROW", "SWIR1", "SWIR2"};
inline const std::vector<std::string> kMonthNames = {"May", "June", "July", "August",
                                                     "September"};

struct ChipHeader {
  std::string chip_id;
  int32_t year = 0;
  double lat = 0.0;
  double lon = 0.0;
  int64_t t = 5;
  int64_t c = 6;
  int64_t h = 224;
  int64_t w = 224;
  std::vector<std::string> band_names = kDefaultBands;
};

/// One geographic sample: multi-temporal band stack plus a co-registered
/// per-pixel yield map in kg/ha. Bands are raw surface reflectance.
struct Chip {
  ChipHeader header;
  Tensor<float> bands;      // [T, C, H, W]
  Tensor<float> yield_map;  // [H, W]

  void validate() const;
};

struct BandStats {
  std::vector<std::string> band_names;
  std::vector<double> means;
  std::vector<double> stds;
};

struct YieldStats {
  double mean = 0.0;
  double std = 1.0;
};

struct DatasetStats {
  BandStats bands;
  YieldStats yield;
};

struct ManifestEntry {
  std::string chip_id;
  int32_t year = 0;
  std::string path;  // relative to the manifest root
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> chips;
  std::vector<int32_t> val_years;
};

enum class InputMode { kFlattenedChannels, kPerTimestep };

InputMode input_mode_from_string(const std::string& s);
std::string to_string(InputMode m);

// ---- chip file I/O (.cyp) ----
void write_chip(const Chip& chip, const std::filesystem::path& path);
Chip read_chip(const std::filesystem::path& path);

// ---- stats ----
/// Pooled per-band mean and population std over all pixels and time steps of
/// the given chips; also pools the yield map into YieldStats.
DatasetStats compute_stats(const DatasetManifest& manifest,
                           const std::vector<ManifestEntry>& split);
void write_stats(const DatasetStats& s, const std::filesystem::path& path);
DatasetStats read_stats(const std::filesystem::path& path);

/// (band - mean_c) / std_c applied per band over every time step.
Tensor<float> normalize(const Chip& chip, const BandStats& stats);

inline double standardize_yield(double y, const YieldStats& ys) {
  if (ys.std <= 0) throw ValidationError("yield std must be > 0");
  return (y - ys.mean) / ys.std;
}
inline double destandardize_yield(double z, const YieldStats& ys) {
  return z * ys.std + ys.mean;
}
Tensor<float> standardize_yield_map(const Tensor<float>& y, const YieldStats& ys);

/// FLATTENED_CHANNELS packs [T,C,H,W] into [C*T,H,W] with channel
/// k = t*C + c (time-major); PER_TIMESTEP returns the input unchanged.
Tensor<float> flatten_to_input(const Tensor<float>& normalized, InputMode mode);

/// Random horizontal/vertical flips, each with independent probability p,
/// applied jointly to input (any [..,H,W]) and target ([..,H,W]).
void augment(Tensor<float>& input, Tensor<float>& target, double p, std::mt19937_64& rng);

// ---- synthetic generator ----
struct GenParams {
  int64_t t = 5;
  int64_t c = 6;
  int64_t h = 224;
  int64_t w = 224;
  int64_t smooth_radius = 12;
  double y_min = 800.0;   // kg/ha
  double y_max = 4200.0;  // kg/ha
  // July-peaked phenology; NIR/SWIR carry the strongest yield response.
  std::vector<double> phenology = {0.25, 0.60, 1.00, 0.80, 0.30};
  std::vector<double> band_base = {450, 800, 1100, 1500, 1800, 1400};
  std::vector<double> band_gain = {-80, 120, -600, 3500, 800, 650};
  // White per-pixel noise plus a smooth per-(month, band) field. The smooth
  // component cannot be averaged away spatially, so a good model must fuse
  // months and bands weighted by their signal strength.
  double noise_std = 150.0;
  double struct_noise_std = 220.0;
  int64_t struct_radius = 6;

  void validate() const;
};

/// Deterministic per (seed, params): smoothed noise yield field rescaled to
/// [y_min, y_max], bands = base + gain * phenology * (yield / y_max) + noise.
Chip synthesize_chip(uint64_t seed, const GenParams& params, const std::string& chip_id,
                     int32_t year, double lat = 50.5, double lon = -105.0);

// ---- manifest ----
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Year-pure partition; throws ConfigError when either side ends up empty.
std::pair<std::vector<ManifestEntry>, std::vector<ManifestEntry>> split_by_year(
    const DatasetManifest& manifest, const std::vector<int32_t>& val_years);

}  // namespace yieldnet
