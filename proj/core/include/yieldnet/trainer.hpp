#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "yieldnet/config.hpp"
#include "yieldnet/metrics.hpp"
#include "yieldnet/model.hpp"

namespace yieldnet {

/// lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / total)); stepped per epoch.
double cosine_lr(int64_t t, int64_t total, double lr_max, double lr_min);

/// First/second Adam moments aligned with the ParamStore entry order.
/// Non-trainable entries keep empty tensors.
struct AdamState {
  std::vector<Tensor<float>> m, v;
  int64_t step = 0;
};

AdamState make_adam_state(const ParamStore<float>& params);

/// Decoupled-weight-decay Adam. Decay is skipped for entries registered with
/// decay = false (biases, norm scales/shifts, BatchNorm buffers).
void adamw_step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads,
                AdamState& state, double lr, const TrainConfig& cfg);

/// One preloaded, normalized sample: standardized input per the tokenization
/// mode and a standardized [H, W] yield target.
struct Sample {
  std::string chip_id;
  Tensor<float> input;
  Tensor<float> target;
  float lat = 0, lon = 0;
};

struct Dataset {
  std::vector<Sample> train, val;
  DatasetStats stats;
};

Dataset load_dataset(const DatasetManifest& manifest, const DatasetStats& stats,
                     InputMode mode);

struct CheckpointMeta {
  RunConfig config;
  DatasetStats stats;     // standardization constants the model was trained with
  int64_t epochs_done = 0;
  int64_t step = 0;
  double best_r2 = 0.0;
};

inline constexpr char kCheckpointMagic[4] = {'Y', 'N', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const YieldModel<float>& model,
                     const AdamState& adam, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::unique_ptr<YieldModel<float>> model;
  AdamState adam;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  double best_r2 = 0.0;
  std::vector<double> epoch_losses;
};

/// Full training loop. Writes `train_log.jsonl`, `best.ckpt` and `last.ckpt`
/// under out_dir. Deterministic per (config, seed, thread count); resuming
/// from `last.ckpt` continues the identical trajectory. stop_after > 0 halts
/// once that many total epochs are done; the cosine schedule still spans
/// train.epochs, so a stopped run resumes onto the same trajectory.
TrainResult train(const DatasetManifest& manifest, const RunConfig& rc,
                  const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  int64_t stop_after = -1);

/// Eval-mode forward over a sample list with global pixel pooling.
EvalReport evaluate_split(YieldModel<float>& model, const std::vector<Sample>& samples,
                          const DatasetStats& stats, int64_t batch_size,
                          const std::string& split_name);

}  // namespace yieldnet
