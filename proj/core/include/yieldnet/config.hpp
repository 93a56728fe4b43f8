#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "yieldnet/chip.hpp"

namespace yieldnet {

/// Shape of one model input sample. The embedding tables are sized from this,
/// so a checkpoint is tied to the input extent it was trained on.
struct InputSpec {
  int64_t t = 5;
  int64_t c = 6;
  int64_t h = 224;
  int64_t w = 224;
};

struct EncoderConfig {
  int64_t patch_size = 16;
  int64_t embed_dim = 128;
  int64_t depth = 8;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  // Non-decreasing, in [1, depth]. Repeats are allowed so shallow test
  // configs can still export four taps.
  std::vector<int64_t> tap_layers = {2, 4, 6, 8};
  InputMode mode = InputMode::kPerTimestep;
  bool location_embedding = false;

  void validate() const;
};

struct DecoderConfig {
  int64_t fpn_channels = 64;
  std::vector<int64_t> psp_pool_sizes = {1, 2, 3, 6};
  // Fused FPN level exported to the auxiliary head, 0 = finest (4x) level.
  int64_t aux_level = 1;

  void validate() const;
};

struct HeadConfig {
  double dropout = 0.1;

  void validate() const;
};

struct ModelConfig {
  InputSpec input;
  EncoderConfig encoder;
  DecoderConfig decoder;
  HeadConfig head;

  void validate() const;
  int64_t grid_h() const { return input.h / encoder.patch_size; }
  int64_t grid_w() const { return input.w / encoder.patch_size; }
};

enum class LossMode { kMse, kHuber, kMseAux };

LossMode loss_mode_from_string(const std::string& s);
std::string to_string(LossMode m);

struct LossConfig {
  LossMode mode = LossMode::kMseAux;
  double huber_delta = 1.0;
  double aux_weight = 0.2;

  void validate() const;
};

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 8;
  // The reference schedule starts at 5e-6 for fine-tuning a large pretrained
  // encoder; training this model from scratch needs a conventional rate.
  double lr_max = 3e-4;
  double lr_min = 1e-8;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double augment_p = 0.2;
  uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  LossConfig loss;

  void validate() const;
  nlohmann::json to_json() const;
  /// Strict parse: unknown keys anywhere reject with ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

}  // namespace yieldnet
