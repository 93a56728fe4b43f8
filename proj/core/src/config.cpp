#include "yieldnet/config.hpp"

#include <fstream>

#include "yieldnet/errors.hpp"

namespace yieldnet {

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(ctx + ": unknown key \"" + it.key() + "\"");
  }
}

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void EncoderConfig::validate() const {
  if (patch_size < 1) throw ConfigError("encoder: patch_size must be >= 1");
  if (embed_dim < 1 || depth < 1 || heads < 1 || mlp_ratio < 1)
    throw ConfigError("encoder: dims must be >= 1");
  if (embed_dim % heads != 0) throw ConfigError("encoder: embed_dim % heads != 0");
  if (tap_layers.size() != 4) throw ConfigError("encoder: exactly 4 tap layers required");
  for (size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 1 || tap_layers[i] > depth)
      throw ConfigError("encoder: tap layer out of [1, depth]");
    if (i > 0 && tap_layers[i] < tap_layers[i - 1])
      throw ConfigError("encoder: tap layers must be non-decreasing");
  }
}

void DecoderConfig::validate() const {
  if (fpn_channels < 4 || fpn_channels % 4 != 0)
    throw ConfigError("decoder: fpn_channels must be a positive multiple of 4");
  if (psp_pool_sizes.empty()) throw ConfigError("decoder: psp_pool_sizes empty");
  for (size_t i = 0; i < psp_pool_sizes.size(); ++i) {
    if (psp_pool_sizes[i] < 1) throw ConfigError("decoder: pool size must be >= 1");
    if (i > 0 && psp_pool_sizes[i] <= psp_pool_sizes[i - 1])
      throw ConfigError("decoder: pool sizes must be ascending");
  }
  if (aux_level < 0 || aux_level > 3) throw ConfigError("decoder: aux_level out of [0,3]");
}

void HeadConfig::validate() const {
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("head: dropout out of [0,1)");
}

void ModelConfig::validate() const {
  if (input.t < 1 || input.c < 1 || input.h < 1 || input.w < 1)
    throw ConfigError("input: extents must be >= 1");
  encoder.validate();
  decoder.validate();
  head.validate();
  if (input.h % encoder.patch_size != 0 || input.w % encoder.patch_size != 0)
    throw ConfigError("input extent not divisible by patch_size");
  if (grid_h() % 2 != 0 || grid_w() % 2 != 0)
    throw ConfigError("patch grid must have even extents for the pyramid");
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "mse") return LossMode::kMse;
  if (s == "huber") return LossMode::kHuber;
  if (s == "mse_aux") return LossMode::kMseAux;
  throw ConfigError("unknown loss mode: " + s);
}

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::kMse: return "mse";
    case LossMode::kHuber: return "huber";
    case LossMode::kMseAux: return "mse_aux";
  }
  throw ConfigError("bad loss mode");
}

void LossConfig::validate() const {
  if (huber_delta <= 0) throw ConfigError("loss: huber_delta must be > 0");
  if (aux_weight < 0) throw ConfigError("loss: aux_weight must be >= 0");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr_max > lr_min) || !(lr_min > 0))
    throw ConfigError("train: require lr_max > lr_min > 0");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (augment_p < 0 || augment_p > 1) throw ConfigError("train: augment_p out of [0,1]");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  loss.validate();
}

nlohmann::json RunConfig::to_json() const {
  return nlohmann::json{
      {"model",
       {{"input",
         {{"t", model.input.t}, {"c", model.input.c}, {"h", model.input.h}, {"w", model.input.w}}},
        {"encoder",
         {{"patch_size", model.encoder.patch_size},
          {"embed_dim", model.encoder.embed_dim},
          {"depth", model.encoder.depth},
          {"heads", model.encoder.heads},
          {"mlp_ratio", model.encoder.mlp_ratio},
          {"tap_layers", model.encoder.tap_layers},
          {"mode", to_string(model.encoder.mode)},
          {"location_embedding", model.encoder.location_embedding}}},
        {"decoder",
         {{"fpn_channels", model.decoder.fpn_channels},
          {"psp_pool_sizes", model.decoder.psp_pool_sizes},
          {"aux_level", model.decoder.aux_level}}},
        {"head", {{"dropout", model.head.dropout}}}}},
      {"train",
       {{"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"lr_max", train.lr_max},
        {"lr_min", train.lr_min},
        {"weight_decay", train.weight_decay},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"eps", train.eps},
        {"augment_p", train.augment_p},
        {"seed", train.seed}}},
      {"loss",
       {{"mode", to_string(loss.mode)},
        {"huber_delta", loss.huber_delta},
        {"aux_weight", loss.aux_weight}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig rc;
  check_keys(j, {"model", "train", "loss"}, "config");
  if (j.contains("model")) {
    const auto& jm = j.at("model");
    check_keys(jm, {"input", "encoder", "decoder", "head"}, "model");
    if (jm.contains("input")) {
      const auto& ji = jm.at("input");
      check_keys(ji, {"t", "c", "h", "w"}, "model.input");
      get_if(ji, "t", rc.model.input.t);
      get_if(ji, "c", rc.model.input.c);
      get_if(ji, "h", rc.model.input.h);
      get_if(ji, "w", rc.model.input.w);
    }
    if (jm.contains("encoder")) {
      const auto& je = jm.at("encoder");
      check_keys(je,
                 {"patch_size", "embed_dim", "depth", "heads", "mlp_ratio", "tap_layers",
                  "mode", "location_embedding"},
                 "model.encoder");
      get_if(je, "patch_size", rc.model.encoder.patch_size);
      get_if(je, "embed_dim", rc.model.encoder.embed_dim);
      get_if(je, "depth", rc.model.encoder.depth);
      get_if(je, "heads", rc.model.encoder.heads);
      get_if(je, "mlp_ratio", rc.model.encoder.mlp_ratio);
      get_if(je, "tap_layers", rc.model.encoder.tap_layers);
      if (je.contains("mode"))
        rc.model.encoder.mode = input_mode_from_string(je.at("mode").get<std::string>());
      get_if(je, "location_embedding", rc.model.encoder.location_embedding);
    }
    if (jm.contains("decoder")) {
      const auto& jd = jm.at("decoder");
      check_keys(jd, {"fpn_channels", "psp_pool_sizes", "aux_level"}, "model.decoder");
      get_if(jd, "fpn_channels", rc.model.decoder.fpn_channels);
      get_if(jd, "psp_pool_sizes", rc.model.decoder.psp_pool_sizes);
      get_if(jd, "aux_level", rc.model.decoder.aux_level);
    }
    if (jm.contains("head")) {
      const auto& jh = jm.at("head");
      check_keys(jh, {"dropout"}, "model.head");
      get_if(jh, "dropout", rc.model.head.dropout);
    }
  }
  if (j.contains("train")) {
    const auto& jt = j.at("train");
    check_keys(jt,
               {"epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "beta1",
                "beta2", "eps", "augment_p", "seed"},
               "train");
    get_if(jt, "epochs", rc.train.epochs);
    get_if(jt, "batch_size", rc.train.batch_size);
    get_if(jt, "lr_max", rc.train.lr_max);
    get_if(jt, "lr_min", rc.train.lr_min);
    get_if(jt, "weight_decay", rc.train.weight_decay);
    get_if(jt, "beta1", rc.train.beta1);
    get_if(jt, "beta2", rc.train.beta2);
    get_if(jt, "eps", rc.train.eps);
    get_if(jt, "augment_p", rc.train.augment_p);
    get_if(jt, "seed", rc.train.seed);
  }
  if (j.contains("loss")) {
    const auto& jl = j.at("loss");
    check_keys(jl, {"mode", "huber_delta", "aux_weight"}, "loss");
    if (jl.contains("mode"))
      rc.loss.mode = loss_mode_from_string(jl.at("mode").get<std::string>());
    get_if(jl, "huber_delta", rc.loss.huber_delta);
    get_if(jl, "aux_weight", rc.loss.aux_weight);
  }
  rc.validate();
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return from_json(j);
}

}  // namespace yieldnet
