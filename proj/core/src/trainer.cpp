#include "yieldnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "yieldnet/errors.hpp"

namespace yieldnet {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index) {
  return splitmix64(splitmix64(seed ^ (stream * 0x9e3779b97f4a7c15ULL)) + index);
}

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("checkpoint: truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

uint64_t read_u64(std::istream& is) {
  uint64_t lo = read_u32(is);
  uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

void write_f32_block(std::ostream& os, const float* p, int64_t n) {
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(p), n * 4);  // little-endian host
}

void read_f32_block(std::istream& is, float* p, int64_t n) {
  is.read(reinterpret_cast<char*>(p), n * 4);
  if (!is) throw FormatError("checkpoint: truncated payload");
}

struct Batch {
  Tensor<float> input;
  Tensor<float> target;  // [B, 1, H, W]
  std::vector<std::array<float, 2>> latlon;
};

Batch make_batch(const std::vector<Sample>& samples, const std::vector<int64_t>& idx,
                 size_t first, size_t count, const InputSpec& in, InputMode mode,
                 double augment_p, uint64_t seed, int64_t epoch) {
  Batch b;
  int64_t bt = static_cast<int64_t>(count);
  b.input = Tensor<float>(mode == InputMode::kPerTimestep
                              ? std::vector<int64_t>{bt, in.t, in.c, in.h, in.w}
                              : std::vector<int64_t>{bt, in.c * in.t, in.h, in.w});
  b.target = Tensor<float>({bt, 1, in.h, in.w});
  int64_t in_sz = b.input.numel() / bt;
  int64_t tg_sz = in.h * in.w;
  for (size_t k = 0; k < count; ++k) {
    const Sample& s = samples[idx[first + k]];
    Tensor<float> x = s.input;
    Tensor<float> y = s.target;
    if (augment_p > 0) {
      // seeded per (epoch, chip index) so the schedule is order-independent
      std::mt19937_64 arng(derive_seed(seed, 1, uint64_t(epoch) * 1000003 + idx[first + k]));
      augment(x, y, augment_p, arng);
    }
    std::memcpy(b.input.ptr() + k * in_sz, x.ptr(), in_sz * sizeof(float));
    std::memcpy(b.target.ptr() + k * tg_sz, y.ptr(), tg_sz * sizeof(float));
    b.latlon.push_back({s.lat, s.lon});
  }
  return b;
}

int build_loss(Graph<float>& g, const YieldModel<float>::Forward& fw, const Tensor<float>& target,
               const LossConfig& lc, double* main_out, double* aux_out) {
  int main_l, loss;
  switch (lc.mode) {
    case LossMode::kMse:
      loss = main_l = g.mse_loss(fw.main_pred, target);
      break;
    case LossMode::kHuber:
      loss = main_l = g.huber_loss(fw.main_pred, target, float(lc.huber_delta));
      break;
    case LossMode::kMseAux: {
      main_l = g.mse_loss(fw.main_pred, target);
      int aux_l = g.mse_loss(fw.aux_pred, target);
      loss = g.add_scaled(main_l, aux_l, float(lc.aux_weight));
      if (aux_out) *aux_out = g.val(aux_l)[0];
      break;
    }
    default:
      throw ConfigError("bad loss mode");
  }
  if (main_out) *main_out = g.val(main_l)[0];
  return loss;
}

}  // namespace

double cosine_lr(int64_t t, int64_t total, double lr_max, double lr_min) {
  if (total < 1 || t < 0 || t > total) throw ConfigError("cosine_lr: step out of range");
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * double(t) / double(total)));
}

AdamState make_adam_state(const ParamStore<float>& params) {
  AdamState st;
  st.m.resize(params.size());
  st.v.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.at(static_cast<int>(i));
    if (!e.trainable) continue;
    st.m[i] = Tensor<float>(e.value.shape);
    st.v[i] = Tensor<float>(e.value.shape);
  }
  return st;
}

void adamw_step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads,
                AdamState& state, double lr, const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ValidationError("adamw_step: state size mismatch");
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, double(state.step));
  const double bc2 = 1.0 - std::pow(b2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& e = params.at(static_cast<int>(i));
    if (!e.trainable) continue;
    if (!grads[i].same_shape(e.value))
      throw ValidationError("adamw_step: gradient shape mismatch for " + e.name);
    const double wd = e.decay ? cfg.weight_decay : 0.0;
    float* th = e.value.ptr();
    float* m = state.m[i].ptr();
    float* v = state.v[i].ptr();
    const float* g = grads[i].ptr();
    for (int64_t k = 0; k < e.value.numel(); ++k) {
      double gk = g[k];
      double mk = b1 * m[k] + (1.0 - b1) * gk;
      double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = float(mk);
      v[k] = float(vk);
      double mhat = mk / bc1;
      double vhat = vk / bc2;
      th[k] = float(th[k] - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * th[k]));
    }
  }
}

Dataset load_dataset(const DatasetManifest& manifest, const DatasetStats& stats,
                     InputMode mode) {
  Dataset ds;
  ds.stats = stats;
  auto [train, val] = split_by_year(manifest, manifest.val_years);
  auto load = [&](const std::vector<ManifestEntry>& entries, std::vector<Sample>& out) {
    for (const auto& me : entries) {
      Chip chip = read_chip(manifest.root / me.path);
      Sample s;
      s.chip_id = chip.header.chip_id;
      s.input = flatten_to_input(normalize(chip, stats.bands), mode);
      s.target = standardize_yield_map(chip.yield_map, stats.yield);
      s.lat = float(chip.header.lat);
      s.lon = float(chip.header.lon);
      out.push_back(std::move(s));
    }
  };
  load(train, ds.train);
  load(val, ds.val);
  return ds;
}

void save_checkpoint(const std::filesystem::path& path, const YieldModel<float>& model,
                     const AdamState& adam, const CheckpointMeta& meta) {
  nlohmann::json jparams = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& e : model.params().entries()) {
    jparams.push_back({{"name", e.name},
                       {"shape", e.value.shape},
                       {"offset", offset},
                       {"trainable", e.trainable},
                       {"decay", e.decay}});
    offset += e.value.numel();
  }
  nlohmann::json j = {{"config", meta.config.to_json()},
                      {"stats",
                       {{"band_names", meta.stats.bands.band_names},
                        {"means", meta.stats.bands.means},
                        {"stds", meta.stats.bands.stds},
                        {"yield_mean", meta.stats.yield.mean},
                        {"yield_std", meta.stats.yield.std}}},
                      {"epochs_done", meta.epochs_done},
                      {"step", meta.step},
                      {"best_r2", meta.best_r2},
                      {"params", jparams}};
  std::string js = j.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  os.write(kCheckpointMagic, 4);
  write_u32(os, kCheckpointVersion);
  write_u64(os, js.size());
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& e : model.params().entries())
    write_f32_block(os, e.value.ptr(), e.value.numel());
  for (size_t i = 0; i < model.params().size(); ++i) {
    if (!model.params().at(static_cast<int>(i)).trainable) continue;
    write_f32_block(os, adam.m[i].ptr(), adam.m[i].numel());
    write_f32_block(os, adam.v[i].ptr(), adam.v[i].numel());
  }
  if (!os) throw IoError("checkpoint write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic");
  uint32_t ver = read_u32(is);
  if (ver != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  uint64_t jlen = read_u64(is);
  std::string js(jlen, '\0');
  is.read(js.data(), static_cast<std::streamsize>(jlen));
  if (!is) throw FormatError("checkpoint: truncated manifest");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest parse error: ") + e.what());
  }

  LoadedCheckpoint lc;
  lc.meta.config = RunConfig::from_json(j.at("config"));
  const auto& jst = j.at("stats");
  lc.meta.stats.bands.band_names = jst.at("band_names").get<std::vector<std::string>>();
  lc.meta.stats.bands.means = jst.at("means").get<std::vector<double>>();
  lc.meta.stats.bands.stds = jst.at("stds").get<std::vector<double>>();
  lc.meta.stats.yield.mean = jst.at("yield_mean").get<double>();
  lc.meta.stats.yield.std = jst.at("yield_std").get<double>();
  lc.meta.epochs_done = j.at("epochs_done").get<int64_t>();
  lc.meta.step = j.at("step").get<int64_t>();
  lc.meta.best_r2 = j.at("best_r2").get<double>();

  lc.model = std::make_unique<YieldModel<float>>(lc.meta.config.model);
  const auto& jparams = j.at("params");
  if (jparams.size() != lc.model->params().size())
    throw FormatError("checkpoint: parameter count mismatch");
  for (size_t i = 0; i < lc.model->params().size(); ++i) {
    auto& e = lc.model->params().at(static_cast<int>(i));
    if (jparams[i].at("name").get<std::string>() != e.name ||
        jparams[i].at("shape").get<std::vector<int64_t>>() != e.value.shape)
      throw FormatError("checkpoint: parameter layout mismatch at " + e.name);
  }
  for (auto& e : lc.model->params().entries()) read_f32_block(is, e.value.ptr(), e.value.numel());
  lc.adam = make_adam_state(lc.model->params());
  lc.adam.step = lc.meta.step;
  for (size_t i = 0; i < lc.model->params().size(); ++i) {
    if (!lc.model->params().at(static_cast<int>(i)).trainable) continue;
    read_f32_block(is, lc.adam.m[i].ptr(), lc.adam.m[i].numel());
    read_f32_block(is, lc.adam.v[i].ptr(), lc.adam.v[i].numel());
  }
  return lc;
}

EvalReport evaluate_split(YieldModel<float>& model, const std::vector<Sample>& samples,
                          const DatasetStats& stats, int64_t batch_size,
                          const std::string& split_name) {
  if (samples.empty()) throw ValidationError("evaluate: empty split");
  const auto& in = model.config().input;
  MetricAccumulator acc;
  std::vector<int64_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  std::mt19937_64 dummy(0);
  for (size_t first = 0; first < samples.size(); first += batch_size) {
    size_t count = std::min<size_t>(batch_size, samples.size() - first);
    Batch b = make_batch(samples, order, first, count, in, model.config().encoder.mode,
                         0.0, 0, 0);
    Graph<float> g;
    auto fw = model.forward(g, b.input, false, false, dummy,
                            model.config().encoder.location_embedding ? &b.latlon : nullptr);
    const auto& pred = g.val(fw.main_pred);
    for (int64_t i = 0; i < pred.numel(); ++i) acc.add(b.target[i], pred[i]);
  }
  return destandardized_report(acc, stats.yield, split_name);
}

TrainResult train(const DatasetManifest& manifest, const RunConfig& rc,
                  const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume, int64_t stop_after) {
  rc.validate();
  std::filesystem::create_directories(out_dir);

  DatasetStats stats;
  auto stats_path = manifest.root / "stats.json";
  if (std::filesystem::exists(stats_path)) {
    stats = read_stats(stats_path);
  } else {
    auto [train_entries, val_entries] = split_by_year(manifest, manifest.val_years);
    (void)val_entries;
    stats = compute_stats(manifest, train_entries);
  }

  Dataset ds = load_dataset(manifest, stats, rc.model.encoder.mode);
  if (ds.train.empty() || ds.val.empty()) throw ConfigError("train: empty split");
  {
    const auto& s = ds.train.front();
    const auto& in = rc.model.input;
    int64_t expect = in.t * in.c * in.h * in.w;
    if (s.input.numel() != expect)
      throw ConfigError("train: chip extents do not match model.input");
  }

  std::unique_ptr<YieldModel<float>> model;
  AdamState adam;
  int64_t start_epoch = 0;
  double best_r2 = -std::numeric_limits<double>::infinity();
  if (resume) {
    auto lc = load_checkpoint(*resume);
    if (lc.meta.config.to_json() != rc.to_json())
      throw ConfigError("resume: checkpoint config differs from the requested config");
    model = std::move(lc.model);
    adam = std::move(lc.adam);
    start_epoch = lc.meta.epochs_done;
    best_r2 = lc.meta.best_r2;
  } else {
    model = std::make_unique<YieldModel<float>>(rc.model);
    model->init(rc.train.seed);
    adam = make_adam_state(model->params());
  }

  auto log_path = out_dir / "train_log.jsonl";
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());

  TrainResult res;
  res.best_checkpoint = out_dir / "best.ckpt";
  res.last_checkpoint = out_dir / "last.ckpt";
  res.best_r2 = best_r2;

  const auto& tc = rc.train;
  std::vector<int64_t> order(ds.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

  int64_t end_epoch = stop_after > 0 ? std::min(stop_after, tc.epochs) : tc.epochs;
  for (int64_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    double lr = cosine_lr(epoch, tc.epochs, tc.lr_max, tc.lr_min);
    std::mt19937_64 shuffle_rng(derive_seed(tc.seed, 2, uint64_t(epoch)));
    // shuffle from identity so the permutation depends only on (seed, epoch)
    // and a resumed run sees the same batches as an uninterrupted one
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0, main_sum = 0, aux_sum = 0;
    int64_t batches = 0;
    for (size_t first = 0; first < order.size(); first += tc.batch_size, ++batches) {
      size_t count = std::min<size_t>(tc.batch_size, order.size() - first);
      Batch b = make_batch(ds.train, order, first, count, rc.model.input,
                           rc.model.encoder.mode, tc.augment_p, tc.seed, epoch);
      Graph<float> g;
      std::mt19937_64 drop_rng(derive_seed(tc.seed, 3, uint64_t(epoch) * 1000003 + batches));
      auto fw = model->forward(g, b.input, true, false, drop_rng,
                               rc.model.encoder.location_embedding ? &b.latlon : nullptr);
      double main_l = 0, aux_l = 0;
      int loss = build_loss(g, fw, b.target, rc.loss, &main_l, &aux_l);
      double lv = g.val(loss)[0];
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                           " batch " + std::to_string(batches + 1));
      g.backward(loss);
      auto grads = model->collect_grads(g, fw);
      for (size_t i = 0; i < grads.size(); ++i)
        for (float gv : grads[i].data)
          if (!std::isfinite(gv))
            throw NumericError("non-finite gradient in parameter group " +
                               model->params().at(static_cast<int>(i)).name);
      adamw_step(model->params(), grads, adam, lr, tc);
      loss_sum += lv;
      main_sum += main_l;
      aux_sum += aux_l;
    }
    double train_loss = loss_sum / double(batches);
    res.epoch_losses.push_back(train_loss);

    EvalReport val = evaluate_split(*model, ds.val, stats, tc.batch_size, "val");

    CheckpointMeta meta;
    meta.config = rc;
    meta.stats = stats;
    meta.epochs_done = epoch + 1;
    meta.step = adam.step;
    if (val.r2 > res.best_r2) {
      res.best_r2 = val.r2;
      meta.best_r2 = res.best_r2;
      save_checkpoint(res.best_checkpoint, *model, adam, meta);
    }
    meta.best_r2 = res.best_r2;
    save_checkpoint(res.last_checkpoint, *model, adam, meta);

    nlohmann::json line = {{"epoch", epoch + 1},
                           {"lr", lr},
                           {"train_loss", train_loss},
                           {"val", val.to_json()}};
    if (rc.loss.mode == LossMode::kMseAux) {
      line["main_loss"] = main_sum / double(batches);
      line["aux_loss"] = aux_sum / double(batches);
    }
    log << line.dump() << "\n";
    log.flush();
  }
  return res;
}

}  // namespace yieldnet
