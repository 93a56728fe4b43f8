#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "yieldnet/interpret.hpp"
#include "yieldnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace yieldnet;

namespace {

// exit codes: 0 ok, 2 usage/format, 3 numerical, 4 I/O or checkpoint,
// 5 unsupported mode

fs::path resolve_data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("YIELDNET_DATA_ROOT")) return env;
  throw CLI::ValidationError("--data", "no data directory (flag or YIELDNET_DATA_ROOT)");
}

DatasetManifest load_manifest_dir(const fs::path& dir) {
  return read_manifest(dir / "manifest.json");
}

void echo_config(const RunConfig& rc, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "config.json");
  if (!os) throw IoError("cannot write " + (out_dir / "config.json").string());
  os << rc.to_json().dump(2) << "\n";
}

int run_gen(const std::string& out, int64_t chips, int64_t size,
            std::vector<int32_t> years, std::vector<int32_t> val_years, uint64_t seed) {
  if (chips < 1) throw ConfigError("gen: --chips must be >= 1");
  if (size < 16 || size % 16 != 0)
    throw ConfigError("gen: --size must be a positive multiple of 16");
  if (years.empty()) throw ConfigError("gen: --years must list at least one year");
  if (val_years.empty()) val_years = {years.back()};

  GenParams gp;
  gp.h = gp.w = size;
  gp.validate();

  fs::path root = out;
  fs::create_directories(root);
  DatasetManifest m;
  m.root = root;
  m.val_years = val_years;
  for (int32_t year : years)
    for (int64_t i = 0; i < chips; ++i) {
      std::string id = "chip_" + std::to_string(year) + "_" + std::to_string(i);
      uint64_t s = seed * 1000003ULL + uint64_t(year) * 10007ULL + uint64_t(i);
      double lat = 49.0 + 0.25 * double(i % 8);
      double lon = -107.0 + 0.25 * double(i / 8);
      write_chip(synthesize_chip(s, gp, id, year, lat, lon), root / (id + ".cyp"));
      m.chips.push_back({id, year, id + ".cyp"});
    }
  write_manifest(m, root / "manifest.json");

  auto [train_split, val_split] = split_by_year(m, m.val_years);
  (void)val_split;
  write_stats(compute_stats(m, train_split), root / "stats.json");

  nlohmann::json summary = {{"chips", m.chips.size()},
                            {"size", size},
                            {"years", years},
                            {"val_years", val_years},
                            {"seed", seed},
                            {"manifest", (root / "manifest.json").string()}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_train(const RunConfig& rc, const std::string& data, const std::string& out,
              const std::string& resume) {
  DatasetManifest m = load_manifest_dir(resolve_data_dir(data));
  echo_config(rc, out);
  std::optional<fs::path> res;
  if (!resume.empty()) res = resume;
  TrainResult r = train(m, rc, out, res);
  nlohmann::json summary = {{"best_r2", r.best_r2},
                            {"best_checkpoint", r.best_checkpoint.string()},
                            {"last_checkpoint", r.last_checkpoint.string()},
                            {"epochs_run", r.epoch_losses.size()}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& split,
             int64_t batch) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  DatasetManifest m = load_manifest_dir(resolve_data_dir(data));
  Dataset ds = load_dataset(m, lc.meta.stats, lc.meta.config.model.encoder.mode);
  const std::vector<Sample>* samples;
  if (split == "train")
    samples = &ds.train;
  else if (split == "val")
    samples = &ds.val;
  else
    throw ConfigError("eval: --split must be train or val");
  if (samples->empty()) throw IoError("eval: the requested split has no chips");
  EvalReport r = evaluate_split(*lc.model, *samples, lc.meta.stats, batch, split);
  std::cout << r.to_json().dump(2) << "\n";
  return 0;
}

int run_predict(const std::string& ckpt, const std::string& chip_path,
                const std::string& prefix) {
  LoadedCheckpoint lc = load_checkpoint(ckpt);
  const RunConfig& rc = lc.meta.config;
  Chip chip = read_chip(chip_path);
  const auto& in = rc.model.input;
  if (chip.header.t != in.t || chip.header.c != in.c || chip.header.h != in.h ||
      chip.header.w != in.w)
    throw ConfigError("predict: chip extents do not match the checkpoint's input shape");

  Tensor<float> input =
      flatten_to_input(normalize(chip, lc.meta.stats.bands), rc.model.encoder.mode);
  input.shape.insert(input.shape.begin(), 1);
  std::vector<std::array<float, 2>> ll = {
      {float(chip.header.lat), float(chip.header.lon)}};
  Graph<float> g;
  std::mt19937_64 dummy(0);
  auto fw = lc.model->forward(g, input, false, false, dummy,
                              rc.model.encoder.location_embedding ? &ll : nullptr);

  Tensor<float> pred = g.val(fw.main_pred);
  pred.shape = {in.h, in.w};
  const YieldStats& ys = lc.meta.stats.yield;
  // export clamp: yields cannot be negative
  for (auto& v : pred.data) v = std::max(0.0f, float(destandardize_yield(v, ys)));
  const Tensor<float>& truth = chip.yield_map;
  Tensor<float> residual(pred.shape);
  double lo = pred[0], hi = pred[0], rmax = 0, se = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    residual[i] = pred[i] - truth[i];
    lo = std::min({lo, double(pred[i]), double(truth[i])});
    hi = std::max({hi, double(pred[i]), double(truth[i])});
    rmax = std::max(rmax, std::abs(double(residual[i])));
    se += double(residual[i]) * double(residual[i]);
  }
  if (!(hi > lo)) hi = lo + 1.0;
  if (rmax <= 0) rmax = 1.0;
  fs::path parent = fs::path(prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_pgm16(prefix + ".prediction.pgm", pred, lo, hi, "kg/ha");
  write_pgm16(prefix + ".truth.pgm", truth, lo, hi, "kg/ha");
  write_pgm16(prefix + ".residual.pgm", residual, -rmax, rmax, "kg/ha");

  nlohmann::json summary = {{"chip_id", chip.header.chip_id},
                            {"height", in.h},
                            {"width", in.w},
                            {"rmse_kg_ha", std::sqrt(se / double(pred.numel()))},
                            {"residual_convention", "prediction - truth"},
                            {"files",
                             {{"prediction", prefix + ".prediction.pgm"},
                              {"truth", prefix + ".truth.pgm"},
                              {"residual", prefix + ".residual.pgm"}}}};
  std::ofstream os(prefix + ".summary.json");
  if (!os) throw IoError("cannot write " + prefix + ".summary.json");
  os << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_explain(const std::string& ckpt, const std::string& data,
                const std::vector<int64_t>& layers, const std::string& out) {
  DatasetManifest m = load_manifest_dir(resolve_data_dir(data));
  nlohmann::json report = explain(ckpt, m, layers, out);
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pixel-wise crop yield estimation from multi-temporal chips"};
  app.require_subcommand(1);
  int64_t threads = 1;
  app.add_option("--threads", threads, "worker cap (all math is single threaded)")
      ->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen", "synthesize a dataset with manifest and stats");
  std::string gen_out;
  int64_t gen_chips = 8, gen_size = 224;
  std::vector<int32_t> gen_years = {2019, 2020, 2021}, gen_val_years;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--chips", gen_chips, "chips per year");
  gen->add_option("--size", gen_size, "chip height and width, multiple of 16");
  gen->add_option("--years", gen_years, "years to generate")->delimiter(',');
  gen->add_option("--val-years", gen_val_years,
                  "validation years (default: last listed year)")
      ->delimiter(',');
  gen->add_option("--seed", gen_seed, "generator seed");

  auto* tr = app.add_subcommand("train", "train a model from a JSON config");
  std::string tr_config, tr_data, tr_out, tr_resume, tr_loss;
  int64_t tr_epochs = 0, tr_batch = 0;
  double tr_lr_max = 0, tr_aug = -1;
  uint64_t tr_seed = 0;
  tr->add_option("--config", tr_config, "run config JSON (defaults apply if omitted)");
  tr->add_option("--data", tr_data, "dataset directory with manifest.json");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  auto* o_epochs = tr->add_option("--epochs", tr_epochs, "override train.epochs");
  auto* o_batch = tr->add_option("--batch-size", tr_batch, "override train.batch_size");
  auto* o_lr = tr->add_option("--lr-max", tr_lr_max, "override train.lr_max");
  auto* o_aug = tr->add_option("--augment-p", tr_aug, "override train.augment_p");
  auto* o_seed = tr->add_option("--seed", tr_seed, "override train.seed");
  auto* o_loss = tr->add_option("--loss", tr_loss, "override loss mode: MSE|HUBER|MSE_AUX");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "val";
  int64_t ev_batch = 8;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset directory with manifest.json");
  ev->add_option("--split", ev_split, "train or val");
  ev->add_option("--batch-size", ev_batch, "eval batch size")->check(CLI::PositiveNumber);

  auto* pr = app.add_subcommand("predict", "dense yield maps for one chip");
  std::string pr_ckpt, pr_chip, pr_out;
  pr->add_option("--ckpt", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--chip", pr_chip, "chip file (.cyp)")->required();
  pr->add_option("--out", pr_out, "output path prefix")->required();

  auto* ex = app.add_subcommand("explain", "attention and spectral analyses");
  std::string ex_ckpt, ex_data, ex_out;
  std::vector<int64_t> ex_layers;
  ex->add_option("--ckpt", ex_ckpt, "checkpoint path")->required();
  ex->add_option("--data", ex_data, "dataset directory with manifest.json");
  ex->add_option("--layers", ex_layers, "1-based transformer layers (default: taps 2 and 4)")
      ->delimiter(',');
  ex->add_option("--out", ex_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return run_gen(gen_out, gen_chips, gen_size, gen_years, gen_val_years,
                             gen_seed);
    if (*tr) {
      RunConfig rc = tr_config.empty() ? RunConfig{} : RunConfig::load(tr_config);
      if (o_epochs->count()) rc.train.epochs = tr_epochs;
      if (o_batch->count()) rc.train.batch_size = tr_batch;
      if (o_lr->count()) rc.train.lr_max = tr_lr_max;
      if (o_aug->count()) rc.train.augment_p = tr_aug;
      if (o_seed->count()) rc.train.seed = tr_seed;
      if (o_loss->count()) rc.loss.mode = loss_mode_from_string(tr_loss);
      rc.validate();
      return run_train(rc, tr_data, tr_out, tr_resume);
    }
    if (*ev) return run_eval(ev_ckpt, ev_data, ev_split, ev_batch);
    if (*pr) return run_predict(pr_ckpt, pr_chip, pr_out);
    if (*ex) return run_explain(ex_ckpt, ex_data, ex_layers, ex_out);
  } catch (const UnsupportedModeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {  // config, format, validation, usage
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
