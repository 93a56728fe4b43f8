#include "yieldnet/interpret.hpp"

#include <cmath>
#include <fstream>

#include "yieldnet/errors.hpp"
#include "yieldnet/trainer.hpp"

namespace yieldnet {

namespace {

std::vector<std::string> month_labels(int64_t t) {
  if (t == static_cast<int64_t>(kMonthNames.size())) return kMonthNames;
  std::vector<std::string> out;
  for (int64_t i = 0; i < t; ++i) out.push_back("t" + std::to_string(i));
  return out;
}

/// Mean attention mass per (source month, target month) token-pair group,
/// before row renormalization.
Tensor<double> group_mean(const Tensor<float>& att, int64_t t) {
  if (att.rank() != 4 || att.dim(2) != att.dim(3))
    throw ValidationError("temporal_attention: expected [B, heads, N, N] attention");
  const int64_t b = att.dim(0), heads = att.dim(1), n = att.dim(2);
  if (t < 1 || n % t != 0)
    throw ValidationError("temporal_attention: token count not divisible by T");
  const int64_t pf = n / t;
  Tensor<double> sums({t, t});
  const float* a = att.ptr();
  for (int64_t bh = 0; bh < b * heads; ++bh, a += n * n)
    for (int64_t i = 0; i < n; ++i) {
      double* row = sums.ptr() + (i / pf) * t;
      for (int64_t j = 0; j < n; ++j) row[j / pf] += a[i * n + j];
    }
  const double pairs = double(b * heads) * double(pf) * double(pf);
  for (auto& v : sums.data) v /= pairs;
  return sums;
}

TemporalAttentionMatrix finish_matrix(Tensor<double> sums, int64_t t, int64_t layer) {
  TemporalAttentionMatrix m;
  m.layer = layer;
  m.months = month_labels(t);
  for (int64_t s = 0; s < t; ++s) {
    double* row = sums.ptr() + s * t;
    double total = 0;
    for (int64_t j = 0; j < t; ++j) total += row[j];
    if (total <= 0) throw ValidationError("temporal_attention: non-positive row mass");
    for (int64_t j = 0; j < t; ++j) row[j] /= total;
  }
  m.m = std::move(sums);
  return m;
}

}  // namespace

nlohmann::json TemporalAttentionMatrix::to_json() const {
  const int64_t t = m.dim(0);
  nlohmann::json rows = nlohmann::json::array();
  for (int64_t s = 0; s < t; ++s)
    rows.push_back(std::vector<double>(m.ptr() + s * t, m.ptr() + (s + 1) * t));
  return {{"layer", layer}, {"months", months}, {"matrix", rows}};
}

nlohmann::json ReceivingScore::to_json() const {
  return {{"months", months}, {"score", score}};
}

nlohmann::json SpectralImportance::to_json() const {
  return {{"bands", bands}, {"score", score}};
}

TemporalAttentionMatrix temporal_attention(const Tensor<float>& attention, int64_t t,
                                           int64_t layer, InputMode mode) {
  if (mode != InputMode::kPerTimestep)
    throw UnsupportedModeError(
        "temporal attention needs time-indexed tokens; FLATTENED_CHANNELS folds time "
        "into the channel axis");
  return finish_matrix(group_mean(attention, t), t, layer);
}

ReceivingScore receiving_score(const TemporalAttentionMatrix& m) {
  const int64_t t = m.m.dim(0);
  ReceivingScore r;
  r.months = m.months;
  r.score.assign(t, 0.0);
  for (int64_t s = 0; s < t; ++s)
    for (int64_t j = 0; j < t; ++j) r.score[j] += m.m[s * t + j];
  return r;
}

SpectralImportance spectral_importance(const Tensor<float>& patch_weights, int64_t c,
                                       int64_t t, InputMode mode,
                                       const std::vector<std::string>& band_names) {
  if (patch_weights.rank() != 4)
    throw ValidationError("spectral_importance: expected [D, Cin, p, p] weights");
  const int64_t cin = patch_weights.dim(1);
  const int64_t expect = mode == InputMode::kPerTimestep ? c : c * t;
  if (cin != expect)
    throw ValidationError("spectral_importance: weight channels do not match the config");
  if (static_cast<int64_t>(band_names.size()) != c)
    throw ValidationError("spectral_importance: band name count mismatch");

  std::vector<double> ss(c, 0.0);
  const int64_t d = patch_weights.dim(0), pp = patch_weights.dim(2) * patch_weights.dim(3);
  const float* w = patch_weights.ptr();
  for (int64_t o = 0; o < d; ++o)
    for (int64_t k = 0; k < cin; ++k) {
      // flattened channels are t-major: k = t * C + c
      int64_t band = mode == InputMode::kPerTimestep ? k : k % c;
      for (int64_t x = 0; x < pp; ++x) {
        double v = w[(o * cin + k) * pp + x];
        ss[band] += v * v;
      }
    }
  SpectralImportance si;
  si.bands = band_names;
  si.score.resize(c);
  double total = 0;
  for (int64_t b = 0; b < c; ++b) total += (si.score[b] = std::sqrt(ss[b]));
  if (total <= 0)
    throw ValidationError("spectral_importance: all patch embedding weights are zero");
  for (auto& v : si.score) v /= total;
  return si;
}

void write_pgm16(const std::filesystem::path& path, const Tensor<float>& map, double lo,
                 double hi, const std::string& units) {
  if (map.rank() != 2) throw ValidationError("write_pgm16: expected an [H, W] map");
  if (!(hi > lo)) throw ValidationError("write_pgm16: empty value range");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n65535\n";
  for (float v : map.data) {
    double u = (v - lo) / (hi - lo);
    u = std::min(1.0, std::max(0.0, u));
    auto q = static_cast<uint32_t>(std::lround(u * 65535.0));
    unsigned char b[2] = {static_cast<unsigned char>(q >> 8),
                          static_cast<unsigned char>(q & 0xff)};  // PGM is big-endian
    os.write(reinterpret_cast<const char*>(b), 2);
  }
  if (!os) throw IoError("write failed: " + path.string());
  nlohmann::json side = {{"min", lo}, {"max", hi}, {"units", units},
                         {"encoding", "linear, 0 = min, 65535 = max"}};
  std::ofstream(path.string() + ".json") << side.dump(2) << "\n";
}

nlohmann::json explain(const std::filesystem::path& checkpoint,
                       const DatasetManifest& manifest, std::vector<int64_t> layers,
                       const std::filesystem::path& out_dir) {
  LoadedCheckpoint lc = load_checkpoint(checkpoint);
  const RunConfig& rc = lc.meta.config;
  const auto& ec = rc.model.encoder;
  if (ec.mode != InputMode::kPerTimestep)
    throw UnsupportedModeError("explain: temporal attention needs PER_TIMESTEP tokens");
  // Default to the two middle taps. The last blocks of a pre-norm ViT feed
  // the final tap directly and their attention flattens out once aggregation
  // is done, so the informative mixing patterns live in mid-to-late layers.
  if (layers.empty()) layers = {ec.tap_layers[1], ec.tap_layers[2]};
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int64_t l : layers)
    if (l < 1 || l > ec.depth) throw ConfigError("explain: layer index out of range");

  Dataset ds = load_dataset(manifest, lc.meta.stats, ec.mode);
  if (ds.val.empty()) throw ConfigError("explain: empty validation split");
  std::filesystem::create_directories(out_dir);

  const int64_t t = rc.model.input.t;
  YieldModel<float>& model = *lc.model;
  std::vector<Tensor<double>> sums(layers.size(), Tensor<double>({t, t}));
  std::mt19937_64 dummy(0);
  Tensor<float> example_pred;
  for (size_t ci = 0; ci < ds.val.size(); ++ci) {
    const Sample& s = ds.val[ci];
    Tensor<float> input = s.input;
    input.shape.insert(input.shape.begin(), 1);
    std::vector<std::array<float, 2>> ll = {{s.lat, s.lon}};
    Graph<float> g;
    auto fw = model.forward(g, input, false, true, dummy,
                            ec.location_embedding ? &ll : nullptr);
    for (size_t li = 0; li < layers.size(); ++li) {
      Tensor<double> gm = group_mean(fw.attention[layers[li] - 1], t);
      for (int64_t k = 0; k < t * t; ++k) sums[li][k] += gm[k];
    }
    if (ci == 0) {
      example_pred = g.val(fw.main_pred);
      example_pred.shape = {rc.model.input.h, rc.model.input.w};
    }
  }

  nlohmann::json report;
  report["split"] = "val";
  report["chips"] = ds.val.size();
  report["layers"] = nlohmann::json::array();
  for (size_t li = 0; li < layers.size(); ++li) {
    for (auto& v : sums[li].data) v /= double(ds.val.size());
    TemporalAttentionMatrix m = finish_matrix(std::move(sums[li]), t, layers[li]);
    nlohmann::json jl = m.to_json();
    jl["receiving_score"] = receiving_score(m).to_json();
    report["layers"].push_back(std::move(jl));
  }

  const auto& pw = model.params().at("encoder.patch_embed.w").value;
  report["spectral_importance"] =
      spectral_importance(pw, rc.model.input.c, t, ec.mode, lc.meta.stats.bands.band_names)
          .to_json();

  // example triple in kg/ha, prediction and truth on a shared gray scale
  const Sample& ex = ds.val.front();
  const YieldStats& ys = lc.meta.stats.yield;
  Tensor<float> pred = example_pred, truth = ex.target;
  truth.shape = pred.shape;
  for (auto& v : pred.data) v = float(destandardize_yield(v, ys));
  for (auto& v : truth.data) v = float(destandardize_yield(v, ys));
  Tensor<float> residual(pred.shape);
  double lo = pred[0], hi = pred[0], rmax = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    residual[i] = pred[i] - truth[i];
    lo = std::min({lo, double(pred[i]), double(truth[i])});
    hi = std::max({hi, double(pred[i]), double(truth[i])});
    rmax = std::max(rmax, std::abs(double(residual[i])));
  }
  if (!(hi > lo)) hi = lo + 1.0;
  if (rmax <= 0) rmax = 1.0;
  write_pgm16(out_dir / "prediction.pgm", pred, lo, hi, "kg/ha");
  write_pgm16(out_dir / "truth.pgm", truth, lo, hi, "kg/ha");
  write_pgm16(out_dir / "residual.pgm", residual, -rmax, rmax, "kg/ha");
  report["example"] = {{"chip_id", ex.chip_id},
                       {"residual_convention", "prediction - truth"},
                       {"files",
                        {{"prediction", "prediction.pgm"},
                         {"truth", "truth.pgm"},
                         {"residual", "residual.pgm"}}}};

  std::ofstream os(out_dir / "report.json");
  if (!os) throw IoError("cannot write " + (out_dir / "report.json").string());
  os << report.dump(2) << "\n";
  return report;
}

}  // namespace yieldnet
