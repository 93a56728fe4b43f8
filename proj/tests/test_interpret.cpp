#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "yieldnet/interpret.hpp"
#include "yieldnet/trainer.hpp"

using namespace yieldnet;
namespace fs = std::filesystem;

namespace {

// attention tensor with A[i][j] proportional to per-month column weights
Tensor<float> month_weighted_attention(int64_t b, int64_t heads, int64_t t, int64_t pf,
                                       const std::vector<double>& col_weight) {
  const int64_t n = t * pf;
  double z = 0;
  for (double w : col_weight) z += w * pf;
  Tensor<float> a({b, heads, n, n});
  for (int64_t bh = 0; bh < b * heads; ++bh)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        a[(bh * n + i) * n + j] = float(col_weight[j / pf] / z);
  return a;
}

}  // namespace

TEST_CASE("uniform attention collapses to uniform month matrix") {
  const int64_t t = 5, pf = 4, n = t * pf;
  Tensor<float> a({2, 3, n, n}, 1.0f / float(n));
  auto m = temporal_attention(a, t, 2, InputMode::kPerTimestep);
  CHECK(m.layer == 2);
  CHECK(m.months == kMonthNames);
  for (auto v : m.m.data) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
  auto r = receiving_score(m);
  for (auto v : r.score) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("block-diagonal attention gives the identity month matrix") {
  const int64_t t = 4, pf = 3, n = t * pf;
  Tensor<float> a({1, 2, n, n});
  for (int64_t bh = 0; bh < 2; ++bh)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        a[(bh * n + i) * n + j] = (i / pf == j / pf) ? 1.0f / float(pf) : 0.0f;
  auto m = temporal_attention(a, t, 1, InputMode::kPerTimestep);
  for (int64_t s = 0; s < t; ++s)
    for (int64_t j = 0; j < t; ++j)
      CHECK(m.m[s * t + j] == doctest::Approx(s == j ? 1.0 : 0.0).epsilon(1e-12));
  auto r = receiving_score(m);
  for (auto v : r.score) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a doubled column wins the receiving score") {
  auto a = month_weighted_attention(2, 2, 3, 2, {1.0, 2.0, 1.0});
  auto m = temporal_attention(a, 3, 1, InputMode::kPerTimestep);
  for (int64_t s = 0; s < 3; ++s) {
    CHECK(m.m[s * 3 + 0] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(m.m[s * 3 + 1] == doctest::Approx(0.50).epsilon(1e-9));
    CHECK(m.m[s * 3 + 2] == doctest::Approx(0.25).epsilon(1e-9));
  }
  auto r = receiving_score(m);
  CHECK(r.score[1] == doctest::Approx(1.5).epsilon(1e-9));
  CHECK(r.score[1] > r.score[0]);
  CHECK(r.score[1] > r.score[2]);
  CHECK(r.score[0] + r.score[1] + r.score[2] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("temporal attention rejects flattened tokenization") {
  Tensor<float> a({1, 1, 4, 4}, 0.25f);
  CHECK_THROWS_AS(temporal_attention(a, 2, 1, InputMode::kFlattenedChannels),
                  UnsupportedModeError);
}

TEST_CASE("rows stay stochastic for random row-stochastic inputs") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> ud(0.01f, 1.0f);
  const int64_t t = 5, pf = 3, n = t * pf;
  for (int rep = 0; rep < 20; ++rep) {
    Tensor<float> a({1, 2, n, n});
    for (int64_t bh = 0; bh < 2; ++bh)
      for (int64_t i = 0; i < n; ++i) {
        float s = 0;
        for (int64_t j = 0; j < n; ++j) s += (a[(bh * n + i) * n + j] = ud(rng));
        for (int64_t j = 0; j < n; ++j) a[(bh * n + i) * n + j] /= s;
      }
    auto m = temporal_attention(a, t, 3, InputMode::kPerTimestep);
    double col_total = 0;
    for (int64_t s = 0; s < t; ++s) {
      double row = 0;
      for (int64_t j = 0; j < t; ++j) {
        CHECK(m.m[s * t + j] >= 0);
        row += m.m[s * t + j];
        col_total += m.m[s * t + j];
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
    }
    auto r = receiving_score(m);
    double sum = 0;
    for (double v : r.score) sum += v;
    CHECK(sum == doctest::Approx(double(t)).epsilon(1e-9));
    CHECK(sum == doctest::Approx(col_total).epsilon(1e-12));
  }
}

TEST_CASE("spectral importance oracles") {
  const int64_t d = 4, c = 6, p = 2;
  auto names = kDefaultBands;

  SUBCASE("identical weights give uniform scores") {
    Tensor<float> w({d, c, p, p}, 0.3f);
    auto si = spectral_importance(w, c, 5, InputMode::kPerTimestep, names);
    for (double v : si.score) CHECK(v == doctest::Approx(1.0 / 6).epsilon(1e-12));
  }

  SUBCASE("a zeroed band scores zero and the rest sum to 1") {
    Tensor<float> w({d, c, p, p}, 0.3f);
    for (int64_t o = 0; o < d; ++o)
      for (int64_t x = 0; x < p * p; ++x) w[(o * c + 2) * p * p + x] = 0.0f;
    auto si = spectral_importance(w, c, 5, InputMode::kPerTimestep, names);
    CHECK(si.score[2] == 0.0);
    double sum = 0;
    for (double v : si.score) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("flattened scores are invariant to time permutation") {
    const int64_t t = 3;
    std::mt19937_64 rng(9);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    Tensor<float> w({d, c * t, p, p});
    for (auto& v : w.data) v = nd(rng);
    auto si = spectral_importance(w, c, t, InputMode::kFlattenedChannels, names);

    // swap the t = 0 and t = 2 channel blocks (t-major layout)
    Tensor<float> perm = w;
    for (int64_t o = 0; o < d; ++o)
      for (int64_t cc = 0; cc < c; ++cc)
        for (int64_t x = 0; x < p * p; ++x)
          std::swap(perm[(o * c * t + 0 * c + cc) * p * p + x],
                    perm[(o * c * t + 2 * c + cc) * p * p + x]);
    auto si2 = spectral_importance(perm, c, t, InputMode::kFlattenedChannels, names);
    for (int64_t b = 0; b < c; ++b)
      CHECK(si.score[b] == doctest::Approx(si2.score[b]).epsilon(1e-12));
  }

  SUBCASE("all-zero weights are rejected") {
    Tensor<float> w({d, c, p, p});
    CHECK_THROWS_AS(spectral_importance(w, c, 5, InputMode::kPerTimestep, names),
                    ValidationError);
  }
}

TEST_CASE("16-bit pgm export writes the documented mapping") {
  Tensor<float> map({2, 3});
  for (int i = 0; i < 6; ++i) map[i] = float(100 + 20 * i);
  fs::path p = fs::temp_directory_path() / "yieldnet_map.pgm";
  write_pgm16(p, map, 100.0, 200.0, "kg/ha");

  std::ifstream is(p, std::ios::binary);
  std::string magic;
  int w, h, maxv;
  is >> magic >> w >> h >> maxv;
  is.get();
  CHECK(magic == "P5");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(maxv == 65535);
  std::vector<uint16_t> px(6);
  for (auto& v : px) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    v = uint16_t((b[0] << 8) | b[1]);
  }
  CHECK(px[0] == 0);
  CHECK(px[5] == 65535);
  CHECK(px[1] == uint16_t(std::lround(0.2 * 65535)));

  auto side = nlohmann::json::parse(std::ifstream(p.string() + ".json"));
  CHECK(side.at("min") == 100.0);
  CHECK(side.at("max") == 200.0);
  CHECK(side.at("units") == "kg/ha");
  fs::remove(p);
  fs::remove(p.string() + ".json");
}

TEST_CASE("explain produces a consistent report from a checkpoint") {
  fs::path root = fs::temp_directory_path() / "yieldnet_explain_ds";
  fs::remove_all(root);
  fs::create_directories(root);
  GenParams gp;
  gp.t = 2;
  gp.c = 3;
  gp.h = 16;
  gp.w = 16;
  gp.smooth_radius = 3;
  gp.phenology = {0.5, 1.0};
  gp.band_base = {450, 800, 1500};
  gp.band_gain = {-80, 120, 2200};
  DatasetManifest m;
  m.root = root;
  for (int i = 0; i < 4; ++i) {
    int32_t year = i < 3 ? 2000 : 2001;
    std::string id = "c" + std::to_string(i);
    write_chip(synthesize_chip(i + 1, gp, id, year), root / (id + ".cyp"));
    m.chips.push_back({id, year, id + ".cyp"});
  }
  m.val_years = {2001};

  RunConfig rc;
  rc.model.input = {2, 3, 16, 16};
  rc.model.encoder.patch_size = 4;
  rc.model.encoder.embed_dim = 8;
  rc.model.encoder.depth = 2;
  rc.model.encoder.heads = 2;
  rc.model.encoder.mlp_ratio = 2;
  rc.model.encoder.tap_layers = {1, 1, 2, 2};
  rc.model.decoder.fpn_channels = 8;
  rc.train.epochs = 2;
  rc.train.batch_size = 2;
  rc.train.seed = 3;

  fs::path run = fs::temp_directory_path() / "yieldnet_explain_run";
  fs::remove_all(run);
  train(m, rc, run);

  fs::path out = fs::temp_directory_path() / "yieldnet_explain_out";
  fs::remove_all(out);
  auto report = explain(run / "best.ckpt", m, {}, out);

  REQUIRE(report.at("layers").size() == 2);  // taps {1,1,2,2} default to {1, 2}
  for (const auto& jl : report.at("layers")) {
    const auto& rows = jl.at("matrix");
    REQUIRE(rows.size() == 2);
    double col_sum = 0;
    for (const auto& row : rows) {
      double s = 0;
      for (double v : row.get<std::vector<double>>()) {
        CHECK(v >= 0.0);
        s += v;
        col_sum += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    double rsum = 0;
    for (double v : jl.at("receiving_score").at("score").get<std::vector<double>>())
      rsum += v;
    CHECK(rsum == doctest::Approx(col_sum).epsilon(1e-9));
  }
  double ssum = 0;
  for (double v : report.at("spectral_importance").at("score").get<std::vector<double>>())
    ssum += v;
  CHECK(ssum == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fs::exists(out / "report.json"));
  for (const char* f : {"prediction.pgm", "truth.pgm", "residual.pgm"}) {
    CHECK(fs::exists(out / f));
    CHECK(fs::exists(out / (std::string(f) + ".json")));
  }

  // unreadable layer request
  CHECK_THROWS_AS(explain(run / "best.ckpt", m, {99}, out), ConfigError);

  fs::remove_all(root);
  fs::remove_all(run);
  fs::remove_all(out);
}
