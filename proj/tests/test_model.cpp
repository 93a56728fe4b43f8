#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "yieldnet/model.hpp"

using namespace yieldnet;

namespace {

ModelConfig tiny_config() {
  ModelConfig m;
  m.input = {2, 3, 16, 16};
  m.encoder.patch_size = 4;  // 4x4 patch grid
  m.encoder.embed_dim = 8;
  m.encoder.depth = 2;
  m.encoder.heads = 2;
  m.encoder.mlp_ratio = 2;
  m.encoder.tap_layers = {1, 1, 2, 2};
  m.decoder.fpn_channels = 8;
  m.head.dropout = 0.0;
  return m;
}

template <class S>
Tensor<S> random_input(const ModelConfig& m, int64_t b, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<S> x(m.encoder.mode == InputMode::kPerTimestep
                  ? std::vector<int64_t>{b, m.input.t, m.input.c, m.input.h, m.input.w}
                  : std::vector<int64_t>{b, m.input.c * m.input.t, m.input.h, m.input.w});
  for (auto& v : x.data) v = S(nd(rng));
  return x;
}

template <class S>
void zero_group(YieldModel<S>& m, const std::string& prefix) {
  for (auto& e : m.params().entries())
    if (e.name.rfind(prefix, 0) == 0) e.value.fill(S(0));
}

}  // namespace

TEST_CASE("config: validation and strict json parsing") {
  RunConfig rc;
  rc.validate();

  auto j = rc.to_json();
  auto rc2 = RunConfig::from_json(j);
  CHECK(rc2.to_json() == j);

  j["extra"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  j.erase("extra");
  j["model"]["encoder"]["hidden"] = 7;
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);
  j["model"]["encoder"].erase("hidden");
  j["train"]["lr"] = 0.1;  // the real keys are lr_max / lr_min
  CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);

  RunConfig bad = rc;
  bad.model.encoder.tap_layers = {4, 2, 6, 8};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.model.input.h = 230;  // not divisible by 16
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.model.head.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.train.lr_min = bad.train.lr_max;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // shallow configs may repeat tap layers
  RunConfig shallow = rc;
  shallow.model.encoder.depth = 2;
  shallow.model.encoder.tap_layers = {1, 1, 2, 2};
  shallow.validate();
}

TEST_CASE("token counts match the patch grid arithmetic") {
  ModelConfig m;  // defaults: 224, patch 16, T=5
  CHECK(m.grid_h() == 14);
  CHECK(m.grid_w() == 14);
  YieldModel<float> per_ts(m);
  CHECK(per_ts.token_count() == 980);  // 5 * 196

  m.encoder.mode = InputMode::kFlattenedChannels;
  YieldModel<float> flat(m);
  CHECK(flat.token_count() == 196);

  m.input.h = m.input.w = 96;
  CHECK(m.grid_h() == 6);
  YieldModel<float> small(m);
  CHECK(small.token_count() == 36);
}

TEST_CASE("forward shape contract, both modes, several batch sizes") {
  for (auto mode : {InputMode::kPerTimestep, InputMode::kFlattenedChannels}) {
    ModelConfig m = tiny_config();
    m.encoder.mode = mode;
    YieldModel<float> model(m);
    model.init(1);
    for (int64_t b : {1, 2, 3}) {
      Graph<float> g;
      std::mt19937_64 rng(0);
      auto fw = model.forward(g, random_input<float>(m, b, 7 + b), false, false, rng);
      const auto& mp = g.val(fw.main_pred);
      const auto& ap = g.val(fw.aux_pred);
      CHECK(mp.shape == std::vector<int64_t>{b, 1, 16, 16});
      CHECK(ap.shape == std::vector<int64_t>{b, 1, 16, 16});
      for (float v : mp.data) CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("decoder feature extents follow the pyramid arithmetic") {
  ModelConfig m = tiny_config();  // grid 4x4
  YieldModel<float> model(m);
  model.init(2);
  Graph<float> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, random_input<float>(m, 1, 11), false, false, rng);
  // finest pyramid level is 4x the patch grid; aux tap is the 2x level
  CHECK(g.val(fw.main_feature).shape == std::vector<int64_t>{1, 8, 16, 16});
  CHECK(g.val(fw.aux_feature).shape == std::vector<int64_t>{1, 8, 8, 8});
}

TEST_CASE("residual identity: zero blocks pass embedded tokens to every tap") {
  ModelConfig m = tiny_config();
  YieldModel<float> model(m);
  model.init(3);
  zero_group(model, "encoder.block");
  Graph<float> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, random_input<float>(m, 2, 13), false, false, rng);
  const auto& emb = g.val(fw.embedded);
  for (int tap : fw.tap_nodes) {
    const auto& tv = g.val(tap);
    REQUIRE(tv.same_shape(emb));
    for (int64_t i = 0; i < tv.numel(); ++i) CHECK(tv[i] == emb[i]);
  }
}

TEST_CASE("zero decoder and heads produce an all-zero prediction") {
  ModelConfig m = tiny_config();
  YieldModel<float> model(m);
  model.init(4);
  zero_group(model, "decoder.");
  zero_group(model, "head.");
  zero_group(model, "aux.");
  model.params().at("head.bn1.run_var").value.fill(1.0f);
  model.params().at("head.bn2.run_var").value.fill(1.0f);
  Graph<float> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, random_input<float>(m, 1, 17), false, false, rng);
  for (float v : g.val(fw.main_feature).data) CHECK(v == 0.0f);
  for (float v : g.val(fw.main_pred).data) CHECK(v == 0.0f);
  for (float v : g.val(fw.aux_pred).data) CHECK(v == 0.0f);
}

TEST_CASE("eval forward is deterministic") {
  ModelConfig m = tiny_config();
  m.head.dropout = 0.1;  // inert outside training mode
  YieldModel<float> model(m);
  model.init(5);
  auto x = random_input<float>(m, 2, 19);
  Tensor<float> a, b;
  for (Tensor<float>* out : {&a, &b}) {
    Graph<float> g;
    std::mt19937_64 rng(123);
    auto fw = model.forward(g, x, false, false, rng);
    *out = g.val(fw.main_pred);
  }
  CHECK(a.data == b.data);
}

TEST_CASE("captured attention rows are probability distributions") {
  ModelConfig m = tiny_config();
  YieldModel<float> model(m);
  model.init(6);
  Graph<float> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, random_input<float>(m, 2, 23), false, true, rng);
  REQUIRE(fw.attention.size() == 2);
  const int64_t n = model.token_count();
  for (const auto& att : fw.attention) {
    REQUIRE(att.shape == std::vector<int64_t>{2, 2, n, n});
    for (int64_t r = 0; r < att.numel() / n; ++r) {
      double sum = 0;
      for (int64_t j = 0; j < n; ++j) {
        CHECK(att[r * n + j] >= 0.0f);
        sum += att[r * n + j];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("temporal embedding is additive per frame") {
  ModelConfig m = tiny_config();
  YieldModel<float> model(m);
  model.init(7);
  model.params().at("encoder.patch_embed.w").value.fill(0.0f);
  model.params().at("encoder.patch_embed.b").value.fill(0.0f);
  model.params().at("encoder.pos_embed").value.fill(0.0f);
  Graph<float> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, random_input<float>(m, 1, 29), false, false, rng);
  const auto& emb = g.val(fw.embedded);  // [T*16, 8]
  const auto& tab = model.params().at("encoder.temporal_embed").value;
  for (int64_t t = 0; t < 2; ++t)
    for (int64_t p = 0; p < 16; ++p)
      for (int64_t j = 0; j < 8; ++j)
        CHECK(emb[(t * 16 + p) * 8 + j] == doctest::Approx(tab[t * 8 + j]));
}

TEST_CASE("location embedding: required when enabled, inert otherwise") {
  ModelConfig m = tiny_config();
  m.encoder.location_embedding = true;
  YieldModel<float> model(m);
  model.init(8);
  auto x = random_input<float>(m, 1, 31);
  Graph<float> g;
  std::mt19937_64 rng(0);
  CHECK_THROWS_AS(model.forward(g, x, false, false, rng), ValidationError);

  auto run = [&](float lat, float lon) {
    Graph<float> gg;
    std::mt19937_64 r2(0);
    std::vector<std::array<float, 2>> ll = {{lat, lon}};
    auto fw = model.forward(gg, x, false, false, r2, &ll);
    return gg.val(fw.main_pred);
  };
  auto p1 = run(50.0f, -105.0f);
  auto p2 = run(55.0f, -100.0f);
  bool differs = false;
  for (int64_t i = 0; i < p1.numel(); ++i)
    if (p1[i] != p2[i]) differs = true;
  CHECK(differs);

  // flag off: lat/lon never enters the forward pass
  ModelConfig m2 = tiny_config();
  YieldModel<float> plain(m2);
  plain.init(8);
  Graph<float> g3;
  std::mt19937_64 r3(0);
  auto fw3 = plain.forward(g3, x, false, false, r3);
  CHECK(std::isfinite(g3.val(fw3.main_pred)[0]));
}

TEST_CASE("permutation consistency of encoder taps") {
  // Swapping two input patches together with the matching positional
  // embedding rows swaps the corresponding tap token rows.
  ModelConfig m = tiny_config();
  YieldModel<float> model(m);
  model.init(9);
  auto x = random_input<float>(m, 1, 37);
  const int64_t pa = 1, pb = 10;  // grid positions (0,1) and (2,2)

  Graph<float> g1;
  std::mt19937_64 r1(0);
  auto f1 = model.forward(g1, x, false, false, r1);
  std::vector<Tensor<float>> taps_before;
  for (int t : f1.tap_nodes) taps_before.push_back(g1.val(t));

  // swap the 4x4 pixel blocks of patches pa and pb in every (t, c) plane
  auto xs = x;
  const int64_t gw = 4, ps = 4, w = 16;
  for (int64_t plane = 0; plane < 2 * 3; ++plane) {
    float* base = xs.ptr() + plane * 16 * 16;
    int64_t ra = (pa / gw) * ps, ca = (pa % gw) * ps;
    int64_t rb = (pb / gw) * ps, cb = (pb % gw) * ps;
    for (int64_t i = 0; i < ps; ++i)
      for (int64_t j = 0; j < ps; ++j)
        std::swap(base[(ra + i) * w + ca + j], base[(rb + i) * w + cb + j]);
  }
  auto& pos = model.params().at("encoder.pos_embed").value;
  for (int64_t j = 0; j < 8; ++j) std::swap(pos[pa * 8 + j], pos[pb * 8 + j]);

  Graph<float> g2;
  std::mt19937_64 r2(0);
  auto f2 = model.forward(g2, xs, false, false, r2);
  for (size_t k = 0; k < 4; ++k) {
    const auto& after = g2.val(f2.tap_nodes[k]);
    const auto& before = taps_before[k];
    for (int64_t t = 0; t < 2; ++t)
      for (int64_t p = 0; p < 16; ++p) {
        int64_t src = p == pa ? pb : (p == pb ? pa : p);
        for (int64_t j = 0; j < 8; ++j)
          CHECK(after[(t * 16 + p) * 8 + j] ==
                doctest::Approx(before[(t * 16 + src) * 8 + j]).epsilon(1e-5));
      }
  }
}

// The production init (std 0.02) parks head activations within ~1e-4 of the
// ReLU threshold, where central differences cannot converge at any step size.
// Gradient checks therefore run at a generic parameter point with O(0.1)
// magnitudes; kinks are then measure-zero relative to the step.
template <class S>
void randomize_for_fd(YieldModel<S>& model, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (auto& e : model.params().entries()) {
    bool gamma = e.name.size() >= 6 && e.name.rfind(".gamma") == e.name.size() - 6;
    bool rvar = e.name.size() >= 8 && e.name.rfind(".run_var") == e.name.size() - 8;
    for (auto& v : e.value.data) {
      double r = nd(rng);
      v = S(gamma ? 1.0 + r : rvar ? 1.0 + std::abs(r) : r);
    }
  }
}

TEST_CASE("full tiny model passes a finite-difference gradient check") {
  ModelConfig m = tiny_config();
  YieldModel<double> model(m);
  randomize_for_fd(model, 10);
  auto x = random_input<double>(m, 2, 41);
  Tensor<double> target({2, 1, 16, 16});
  std::mt19937_64 trng(43);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : target.data) v = nd(trng);

  // Eval-mode BatchNorm keeps the loss smooth in the parameters; training-mode
  // batch statistics park many activations exactly at the ReLU kink, where
  // central differences cannot converge.
  auto loss_of = [&]() {
    Graph<double> g;
    std::mt19937_64 rng(0);
    auto fw = model.forward(g, x, false, false, rng);
    int l = g.add_scaled(g.mse_loss(fw.main_pred, target),
                         g.mse_loss(fw.aux_pred, target), 0.2);
    return g.val(l)[0];
  };

  Graph<double> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, x, false, false, rng, nullptr, true);
  int l = g.add_scaled(g.mse_loss(fw.main_pred, target),
                       g.mse_loss(fw.aux_pred, target), 0.2);
  g.backward(l);

  std::mt19937_64 pick(47);
  double max_rel = 0.0;
  std::string worst;
  for (size_t pi = 0; pi < model.params().size(); ++pi) {
    auto& e = model.params().at(static_cast<int>(pi));
    if (!e.trainable) continue;
    int64_t n = e.value.numel();
    for (int s = 0; s < 3; ++s) {
      int64_t coord = static_cast<int64_t>(pick() % n);
      double theta = e.value[coord];
      double h = 1e-5 * std::max(1.0, std::abs(theta));
      e.value[coord] = theta + h;
      double fp = loss_of();
      e.value[coord] = theta - h;
      double fm = loss_of();
      e.value[coord] = theta;
      double fd = (fp - fm) / (2.0 * h);
      double an = g.grad(fw.param_nodes[pi])[coord];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      double rel = std::abs(fd - an) / denom;
      if (rel > max_rel) {
        max_rel = rel;
        worst = e.name + ":" + std::to_string(coord);
      }
    }
  }
  INFO("worst " << worst);
  CHECK(max_rel < 1e-3);
}
