#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "yieldnet/config.hpp"
#include "yieldnet/conv_ops.hpp"
#include "yieldnet/graph.hpp"
#include "yieldnet/params.hpp"

namespace yieldnet {

/// The full network: ViT encoder with four feature taps, FPN+PSP decoder,
/// main regression head and auxiliary head. Parameters live in a ParamStore;
/// forward() registers them on a fresh tape and returns prediction node ids.
///
/// Templated on the scalar so the same code runs float training and double
/// finite-difference checks.
template <class S>
class YieldModel {
 public:
  struct Forward {
    int main_pred = -1;  // [B, 1, H, W]
    int aux_pred = -1;   // [B, 1, H, W]
    int embedded = -1;                     // tokens after embeddings, pre-blocks
    std::array<int, 4> tap_nodes = {-1, -1, -1, -1};
    int main_feature = -1;                 // decoder bottleneck output
    int aux_feature = -1;                  // fused FPN level fed to the aux head
    std::vector<int> param_nodes;          // node id per ParamStore entry
    std::vector<Tensor<S>> attention;      // per layer [B, heads, N, N] when captured
  };

  explicit YieldModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    register_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }

  /// Tokens per sample seen by the transformer.
  int64_t token_count() const {
    int64_t per_frame = cfg_.grid_h() * cfg_.grid_w();
    return cfg_.encoder.mode == InputMode::kPerTimestep ? cfg_.input.t * per_frame
                                                        : per_frame;
  }

  void init(uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& e : store_.entries()) {
      if (ends_with(e.name, ".b") || ends_with(e.name, ".beta") ||
          ends_with(e.name, ".run_mean")) {
        e.value.fill(S(0));
      } else if (ends_with(e.name, ".gamma") || ends_with(e.name, ".run_var")) {
        e.value.fill(S(1));
      } else {
        fill_trunc_normal(e.value, 0.02, rng);
      }
    }
  }

  /// input: [B, T, C, H, W] in per-timestep mode, [B, C*T, H, W] flattened.
  /// latlon: optional per-sample (lat, lon), required when the location
  /// embedding is enabled. dropout_rng drives head dropout in training mode.
  /// want_grads requests parameter gradients even outside training mode
  /// (eval-mode BatchNorm is smooth, which finite-difference checks need).
  Forward forward(Graph<S>& g, const Tensor<S>& input, bool training, bool capture,
                  std::mt19937_64& dropout_rng,
                  const std::vector<std::array<S, 2>>* latlon = nullptr,
                  bool want_grads = false) {
    const auto& ec = cfg_.encoder;
    const int64_t p = ec.patch_size;
    const int64_t gh = cfg_.grid_h(), gw = cfg_.grid_w(), pf = gh * gw;
    const bool per_ts = ec.mode == InputMode::kPerTimestep;
    const int64_t frames = per_ts ? cfg_.input.t : 1;
    int64_t b;
    Tensor<S> x = input;
    if (per_ts) {
      if (x.rank() != 5 || x.dim(1) != cfg_.input.t || x.dim(2) != cfg_.input.c)
        throw ValidationError("forward: input must be [B,T,C,H,W]");
      b = x.dim(0);
      x.shape = {b * cfg_.input.t, cfg_.input.c, cfg_.input.h, cfg_.input.w};
    } else {
      if (x.rank() != 4 || x.dim(1) != cfg_.input.c * cfg_.input.t)
        throw ValidationError("forward: input must be [B,C*T,H,W]");
      b = x.dim(0);
    }

    Forward fw;
    fw.param_nodes.resize(store_.size());
    const bool grads = training || want_grads;
    for (size_t i = 0; i < store_.size(); ++i)
      fw.param_nodes[i] = g.make_input(store_.at(static_cast<int>(i)).value,
                                       grads && store_.at(static_cast<int>(i)).trainable);
    auto pid = [&](const std::string& name) { return fw.param_nodes[store_.find(name)]; };

    int xin = g.make_input(std::move(x), false);

    // ---- encoder ----
    int emb = conv2d(g, xin, pid("encoder.patch_embed.w"), pid("encoder.patch_embed.b"),
                     p, 0);                              // [B*frames, D, gh, gw]
    int tok = map_to_tokens(g, emb);                     // [B*N, D]
    const int64_t n = frames * pf;

    auto pos_idx = std::make_shared<std::vector<int32_t>>(b * n);
    for (int64_t i = 0; i < b * n; ++i) (*pos_idx)[i] = static_cast<int32_t>(i % pf);
    tok = g.gather_add(tok, pid("encoder.pos_embed"), pos_idx);
    if (per_ts) {
      auto t_idx = std::make_shared<std::vector<int32_t>>(b * n);
      for (int64_t i = 0; i < b * n; ++i)
        (*t_idx)[i] = static_cast<int32_t>((i % n) / pf);
      tok = g.gather_add(tok, pid("encoder.temporal_embed"), t_idx);
    }
    if (ec.location_embedding) {
      if (!latlon || static_cast<int64_t>(latlon->size()) != b)
        throw ValidationError("forward: location embedding needs per-sample lat/lon");
      Tensor<S> ll({b, 2});
      for (int64_t i = 0; i < b; ++i) {
        ll[2 * i] = (*latlon)[i][0];
        ll[2 * i + 1] = (*latlon)[i][1];
      }
      int loc = g.linear(g.make_input(std::move(ll), false), pid("encoder.loc.w"),
                         pid("encoder.loc.b"));  // [B, D]
      auto b_idx = std::make_shared<std::vector<int32_t>>(b * n);
      for (int64_t i = 0; i < b * n; ++i) (*b_idx)[i] = static_cast<int32_t>(i / n);
      tok = g.gather_add(tok, loc, b_idx);
    }

    fw.embedded = tok;
    if (capture) fw.attention.resize(ec.depth);
    std::vector<int> layer_out(ec.depth);
    for (int64_t l = 0; l < ec.depth; ++l) {
      std::string pre = "encoder.block" + std::to_string(l) + ".";
      int h1 = g.layernorm(tok, pid(pre + "ln1.gamma"), pid(pre + "ln1.beta"), S(1e-6));
      int q = g.linear(h1, pid(pre + "attn.wq"), pid(pre + "attn.bq"));
      int k = g.linear(h1, pid(pre + "attn.wk"), pid(pre + "attn.bk"));
      int v = g.linear(h1, pid(pre + "attn.wv"), pid(pre + "attn.bv"));
      int att = g.attention(q, k, v, b, n, ec.heads, capture ? &fw.attention[l] : nullptr);
      tok = g.add(tok, g.linear(att, pid(pre + "attn.wo"), pid(pre + "attn.bo")));
      int h2 = g.layernorm(tok, pid(pre + "ln2.gamma"), pid(pre + "ln2.beta"), S(1e-6));
      int m = g.linear(h2, pid(pre + "mlp.w1"), pid(pre + "mlp.b1"));
      m = g.gelu(m);
      tok = g.add(tok, g.linear(m, pid(pre + "mlp.w2"), pid(pre + "mlp.b2")));
      layer_out[l] = tok;
    }
    std::array<int, 4> taps;
    for (int i = 0; i < 4; ++i) taps[i] = layer_out[ec.tap_layers[i] - 1];
    fw.tap_nodes = taps;

    // ---- decoder ----
    const auto& dc = cfg_.decoder;
    std::array<int, 4> maps;
    for (int i = 0; i < 4; ++i)
      maps[i] = tokens_to_map(g, taps[i], b, frames, gh, gw);  // [B, D, gh, gw]

    std::array<int, 4> pyr;
    {
      int up = conv_transpose2x2(g, maps[0], pid("decoder.pyr0.up1.w"),
                                 pid("decoder.pyr0.up1.b"));
      up = conv_transpose2x2(g, up, pid("decoder.pyr0.up2.w"), pid("decoder.pyr0.up2.b"));
      pyr[0] = up;
      pyr[1] = conv_transpose2x2(g, maps[1], pid("decoder.pyr1.up1.w"),
                                 pid("decoder.pyr1.up1.b"));
      pyr[2] = maps[2];
      pyr[3] = maxpool2x2(g, maps[3]);
      for (int i = 0; i < 4; ++i) {
        std::string pre = "decoder.pyr" + std::to_string(i) + ".proj.";
        pyr[i] = conv2d(g, pyr[i], pid(pre + "w"), pid(pre + "b"), 1, 0);
      }
    }

    std::array<int, 4> fused;
    for (int i = 3; i >= 0; --i) {
      std::string pre = "decoder.lat" + std::to_string(i) + ".";
      int lat = conv2d(g, pyr[i], pid(pre + "w"), pid(pre + "b"), 1, 0);
      fused[i] = i == 3 ? lat : g.add(lat, upsample_nearest2x(g, fused[i + 1]));
    }
    for (int i = 0; i < 4; ++i) {
      std::string pre = "decoder.refine" + std::to_string(i) + ".";
      fused[i] = conv2d(g, fused[i], pid(pre + "w"), pid(pre + "b"), 1, 1);
    }
    int aux_map = fused[dc.aux_level];

    const int64_t fh = 4 * gh, fwd = 4 * gw;
    std::vector<int> resized;
    for (int i = 0; i < 4; ++i) resized.push_back(upsample_bilinear(g, fused[i], fh, fwd));
    int cat = concat_channels(g, resized);  // [B, 4F, fh, fw]
    int ctx = psp(g, cat, "decoder.psp", fh, fwd, fw);
    int main_feat = conv2d(g, ctx, pid("decoder.bottleneck.w"), pid("decoder.bottleneck.b"),
                           1, 1);  // [B, F, fh, fw]
    fw.main_feature = main_feat;
    fw.aux_feature = aux_map;

    // ---- main head ----
    const double rate = training ? cfg_.head.dropout : 0.0;
    int h = conv2d(g, main_feat, pid("head.conv1.w"), pid("head.conv1.b"), 1, 1);
    h = bn(g, h, "head.bn1", fw, training);
    h = g.relu(h);
    h = g.dropout(h, rate, dropout_rng);
    h = conv2d(g, h, pid("head.conv2.w"), pid("head.conv2.b"), 1, 1);
    h = bn(g, h, "head.bn2", fw, training);
    h = g.relu(h);
    h = g.dropout(h, rate, dropout_rng);
    h = conv2d(g, h, pid("head.conv3.w"), pid("head.conv3.b"), 1, 1);
    fw.main_pred = upsample_bilinear(g, h, cfg_.input.h, cfg_.input.w);

    // ---- auxiliary head ----
    int a = psp(g, aux_map, "aux.psp", g.val(aux_map).dim(2), g.val(aux_map).dim(3), fw);
    a = conv2d(g, a, pid("aux.conv.w"), pid("aux.conv.b"), 1, 1);
    a = conv2d(g, a, pid("aux.out.w"), pid("aux.out.b"), 1, 0);
    fw.aux_pred = upsample_bilinear(g, a, cfg_.input.h, cfg_.input.w);
    return fw;
  }

  /// Copy accumulated gradients for every trainable entry; non-trainable
  /// entries get empty tensors.
  std::vector<Tensor<S>> collect_grads(Graph<S>& g, const Forward& fw) const {
    std::vector<Tensor<S>> out(store_.size());
    for (size_t i = 0; i < store_.size(); ++i)
      if (store_.at(static_cast<int>(i)).trainable) out[i] = g.grad(fw.param_nodes[i]);
    return out;
  }

 private:
  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }

  /// Pyramid pooling block named `pre`: per pool size s, adaptive-average to
  /// s x s, 1x1 conv to fpn_channels, bilinear back; concat with the input;
  /// 3x3 conv down to fpn_channels.
  int psp(Graph<S>& g, int x, const std::string& pre, int64_t h, int64_t w,
          const Forward& fw) {
    auto pid = [&](const std::string& name) { return fw.param_nodes[store_.find(name)]; };
    std::vector<int> branches = {x};
    for (int64_t s : cfg_.decoder.psp_pool_sizes) {
      std::string bp = pre + ".pool" + std::to_string(s) + ".";
      int br = adaptive_avg_pool(g, x, s);
      br = conv2d(g, br, pid(bp + "w"), pid(bp + "b"), 1, 0);
      branches.push_back(upsample_bilinear(g, br, h, w));
    }
    int cat = concat_channels(g, branches);
    return conv2d(g, cat, pid(pre + ".out.w"), pid(pre + ".out.b"), 1, 1);
  }

  int bn(Graph<S>& g, int x, const std::string& pre, const Forward& fw, bool training) {
    auto pid = [&](const std::string& name) { return fw.param_nodes[store_.find(name)]; };
    // Running buffers are updated through these pointers in training mode;
    // write_back_buffers is a no-op for them since they alias the store.
    S* rm = store_.at(pre + ".run_mean").value.ptr();
    S* rv = store_.at(pre + ".run_var").value.ptr();
    return batchnorm2d(g, x, pid(pre + ".gamma"), pid(pre + ".beta"), rm, rv, training,
                       S(0.1), S(1e-5));
  }

  void register_params() {
    const auto& ec = cfg_.encoder;
    const int64_t d = ec.embed_dim, p = ec.patch_size;
    const int64_t cin =
        ec.mode == InputMode::kPerTimestep ? cfg_.input.c : cfg_.input.c * cfg_.input.t;
    auto w = [&](const std::string& name, std::vector<int64_t> shape) {
      store_.add(name, std::move(shape), true, true);
    };
    auto nb = [&](const std::string& name, std::vector<int64_t> shape) {
      store_.add(name, std::move(shape), true, false);  // bias / norm: no decay
    };
    auto buf = [&](const std::string& name, std::vector<int64_t> shape) {
      store_.add(name, std::move(shape), false, false);
    };

    w("encoder.patch_embed.w", {d, cin, p, p});
    nb("encoder.patch_embed.b", {d});
    w("encoder.pos_embed", {cfg_.grid_h() * cfg_.grid_w(), d});
    if (ec.mode == InputMode::kPerTimestep) w("encoder.temporal_embed", {cfg_.input.t, d});
    if (ec.location_embedding) {
      w("encoder.loc.w", {2, d});
      nb("encoder.loc.b", {d});
    }
    for (int64_t l = 0; l < ec.depth; ++l) {
      std::string pre = "encoder.block" + std::to_string(l) + ".";
      nb(pre + "ln1.gamma", {d});
      nb(pre + "ln1.beta", {d});
      for (const char* nm : {"q", "k", "v", "o"}) {
        w(pre + "attn.w" + std::string(nm), {d, d});
        nb(pre + "attn.b" + std::string(nm), {d});
      }
      nb(pre + "ln2.gamma", {d});
      nb(pre + "ln2.beta", {d});
      w(pre + "mlp.w1", {d, ec.mlp_ratio * d});
      nb(pre + "mlp.b1", {ec.mlp_ratio * d});
      w(pre + "mlp.w2", {ec.mlp_ratio * d, d});
      nb(pre + "mlp.b2", {d});
    }

    const int64_t f = cfg_.decoder.fpn_channels;
    w("decoder.pyr0.up1.w", {d, d, 2, 2});
    nb("decoder.pyr0.up1.b", {d});
    w("decoder.pyr0.up2.w", {d, d, 2, 2});
    nb("decoder.pyr0.up2.b", {d});
    w("decoder.pyr1.up1.w", {d, d, 2, 2});
    nb("decoder.pyr1.up1.b", {d});
    for (int i = 0; i < 4; ++i) {
      std::string pre = "decoder.pyr" + std::to_string(i) + ".proj.";
      w(pre + "w", {f, d, 1, 1});
      nb(pre + "b", {f});
    }
    for (int i = 0; i < 4; ++i) {
      w("decoder.lat" + std::to_string(i) + ".w", {f, f, 1, 1});
      nb("decoder.lat" + std::to_string(i) + ".b", {f});
      w("decoder.refine" + std::to_string(i) + ".w", {f, f, 3, 3});
      nb("decoder.refine" + std::to_string(i) + ".b", {f});
    }
    register_psp("decoder.psp", 4 * f, f);
    w("decoder.bottleneck.w", {f, f, 3, 3});
    nb("decoder.bottleneck.b", {f});

    w("head.conv1.w", {f / 2, f, 3, 3});
    nb("head.conv1.b", {f / 2});
    nb("head.bn1.gamma", {f / 2});
    nb("head.bn1.beta", {f / 2});
    buf("head.bn1.run_mean", {f / 2});
    buf("head.bn1.run_var", {f / 2});
    w("head.conv2.w", {f / 4, f / 2, 3, 3});
    nb("head.conv2.b", {f / 4});
    nb("head.bn2.gamma", {f / 4});
    nb("head.bn2.beta", {f / 4});
    buf("head.bn2.run_mean", {f / 4});
    buf("head.bn2.run_var", {f / 4});
    w("head.conv3.w", {1, f / 4, 3, 3});
    nb("head.conv3.b", {1});

    register_psp("aux.psp", f, f);
    w("aux.conv.w", {f / 2, f, 3, 3});
    nb("aux.conv.b", {f / 2});
    w("aux.out.w", {1, f / 2, 1, 1});
    nb("aux.out.b", {1});
  }

  void register_psp(const std::string& pre, int64_t cin, int64_t f) {
    for (int64_t s : cfg_.decoder.psp_pool_sizes) {
      std::string bp = pre + ".pool" + std::to_string(s) + ".";
      store_.add(bp + "w", {f, cin, 1, 1}, true, true);
      store_.add(bp + "b", {f}, true, false);
    }
    store_.add(pre + ".out.w", {f, cin + static_cast<int64_t>(cfg_.decoder.psp_pool_sizes.size()) * f, 3, 3},
               true, true);
    store_.add(pre + ".out.b", {f}, true, false);
  }

  ModelConfig cfg_;
  ParamStore<S> store_;
};

}  // namespace yieldnet
