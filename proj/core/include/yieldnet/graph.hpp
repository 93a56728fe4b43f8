#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "yieldnet/tensor.hpp"

namespace yieldnet {

/// Reverse-mode tape over whole tensors. Nodes are appended in evaluation
/// order, so walking the tape backwards is already a topological order.
template <class S>
class Graph {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

  struct Node {
    Tensor<S> val;
    Tensor<S> grad;
    bool needs_grad = false;
    std::function<void()> back;
  };

  int make_input(Tensor<S> v, bool needs_grad = false) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<S>& val(int id) const { return nodes_[id].val; }
  Tensor<S>& grad(int id) { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  size_t size() const { return nodes_.size(); }

  void backward(int loss) {
    if (nodes_[loss].val.numel() != 1)
      throw std::logic_error("backward: loss must be scalar");
    for (auto& n : nodes_)
      if (n.needs_grad) {
        n.grad.shape = n.val.shape;
        n.grad.data.assign(n.val.data.size(), S(0));
      }
    nodes_[loss].grad[0] = S(1);
    for (int i = loss; i >= 0; --i)
      if (nodes_[i].back && nodes_[i].needs_grad) nodes_[i].back();
  }

  // ---- elementwise / affine ----

  int add(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
    Tensor<S> out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return unary_binary(std::move(out), a, b, [this, a, b](int y) {
      const auto& g = grad(y);
      if (needs_grad(a)) axpy(grad(a), g, S(1));
      if (needs_grad(b)) axpy(grad(b), g, S(1));
    });
  }

  /// out = a + w * b (w is a constant, not a node)
  int add_scaled(int a, int b, S w) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("add_scaled: shape mismatch");
    Tensor<S> out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += w * bv[i];
    return unary_binary(std::move(out), a, b, [this, a, b, w](int y) {
      const auto& g = grad(y);
      if (needs_grad(a)) axpy(grad(a), g, S(1));
      if (needs_grad(b)) axpy(grad(b), g, w);
    });
  }

  int scale(int a, S c) {
    Tensor<S> out = val(a);
    for (auto& v : out.data) v *= c;
    return unary_binary(std::move(out), a, -1, [this, a, c](int y) {
      if (needs_grad(a)) axpy(grad(a), grad(y), c);
    });
  }

  int relu(int a) {
    Tensor<S> out = val(a);
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    return unary_binary(std::move(out), a, -1, [this, a](int y) {
      if (!needs_grad(a)) return;
      const auto& x = val(a);
      const auto& g = grad(y);
      auto& ga = grad(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if (x[i] > S(0)) ga[i] += g[i];
    });
  }

  int gelu(int a) {
    static const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    Tensor<S> out = val(a);
    for (auto& v : out.data) v = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
    return unary_binary(std::move(out), a, -1, [this, a](int y) {
      if (!needs_grad(a)) return;
      static const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
      const auto& x = val(a);
      const auto& g = grad(y);
      auto& ga = grad(a);
      for (int64_t i = 0; i < g.numel(); ++i) {
        S v = x[i];
        S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        S pdf = std::exp(S(-0.5) * v * v) * inv_sqrt2pi;
        ga[i] += g[i] * (cdf + v * pdf);
      }
    });
  }

  /// Inverted dropout: survivors scaled by 1/(1-rate). Mask drawn from rng.
  int dropout(int a, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return a;
    auto mask = std::make_shared<std::vector<uint8_t>>(val(a).data.size());
    const S keep_scale = S(1.0 / (1.0 - rate));
    Tensor<S> out = val(a);
    for (size_t i = 0; i < out.data.size(); ++i) {
      double u = static_cast<double>(rng() >> 11) * 0x1p-53;
      (*mask)[i] = u >= rate;
      out.data[i] = (*mask)[i] ? out.data[i] * keep_scale : S(0);
    }
    return unary_binary(std::move(out), a, -1, [this, a, mask, keep_scale](int y) {
      if (!needs_grad(a)) return;
      const auto& g = grad(y);
      auto& ga = grad(a);
      for (int64_t i = 0; i < g.numel(); ++i)
        if ((*mask)[i]) ga[i] += g[i] * keep_scale;
    });
  }

  // ---- matrix ops ----

  /// x:[..., K] * w:[K, N] + b:[N]. Leading dims are flattened into rows.
  int linear(int x, int w, int b) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    if (wv.rank() != 2 || xv.shape.back() != wv.dim(0))
      throw std::invalid_argument("linear: inner dims mismatch");
    int64_t k = wv.dim(0), n = wv.dim(1);
    int64_t m = xv.numel() / k;
    std::vector<int64_t> osh(xv.shape.begin(), xv.shape.end() - 1);
    osh.push_back(n);
    Tensor<S> out(osh);
    Map(out.ptr(), m, n).noalias() = CMap(xv.ptr(), m, k) * CMap(wv.ptr(), k, n);
    if (b >= 0) {
      const auto& bv = val(b);
      if (bv.numel() != n) throw std::invalid_argument("linear: bias size mismatch");
      Map(out.ptr(), m, n).rowwise() += CMap(bv.ptr(), 1, n).row(0);
    }
    return unary_binary(std::move(out), x, w, [this, x, w, b, m, k, n](int y) {
      const auto& g = grad(y);
      CMap gm(g.ptr(), m, n);
      if (needs_grad(x))
        map2(grad(x), m, k).noalias() += gm * CMap(val(w).ptr(), k, n).transpose();
      if (needs_grad(w))
        map2(grad(w), k, n).noalias() += CMap(val(x).ptr(), m, k).transpose() * gm;
      if (b >= 0 && needs_grad(b))
        map2(grad(b), 1, n) += gm.colwise().sum();
    });
  }

  /// out[i] = x[i,:] + table[idx[i],:]. Used for positional/temporal/location
  /// embeddings; table may be a parameter or any computed node.
  int gather_add(int x, int table, std::shared_ptr<std::vector<int32_t>> idx) {
    const auto& xv = val(x);
    const auto& tv = val(table);
    int64_t d = tv.shape.back();
    if (xv.shape.back() != d) throw std::invalid_argument("gather_add: dim mismatch");
    int64_t rows = xv.numel() / d;
    if (static_cast<int64_t>(idx->size()) != rows)
      throw std::invalid_argument("gather_add: index count mismatch");
    Tensor<S> out = xv;
    for (int64_t i = 0; i < rows; ++i) {
      const S* t = tv.ptr() + (*idx)[i] * d;
      S* o = out.ptr() + i * d;
      for (int64_t j = 0; j < d; ++j) o[j] += t[j];
    }
    return unary_binary(std::move(out), x, table, [this, x, table, idx, rows, d](int y) {
      const auto& g = grad(y);
      if (needs_grad(x)) axpy(grad(x), g, S(1));
      if (needs_grad(table)) {
        auto& gt = grad(table);
        for (int64_t i = 0; i < rows; ++i) {
          S* t = gt.ptr() + (*idx)[i] * d;
          const S* gi = g.ptr() + i * d;
          for (int64_t j = 0; j < d; ++j) t[j] += gi[j];
        }
      }
    });
  }

  /// LayerNorm over the last dimension, eps inside the sqrt.
  int layernorm(int x, int gamma, int beta, S eps) {
    const auto& xv = val(x);
    int64_t d = xv.shape.back();
    int64_t rows = xv.numel() / d;
    auto mu = std::make_shared<std::vector<S>>(rows);
    auto rstd = std::make_shared<std::vector<S>>(rows);
    Tensor<S> out(xv.shape);
    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    for (int64_t i = 0; i < rows; ++i) {
      const S* xi = xv.ptr() + i * d;
      S m = 0, v = 0;
      for (int64_t j = 0; j < d; ++j) m += xi[j];
      m /= S(d);
      for (int64_t j = 0; j < d; ++j) v += (xi[j] - m) * (xi[j] - m);
      v /= S(d);
      S rs = S(1) / std::sqrt(v + eps);
      (*mu)[i] = m;
      (*rstd)[i] = rs;
      S* o = out.ptr() + i * d;
      for (int64_t j = 0; j < d; ++j) o[j] = (xi[j] - m) * rs * gv[j] + bv[j];
    }
    int y = make_input(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    nodes_[y].back = [this, x, gamma, beta, y, mu, rstd, rows, d]() {
      const auto& g = grad(y);
      const auto& xv2 = val(x);
      const auto& gv2 = val(gamma);
      for (int64_t i = 0; i < rows; ++i) {
        const S* xi = xv2.ptr() + i * d;
        const S* gi = g.ptr() + i * d;
        S m = (*mu)[i], rs = (*rstd)[i];
        if (needs_grad(gamma) || needs_grad(beta)) {
          auto& gg = grad(gamma);
          auto& gb = grad(beta);
          for (int64_t j = 0; j < d; ++j) {
            if (needs_grad(gamma)) gg[j] += gi[j] * (xi[j] - m) * rs;
            if (needs_grad(beta)) gb[j] += gi[j];
          }
        }
        if (needs_grad(x)) {
          // dL/dx = rs * (dy*gamma - mean(dy*gamma) - xhat * mean(dy*gamma*xhat))
          S s1 = 0, s2 = 0;
          for (int64_t j = 0; j < d; ++j) {
            S dg = gi[j] * gv2[j];
            s1 += dg;
            s2 += dg * (xi[j] - m) * rs;
          }
          s1 /= S(d);
          s2 /= S(d);
          S* gx = grad(x).ptr() + i * d;
          for (int64_t j = 0; j < d; ++j) {
            S xh = (xi[j] - m) * rs;
            gx[j] += rs * (gi[j] * gv2[j] - s1 - xh * s2);
          }
        }
      }
    };
    return y;
  }

  /// Multi-head self-attention core. q,k,v: [B*N, D]; returns [B*N, D]
  /// (concatenated head outputs, before the output projection).
  /// When capture != nullptr the per-head probability matrices are appended
  /// as one tensor of shape [B, heads, N, N].
  int attention(int q, int k, int v, int64_t batch, int64_t n, int64_t heads,
                Tensor<S>* capture = nullptr) {
    const auto& qv = val(q);
    int64_t dmodel = qv.shape.back();
    if (dmodel % heads != 0) throw std::invalid_argument("attention: D % heads != 0");
    int64_t dh = dmodel / heads;
    const S inv_sqrt_dh = S(1) / std::sqrt(S(dh));
    auto probs = std::make_shared<Tensor<S>>(std::vector<int64_t>{batch, heads, n, n});
    Tensor<S> out(qv.shape);
    const auto& kv = val(k);
    const auto& vv = val(v);
    Mat scores(n, n);
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t h = 0; h < heads; ++h) {
        auto qh = CMap(qv.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
        auto kh = CMap(kv.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
        auto vh = CMap(vv.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
        scores.noalias() = qh * kh.transpose() * inv_sqrt_dh;
        
        S* a = probs->ptr() + (b * heads + h) * n * n;
        for (int64_t i = 0; i < n; ++i) {
          S mx = scores.row(i).maxCoeff();
          S sum = 0;
          for (int64_t j = 0; j < n; ++j) {
            S e = std::exp(scores(i, j) - mx);
            a[i * n + j] = e;
            sum += e;
          }
          S inv = S(1) / sum;
          for (int64_t j = 0; j < n; ++j) a[i * n + j] *= inv;
        }
        map2(out, batch * n, dmodel).middleRows(b * n, n).middleCols(h * dh, dh).noalias() =
            CMap(a, n, n) * vh;
      }
    }
    if (capture) *capture = *probs;
    return ternary(std::move(out), q, k, v,
                   [this, q, k, v, probs, batch, n, heads, dh, dmodel, inv_sqrt_dh](int y) {
      const auto& g = grad(y);
      const auto& qv2 = val(q);
      const auto& kv2 = val(k);
      const auto& vv2 = val(v);
      Mat da(n, n), ds(n, n);
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
          const S* a = probs->ptr() + (b * heads + h) * n * n;
          CMap am(a, n, n);
          auto go = CMap(g.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
          auto qh = CMap(qv2.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
          auto kh = CMap(kv2.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
          auto vh = CMap(vv2.ptr() + b * n * dmodel, n, dmodel).middleCols(h * dh, dh);
          if (needs_grad(v))
            map2(grad(v), batch * n, dmodel).middleRows(b * n, n).middleCols(h * dh, dh)
                .noalias() += am.transpose() * go;
          if (!needs_grad(q) && !needs_grad(k)) continue;
          da.noalias() = go * vh.transpose();
          // softmax backward, rowwise
          for (int64_t i = 0; i < n; ++i) {
            S dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += da(i, j) * a[i * n + j];
            for (int64_t j = 0; j < n; ++j)
              ds(i, j) = a[i * n + j] * (da(i, j) - dot) * inv_sqrt_dh;
          }
          if (needs_grad(q))
            map2(grad(q), batch * n, dmodel).middleRows(b * n, n).middleCols(h * dh, dh)
                .noalias() += ds * kh;
          if (needs_grad(k))
            map2(grad(k), batch * n, dmodel).middleRows(b * n, n).middleCols(h * dh, dh)
                .noalias() += ds.transpose() * qh;
        }
      }
    });
  }

  // ---- losses ----

  /// Mean of squared differences over every element.
  int mse_loss(int pred, const Tensor<S>& target) {
    const auto& pv = val(pred);
    if (!pv.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
    auto tgt = std::make_shared<Tensor<S>>(target);
    S acc = 0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
      S e = pv[i] - target[i];
      acc += e * e;
    }
    Tensor<S> out({1});
    out[0] = acc / S(pv.numel());
    return unary_binary(std::move(out), pred, -1, [this, pred, tgt](int y) {
      if (!needs_grad(pred)) return;
      const auto& pv2 = val(pred);
      S g = grad(y)[0] * S(2) / S(pv2.numel());
      auto& gp = grad(pred);
      for (int64_t i = 0; i < pv2.numel(); ++i) gp[i] += g * (pv2[i] - (*tgt)[i]);
    });
  }

  /// Mean Huber loss: 0.5 e^2 for |e| <= delta, else delta*|e| - 0.5 delta^2.
  int huber_loss(int pred, const Tensor<S>& target, S delta) {
    const auto& pv = val(pred);
    if (!pv.same_shape(target)) throw std::invalid_argument("huber_loss: shape mismatch");
    if (delta <= S(0)) throw std::invalid_argument("huber_loss: delta must be > 0");
    auto tgt = std::make_shared<Tensor<S>>(target);
    S acc = 0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
      S e = pv[i] - target[i];
      S ae = std::abs(e);
      acc += ae <= delta ? S(0.5) * e * e : delta * ae - S(0.5) * delta * delta;
    }
    Tensor<S> out({1});
    out[0] = acc / S(pv.numel());
    return unary_binary(std::move(out), pred, -1, [this, pred, tgt, delta](int y) {
      if (!needs_grad(pred)) return;
      const auto& pv2 = val(pred);
      S g = grad(y)[0] / S(pv2.numel());
      auto& gp = grad(pred);
      for (int64_t i = 0; i < pv2.numel(); ++i) {
        S e = pv2[i] - (*tgt)[i];
        gp[i] += g * (std::abs(e) <= delta ? e : (e > S(0) ? delta : -delta));
      }
    });
  }

  // ---- helpers shared with the conv ops ----

  int nary(Tensor<S> out, std::initializer_list<int> parents,
           std::function<void(int)> back_fn) {
    bool ng = false;
    for (int p : parents)
      if (p >= 0 && needs_grad(p)) ng = true;
    int y = make_input(std::move(out), ng);
    if (ng) nodes_[y].back = [back_fn, y]() { back_fn(y); };
    return y;
  }

  int nary(Tensor<S> out, const std::vector<int>& parents,
           std::function<void(int)> back_fn) {
    bool ng = false;
    for (int p : parents)
      if (p >= 0 && needs_grad(p)) ng = true;
    int y = make_input(std::move(out), ng);
    if (ng) nodes_[y].back = [back_fn, y]() { back_fn(y); };
    return y;
  }

  int unary_binary(Tensor<S> out, int a, int b, std::function<void(int)> back_fn) {
    return nary(std::move(out), {a, b}, std::move(back_fn));
  }

  int ternary(Tensor<S> out, int a, int b, int c, std::function<void(int)> back_fn) {
    return nary(std::move(out), {a, b, c}, std::move(back_fn));
  }

  static void axpy(Tensor<S>& dst, const Tensor<S>& src, S w) {
    for (int64_t i = 0; i < src.numel(); ++i) dst[i] += w * src[i];
  }

  Map map2(Tensor<S>& t, int64_t r, int64_t c) { return Map(t.ptr(), r, c); }

 private:
  std::vector<Node> nodes_;
};

}  // namespace yieldnet
