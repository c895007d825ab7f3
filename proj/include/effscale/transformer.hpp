#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "effscale/checkpoint.hpp"
#include "effscale/config.hpp"
#include "effscale/moe.hpp"
#include "effscale/tensor.hpp"

// Reference decoder-only transformer. Pre-norm LLaMA-style blocks:
//   embed -> L x [RMSNorm -> rotary GQA attention (+ optional QKV bias) -> add
//              -> RMSNorm -> SiLU-gated MLP or top-k MoE -> add]
//   -> RMSNorm -> unembed
// Everything is templated on the scalar type so the same code runs in binary32
// (storage precision) and binary64 (gradient checks).

namespace effscale {

inline constexpr double kNormEps = 1e-6;
inline constexpr double kRopeBase = 10000.0;

using TokenId = std::uint32_t;

template <class T>
struct ForwardTrace {
  Tensor<T> logits;    // [seq, vocab]
  std::vector<T> loss; // next-token cross-entropy, one entry per position that has a successor
};

struct LossBreakdown {
  double ce = 0.0;
  double aux = 0.0;  // load-balancing loss averaged over layers (MoE only)
  double z = 0.0;    // max z-loss averaged over layers (MoE only)
  double total = 0.0;
};

// Expert selections, indexed [layer][token] with tokens numbered across the
// whole batch in sequence order.
using RoutingRecord = std::vector<std::vector<std::vector<std::size_t>>>;

template <class T>
struct GradResult {
  LossBreakdown loss;
  TensorMap<T> grads;
  RoutingRecord routing;
};

template <class T>
Model<T> random_init(const ModelConfig& config, std::uint64_t seed, double stddev = 0.02,
                     const std::optional<MoEConfig>& moe = std::nullopt) {
  require_valid(config);
  Model<T> m{config, moe, {}};
  Rng rng(seed);
  for (const auto& [name, shape] : expected_shapes(config, moe)) {
    Tensor<T> t(shape);
    const bool is_norm = name.ends_with("_norm");
    const double sd = name.ends_with("moe.router") ? moe->router_init_std : stddev;
    for (auto& v : t.data) v = is_norm ? T{1} : static_cast<T>(rng.normal() * sd);
    m.tensors.emplace(name, std::move(t));
  }
  return m;
}

namespace detail {

template <class T>
struct LayerRefs {
  const Tensor<T>* attn_norm = nullptr;
  const Tensor<T>* wq = nullptr;
  const Tensor<T>* wk = nullptr;
  const Tensor<T>* wv = nullptr;
  const Tensor<T>* wo = nullptr;
  const Tensor<T>* q_bias = nullptr;
  const Tensor<T>* k_bias = nullptr;
  const Tensor<T>* v_bias = nullptr;
  const Tensor<T>* mlp_norm = nullptr;
  const Tensor<T>* w_gate = nullptr;
  const Tensor<T>* w_up = nullptr;
  const Tensor<T>* w_down = nullptr;
  const Tensor<T>* router = nullptr;
  std::vector<std::array<const Tensor<T>*, 3>> experts;  // gate, up, down
};

template <class T>
struct Refs {
  const Tensor<T>* embed = nullptr;
  const Tensor<T>* final_norm = nullptr;
  const Tensor<T>* unembed = nullptr;
  std::vector<LayerRefs<T>> layers;
};

template <class TensorPtr, class Map>
TensorPtr lookup(Map& map, const std::string& name) {
  auto it = map.find(name);
  if (it == map.end()) fail("missing tensor " + name);
  return &it->second;
}

// Resolves the fixed tensor layout into per-layer pointers. Works for both the
// weights (const) and a gradient map of identical structure.
template <class T, class Map, class R>
void resolve_into(Map& map, const ModelConfig& c, const std::optional<MoEConfig>& moe, R& refs) {
  using Ptr = decltype(refs.embed);
  refs.embed = lookup<Ptr>(map, "embed");
  refs.final_norm = lookup<Ptr>(map, "final_norm");
  refs.unembed = lookup<Ptr>(map, "unembed");
  refs.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (std::size_t l = 0; l < refs.layers.size(); ++l) {
    auto& L = refs.layers[l];
    const auto p = layer_prefix(l);
    L.attn_norm = lookup<Ptr>(map, p + "attn_norm");
    L.wq = lookup<Ptr>(map, p + "attn.wq");
    L.wk = lookup<Ptr>(map, p + "attn.wk");
    L.wv = lookup<Ptr>(map, p + "attn.wv");
    L.wo = lookup<Ptr>(map, p + "attn.wo");
    if (c.qkv_bias) {
      L.q_bias = lookup<Ptr>(map, p + "attn.q_bias");
      L.k_bias = lookup<Ptr>(map, p + "attn.k_bias");
      L.v_bias = lookup<Ptr>(map, p + "attn.v_bias");
    }
    L.mlp_norm = lookup<Ptr>(map, p + "mlp_norm");
    if (moe) {
      L.router = lookup<Ptr>(map, p + "moe.router");
      L.experts.resize(static_cast<std::size_t>(moe->n_experts));
      for (std::size_t e = 0; e < L.experts.size(); ++e) {
        const auto ep = expert_prefix(l, e);
        L.experts[e] = {lookup<Ptr>(map, ep + "w_gate"), lookup<Ptr>(map, ep + "w_up"),
                        lookup<Ptr>(map, ep + "w_down")};
      }
    } else {
      L.w_gate = lookup<Ptr>(map, p + "mlp.w_gate");
      L.w_up = lookup<Ptr>(map, p + "mlp.w_up");
      L.w_down = lookup<Ptr>(map, p + "mlp.w_down");
    }
  }
}

template <class T>
struct MutLayerRefs {
  Tensor<T>* attn_norm = nullptr;
  Tensor<T>* wq = nullptr;
  Tensor<T>* wk = nullptr;
  Tensor<T>* wv = nullptr;
  Tensor<T>* wo = nullptr;
  Tensor<T>* q_bias = nullptr;
  Tensor<T>* k_bias = nullptr;
  Tensor<T>* v_bias = nullptr;
  Tensor<T>* mlp_norm = nullptr;
  Tensor<T>* w_gate = nullptr;
  Tensor<T>* w_up = nullptr;
  Tensor<T>* w_down = nullptr;
  Tensor<T>* router = nullptr;
  std::vector<std::array<Tensor<T>*, 3>> experts;
};

template <class T>
struct MutRefs {
  Tensor<T>* embed = nullptr;
  Tensor<T>* final_norm = nullptr;
  Tensor<T>* unembed = nullptr;
  std::vector<MutLayerRefs<T>> layers;
};

template <class T>
T silu(T a) {
  return a / (T{1} + std::exp(-a));
}

template <class T>
T silu_grad(T a) {
  const T s = T{1} / (T{1} + std::exp(-a));
  return s * (T{1} + a * (T{1} - s));
}

// y = x * rsqrt(mean(x^2) + eps) * g; returns the reciprocal rms.
template <class T>
T rmsnorm(std::span<const T> x, const Tensor<T>& gain, std::span<T> y) {
  const std::size_t n = x.size();
  const T ms = pairwise_sum<T>(0, n, [&](std::size_t i) { return x[i] * x[i]; }) / static_cast<T>(n);
  const T r = T{1} / std::sqrt(ms + static_cast<T>(kNormEps));
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] * r) * gain.data[i];
  return r;
}

template <class T>
void rmsnorm_backward(std::span<const T> x, const Tensor<T>& gain, T r, std::span<const T> dy, std::span<T> dx,
                      Tensor<T>& dgain) {
  const std::size_t n = x.size();
  T a = T{0};
  for (std::size_t i = 0; i < n; ++i) {
    dgain.data[i] += dy[i] * x[i] * r;
    a += dy[i] * gain.data[i] * x[i];
  }
  const T c = r * r * r * a / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] += r * dy[i] * gain.data[i] - c * x[i];
}

// dx += dy * W^T
template <class T>
void vecmat_t_acc(std::span<const T> dy, const Tensor<T>& w, std::span<T> dx) {
  const std::size_t in = w.rows(), out = w.cols();
  for (std::size_t i = 0; i < in; ++i) {
    const T* row = w.data.data() + i * out;
    T s = T{0};
    for (std::size_t o = 0; o < out; ++o) s += row[o] * dy[o];
    dx[i] += s;
  }
}

// dW += x^T dy
template <class T>
void outer_acc(std::span<const T> x, std::span<const T> dy, Tensor<T>& dw) {
  const std::size_t in = dw.rows(), out = dw.cols();
  for (std::size_t i = 0; i < in; ++i) {
    const T xi = x[i];
    if (xi == T{0}) continue;
    T* row = dw.data.data() + i * out;
    for (std::size_t o = 0; o < out; ++o) row[o] += xi * dy[o];
  }
}

template <class T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;  // [pos][pair]

  RopeTable(std::size_t n, std::size_t head_dim) : half(head_dim / 2), cos(n * half), sin(n * half) {
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double ang = static_cast<double>(p) * freq;
        cos[p * half + i] = static_cast<T>(std::cos(ang));
        sin[p * half + i] = static_cast<T>(std::sin(ang));
      }
  }

  // Rotates adjacent pairs (2i, 2i+1) of every head in `v`; odd head_dim leaves
  // the last lane untouched.
  void apply(std::span<T> v, std::size_t pos, std::size_t head_dim, bool inverse) const {
    for (std::size_t h = 0; h < v.size() / head_dim; ++h) {
      T* x = v.data() + h * head_dim;
      for (std::size_t i = 0; i < half; ++i) {
        const T c = cos[pos * half + i];
        const T s = inverse ? -sin[pos * half + i] : sin[pos * half + i];
        const T a = x[2 * i], b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
      }
    }
  }
};

template <class T>
struct ExpertCache {
  std::size_t expert = 0;
  std::vector<T> gate_pre, up, act, y;
};

template <class T>
struct TokenRouting {
  Route<T> route;
  std::vector<ExpertCache<T>> selected;
};

template <class T>
struct LayerCache {
  Tensor<T> x_in, n1, q, k, v, ctx, x_mid, n2;
  std::vector<T> r1, r2;
  std::vector<Tensor<T>> probs;  // per query head, [seq, seq] lower triangle
  Tensor<T> gate_pre, up, act;   // dense MLP
  std::vector<TokenRouting<T>> moe;
};

template <class T>
struct SeqCache {
  std::vector<LayerCache<T>> layers;
  Tensor<T> x_final, nf, logits;
  std::vector<T> rf;
};

template <class T>
void expert_forward(std::span<const T> x, const std::array<const Tensor<T>*, 3>& w, ExpertCache<T>& c) {
  const std::size_t I = w[0]->cols(), H = w[2]->cols();
  c.gate_pre.assign(I, T{0});
  c.up.assign(I, T{0});
  c.act.assign(I, T{0});
  c.y.assign(H, T{0});
  vecmat<T>(x, *w[0], c.gate_pre);
  vecmat<T>(x, *w[1], c.up);
  for (std::size_t i = 0; i < I; ++i) c.act[i] = silu(c.gate_pre[i]) * c.up[i];
  vecmat<T>(c.act, *w[2], c.y);
}

// Forward pass over one sequence, filling `cache`. `fixed` (optional) supplies
// expert selections for this sequence's tokens, indexed [layer][token].
template <class T>
void forward_sequence(const Model<T>& m, const Refs<T>& R, std::span<const TokenId> tokens, SeqCache<T>& cache,
                      const RoutingRecord* fixed, std::size_t token_offset) {
  const ModelConfig& c = m.config;
  const std::size_t n = tokens.size();
  const auto H = static_cast<std::size_t>(c.hidden_dim);
  const auto I = static_cast<std::size_t>(c.intermediate_dim);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto hd = static_cast<std::size_t>(c.head_dim);
  const std::size_t nh = static_cast<std::size_t>(c.n_heads), qd = c.q_dim(), kvd = c.kv_dim();
  const std::size_t hpg = c.heads_per_group();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const RopeTable<T> rope(n, hd);

  Tensor<T> x({n, H});
  for (std::size_t t = 0; t < n; ++t) std::copy_n(R.embed->row(tokens[t]).begin(), H, x.row(t).begin());

  cache.layers.resize(R.layers.size());
  for (std::size_t l = 0; l < R.layers.size(); ++l) {
    const auto& L = R.layers[l];
    auto& C = cache.layers[l];
    C.x_in = x;
    C.n1 = Tensor<T>({n, H});
    C.r1.assign(n, T{0});
    C.q = Tensor<T>({n, qd});
    C.k = Tensor<T>({n, kvd});
    C.v = Tensor<T>({n, kvd});
    for (std::size_t t = 0; t < n; ++t) {
      C.r1[t] = rmsnorm<T>(C.x_in.row(t), *L.attn_norm, C.n1.row(t));
      vecmat<T>(C.n1.row(t), *L.wq, C.q.row(t), L.q_bias);
      vecmat<T>(C.n1.row(t), *L.wk, C.k.row(t), L.k_bias);
      vecmat<T>(C.n1.row(t), *L.wv, C.v.row(t), L.v_bias);
      rope.apply(C.q.row(t), t, hd, false);
      rope.apply(C.k.row(t), t, hd, false);
    }
    C.probs.assign(nh, Tensor<T>({n, n}));
    C.ctx = Tensor<T>({n, qd});
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t g = h / hpg;
      auto& P = C.probs[h];
      for (std::size_t t = 0; t < n; ++t) {
        const T* q = C.q.row(t).data() + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          const T* k = C.k.row(u).data() + g * hd;
          T s = T{0};
          for (std::size_t d = 0; d < hd; ++d) s += q[d] * k[d];
          P.at(t, u) = s * scale;
          mx = std::max(mx, P.at(t, u));
        }
        T sum = T{0};
        for (std::size_t u = 0; u <= t; ++u) {
          P.at(t, u) = std::exp(P.at(t, u) - mx);
          sum += P.at(t, u);
        }
        T* out = C.ctx.row(t).data() + h * hd;
        for (std::size_t u = 0; u <= t; ++u) {
          P.at(t, u) /= sum;
          const T* v = C.v.row(u).data() + g * hd;
          for (std::size_t d = 0; d < hd; ++d) out[d] += P.at(t, u) * v[d];
        }
      }
    }
    C.x_mid = C.x_in;
    std::vector<T> tmp(H);
    for (std::size_t t = 0; t < n; ++t) {
      vecmat<T>(C.ctx.row(t), *L.wo, tmp);
      for (std::size_t i = 0; i < H; ++i) C.x_mid.at(t, i) += tmp[i];
    }

    C.n2 = Tensor<T>({n, H});
    C.r2.assign(n, T{0});
    x = C.x_mid;
    if (!m.moe) {
      C.gate_pre = Tensor<T>({n, I});
      C.up = Tensor<T>({n, I});
      C.act = Tensor<T>({n, I});
      for (std::size_t t = 0; t < n; ++t) {
        C.r2[t] = rmsnorm<T>(C.x_mid.row(t), *L.mlp_norm, C.n2.row(t));
        vecmat<T>(C.n2.row(t), *L.w_gate, C.gate_pre.row(t));
        vecmat<T>(C.n2.row(t), *L.w_up, C.up.row(t));
        for (std::size_t i = 0; i < I; ++i) C.act.at(t, i) = silu(C.gate_pre.at(t, i)) * C.up.at(t, i);
        vecmat<T>(C.act.row(t), *L.w_down, tmp);
        for (std::size_t i = 0; i < H; ++i) x.at(t, i) += tmp[i];
      }
    } else {
      const auto E = static_cast<std::size_t>(m.moe->n_experts);
      C.moe.assign(n, TokenRouting<T>{});
      std::vector<T> logits(E);
      for (std::size_t t = 0; t < n; ++t) {
        C.r2[t] = rmsnorm<T>(C.x_mid.row(t), *L.mlp_norm, C.n2.row(t));
        vecmat<T>(C.n2.row(t), *L.router, logits);
        const std::vector<std::size_t>* forced = fixed ? &(*fixed)[l][token_offset + t] : nullptr;
        auto& tr = C.moe[t];
        tr.route = route_logits<T>(logits, *m.moe, forced);
        tr.selected.resize(tr.route.experts.size());
        for (std::size_t s = 0; s < tr.route.experts.size(); ++s) {
          auto& ec = tr.selected[s];
          ec.expert = tr.route.experts[s];
          expert_forward<T>(C.n2.row(t), L.experts[ec.expert], ec);
        }
        for (std::size_t i = 0; i < H; ++i) {
          T acc = T{0};
          for (std::size_t s = 0; s < tr.selected.size(); ++s) acc += tr.route.gates[s] * tr.selected[s].y[i];
          x.at(t, i) += acc;
        }
      }
    }
  }

  cache.x_final = x;
  cache.nf = Tensor<T>({n, H});
  cache.rf.assign(n, T{0});
  cache.logits = Tensor<T>({n, V});
  for (std::size_t t = 0; t < n; ++t) {
    cache.rf[t] = rmsnorm<T>(cache.x_final.row(t), *R.final_norm, cache.nf.row(t));
    vecmat<T>(cache.nf.row(t), *R.unembed, cache.logits.row(t));
  }
}

// Cross-entropy of each row of `logits` against the following token; also
// writes softmax probabilities into `probs` when non-null.
template <class T>
std::vector<T> next_token_loss(const Tensor<T>& logits, std::span<const TokenId> tokens, Tensor<T>* probs) {
  const std::size_t n = tokens.size(), V = logits.cols();
  std::vector<T> loss(n > 0 ? n - 1 : 0);
  if (probs) *probs = Tensor<T>({n, V});
  for (std::size_t t = 0; t + 1 < n; ++t) {
    const auto row = logits.row(t);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = T{0};
    for (T v : row) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    loss[t] = lse - row[tokens[t + 1]];
    if (probs)
      for (std::size_t j = 0; j < V; ++j) probs->at(t, j) = std::exp(row[j] - lse);
  }
  return loss;
}

template <class T>
void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) fail("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.context_length))
    fail("sequence length " + std::to_string(tokens.size()) + " exceeds context_length " +
         std::to_string(c.context_length));
  for (TokenId t : tokens)
    if (t >= static_cast<TokenId>(c.vocab_size))
      fail("token id " + std::to_string(t) + " out of range for vocab_size " + std::to_string(c.vocab_size));
}

template <class T>
Refs<T> resolve(const Model<T>& m) {
  Refs<T> R;
  resolve_into<T>(m.tensors, m.config, m.moe, R);
  return R;
}

}  // namespace detail

template <class T>
ForwardTrace<T> forward(const Model<T>& m, std::span<const TokenId> tokens) {
  detail::check_tokens<T>(m.config, tokens);
  const auto R = detail::resolve(m);
  detail::SeqCache<T> cache;
  detail::forward_sequence<T>(m, R, tokens, cache, nullptr, 0);
  ForwardTrace<T> trace;
  trace.loss = detail::next_token_loss<T>(cache.logits, tokens, nullptr);
  trace.logits = std::move(cache.logits);
  return trace;
}

// Mean next-token cross-entropy over non-overlapping windows of seq_len inputs
// (each window reads seq_len + 1 tokens; consecutive windows share one token).
template <class T>
double eval_loss(const Model<T>& m, std::span<const TokenId> data, std::size_t seq_len, std::size_t max_windows = 0) {
  if (seq_len < 1) fail("seq_len must be >= 1");
  if (data.size() < seq_len + 1) fail("dataset shorter than seq_len + 1 tokens");
  std::size_t windows = (data.size() - 1) / seq_len;
  if (max_windows > 0) windows = std::min(windows, max_windows);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < windows; ++w) {
    const auto trace = forward<T>(m, data.subspan(w * seq_len, seq_len + 1));
    for (T v : trace.loss) sum += static_cast<double>(v);
    count += trace.loss.size();
  }
  return sum / static_cast<double>(count);
}

// Exact reverse-mode gradients of the batch objective (mean next-token
// cross-entropy, plus weighted auxiliary router losses for MoE models). Each
// sequence contributes all positions but its last as prediction targets.
// With `fixed_routing`, expert selections are taken from it rather than
// recomputed; the returned record holds the selections actually used.
template <class T>
GradResult<T> backward(const Model<T>& m, const std::vector<std::vector<TokenId>>& batch,
                       const RoutingRecord* fixed_routing = nullptr) {
  using namespace detail;
  if (batch.empty()) fail("empty batch");
  for (const auto& s : batch) {
    check_tokens<T>(m.config, s);
    if (s.size() < 2) fail("every batch sequence needs at least two tokens");
  }
  const ModelConfig& c = m.config;
  const auto H = static_cast<std::size_t>(c.hidden_dim);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto hd = static_cast<std::size_t>(c.head_dim);
  const std::size_t nh = static_cast<std::size_t>(c.n_heads), qd = c.q_dim(), kvd = c.kv_dim();
  const std::size_t hpg = c.heads_per_group();
  const std::size_t n_layers = static_cast<std::size_t>(c.n_layers);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const auto R = resolve(m);

  std::vector<SeqCache<T>> caches(batch.size());
  std::size_t total_tokens = 0, total_targets = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    forward_sequence<T>(m, R, batch[b], caches[b], fixed_routing, total_tokens);
    total_tokens += batch[b].size();
    total_targets += batch[b].size() - 1;
  }

  GradResult<T> result;
  std::vector<Tensor<T>> probs(batch.size());
  double ce_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (T v : next_token_loss<T>(caches[b].logits, batch[b], &probs[b])) ce_sum += static_cast<double>(v);
  result.loss.ce = ce_sum / static_cast<double>(total_targets);
  result.loss.total = result.loss.ce;

  std::vector<RoutingStats> stats;
  if (m.moe) {
    const auto E = static_cast<std::size_t>(m.moe->n_experts);
    result.routing.assign(n_layers, {});
    stats.assign(n_layers, RoutingStats(E));
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t b = 0; b < batch.size(); ++b)
        for (const auto& tr : caches[b].layers[l].moe) {
          stats[l].add(tr.route);
          result.routing[l].push_back(tr.route.experts);
        }
      stats[l].finalize(static_cast<std::size_t>(m.moe->top_k));
      result.loss.aux += load_balance_loss(stats[l], E) / static_cast<double>(n_layers);
      result.loss.z += max_z_loss(stats[l].z) / static_cast<double>(n_layers);
    }
    result.loss.total = moe_total_loss(result.loss.ce, result.loss.aux, result.loss.z, *m.moe);
  }
  if (!std::isfinite(result.loss.total)) fail("non-finite loss");

  for (const auto& [name, t] : m.tensors) result.grads.emplace(name, Tensor<T>(t.shape));
  MutRefs<T> G;
  resolve_into<T>(result.grads, c, m.moe, G);

  const T inv_targets = static_cast<T>(1.0 / static_cast<double>(total_targets));
  const T inv_route = static_cast<T>(1.0 / (static_cast<double>(total_tokens) * static_cast<double>(n_layers)));

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& tokens = batch[b];
    auto& S = caches[b];
    const std::size_t n = tokens.size();

    Tensor<T> dx({n, H});
    {
      std::vector<T> dlog(V), dnf(H);
      for (std::size_t t = 0; t + 1 < n; ++t) {
        for (std::size_t j = 0; j < V; ++j) dlog[j] = probs[b].at(t, j) * inv_targets;
        dlog[tokens[t + 1]] -= inv_targets;
        outer_acc<T>(S.nf.row(t), dlog, *G.unembed);
        std::fill(dnf.begin(), dnf.end(), T{0});
        vecmat_t_acc<T>(dlog, *R.unembed, dnf);
        rmsnorm_backward<T>(S.x_final.row(t), *R.final_norm, S.rf[t], dnf, dx.row(t), *G.final_norm);
      }
    }

    const RopeTable<T> rope(n, hd);
    for (std::size_t l = n_layers; l-- > 0;) {
      const auto& L = R.layers[l];
      auto& GL = G.layers[l];
      auto& C = S.layers[l];

      // MLP / MoE branch: x_out = x_mid + f(norm(x_mid))
      Tensor<T> dmid = dx;
      std::vector<T> dn2(H);
      for (std::size_t t = 0; t < n; ++t) {
        std::fill(dn2.begin(), dn2.end(), T{0});
        const auto dout = dx.row(t);
        if (!m.moe) {
          const std::size_t I = L.w_gate->cols();
          outer_acc<T>(C.act.row(t), dout, *GL.w_down);
          std::vector<T> dact(I, T{0}), dg(I), du(I);
          vecmat_t_acc<T>(dout, *L.w_down, dact);
          for (std::size_t i = 0; i < I; ++i) {
            const T a = C.gate_pre.at(t, i);
            dg[i] = dact[i] * C.up.at(t, i) * silu_grad(a);
            du[i] = dact[i] * silu(a);
          }
          outer_acc<T>(C.n2.row(t), dg, *GL.w_gate);
          outer_acc<T>(C.n2.row(t), du, *GL.w_up);
          vecmat_t_acc<T>(dg, *L.w_gate, dn2);
          vecmat_t_acc<T>(du, *L.w_up, dn2);
        } else {
          const MoEConfig& mc = *m.moe;
          const auto E = static_cast<std::size_t>(mc.n_experts);
          auto& tr = C.moe[t];
          const auto& rt = tr.route;
          std::vector<T> dgate(tr.selected.size());
          for (std::size_t s = 0; s < tr.selected.size(); ++s) {
            auto& ec = tr.selected[s];
            const auto& W = L.experts[ec.expert];
            auto& GW = GL.experts[ec.expert];
            T acc = T{0};
            for (std::size_t i = 0; i < H; ++i) acc += dout[i] * ec.y[i];
            dgate[s] = acc;
            const T g = rt.gates[s];
            const std::size_t I = W[0]->cols();
            std::vector<T> dy(H), dact(I, T{0}), dg(I), du(I);
            for (std::size_t i = 0; i < H; ++i) dy[i] = g * dout[i];
            outer_acc<T>(ec.act, dy, *GW[2]);
            vecmat_t_acc<T>(dy, *W[2], dact);
            for (std::size_t i = 0; i < I; ++i) {
              dg[i] = dact[i] * ec.up[i] * silu_grad(ec.gate_pre[i]);
              du[i] = dact[i] * silu(ec.gate_pre[i]);
            }
            outer_acc<T>(C.n2.row(t), dg, *GW[0]);
            outer_acc<T>(C.n2.row(t), du, *GW[1]);
            vecmat_t_acc<T>(dg, *W[0], dn2);
            vecmat_t_acc<T>(du, *W[1], dn2);
          }
          // gates -> probabilities
          std::vector<T> dprob(E, T{0});
          if (mc.renormalize_gates) {
            T ssum = T{0}, dot = T{0};
            for (std::size_t s = 0; s < rt.experts.size(); ++s) {
              ssum += rt.probs[rt.experts[s]];
              dot += dgate[s] * rt.probs[rt.experts[s]];
            }
            for (std::size_t s = 0; s < rt.experts.size(); ++s)
              dprob[rt.experts[s]] += dgate[s] / ssum - dot / (ssum * ssum);
          } else {
            for (std::size_t s = 0; s < rt.experts.size(); ++s) dprob[rt.experts[s]] += dgate[s];
          }
          // load balance: N * sum f_i * mean_t p_i, f held constant
          for (std::size_t e = 0; e < E; ++e)
            dprob[e] += static_cast<T>(mc.aux_coeff * static_cast<double>(E) * stats[l].f[e]) * inv_route;
          T pd = T{0};
          for (std::size_t e = 0; e < E; ++e) pd += rt.probs[e] * dprob[e];
          std::vector<T> dlogit(E);
          const T dz = static_cast<T>(mc.z_coeff * 2.0) * rt.z * inv_route;
          for (std::size_t e = 0; e < E; ++e) dlogit[e] = rt.probs[e] * (dprob[e] - pd) + dz * rt.probs[e];
          outer_acc<T>(C.n2.row(t), dlogit, *GL.router);
          vecmat_t_acc<T>(dlogit, *L.router, dn2);
        }
        rmsnorm_backward<T>(C.x_mid.row(t), *L.mlp_norm, C.r2[t], dn2, dmid.row(t), *GL.mlp_norm);
      }

      // Attention branch: x_mid = x_in + attn(norm(x_in))
      Tensor<T> dctx({n, qd});
      for (std::size_t t = 0; t < n; ++t) {
        outer_acc<T>(C.ctx.row(t), dmid.row(t), *GL.wo);
        vecmat_t_acc<T>(dmid.row(t), *L.wo, dctx.row(t));
      }
      Tensor<T> dq({n, qd}), dk({n, kvd}), dv({n, kvd});
      std::vector<T> dp(n);
      for (std::size_t h = 0; h < nh; ++h) {
        const std::size_t g = h / hpg;
        const auto& P = C.probs[h];
        for (std::size_t t = 0; t < n; ++t) {
          const T* dc = dctx.row(t).data() + h * hd;
          T dot = T{0};
          for (std::size_t u = 0; u <= t; ++u) {
            const T* v = C.v.row(u).data() + g * hd;
            T* dvu = dv.row(u).data() + g * hd;
            T s = T{0};
            for (std::size_t d = 0; d < hd; ++d) {
              s += dc[d] * v[d];
              dvu[d] += P.at(t, u) * dc[d];
            }
            dp[u] = s;
            dot += P.at(t, u) * s;
          }
          const T* q = C.q.row(t).data() + h * hd;
          T* dqt = dq.row(t).data() + h * hd;
          for (std::size_t u = 0; u <= t; ++u) {
            const T ds = P.at(t, u) * (dp[u] - dot) * scale;
            const T* k = C.k.row(u).data() + g * hd;
            T* dku = dk.row(u).data() + g * hd;
            for (std::size_t d = 0; d < hd; ++d) {
              dqt[d] += ds * k[d];
              dku[d] += ds * q[d];
            }
          }
        }
      }
      Tensor<T> dx_in = dmid;
      std::vector<T> dn1(H);
      for (std::size_t t = 0; t < n; ++t) {
        rope.apply(dq.row(t), t, hd, true);
        rope.apply(dk.row(t), t, hd, true);
        std::fill(dn1.begin(), dn1.end(), T{0});
        outer_acc<T>(C.n1.row(t), dq.row(t), *GL.wq);
        outer_acc<T>(C.n1.row(t), dk.row(t), *GL.wk);
        outer_acc<T>(C.n1.row(t), dv.row(t), *GL.wv);
        vecmat_t_acc<T>(dq.row(t), *L.wq, dn1);
        vecmat_t_acc<T>(dk.row(t), *L.wk, dn1);
        vecmat_t_acc<T>(dv.row(t), *L.wv, dn1);
        if (c.qkv_bias) {
          for (std::size_t i = 0; i < qd; ++i) GL.q_bias->data[i] += dq.at(t, i);
          for (std::size_t i = 0; i < kvd; ++i) {
            GL.k_bias->data[i] += dk.at(t, i);
            GL.v_bias->data[i] += dv.at(t, i);
          }
        }
        rmsnorm_backward<T>(C.x_in.row(t), *L.attn_norm, C.r1[t], dn1, dx_in.row(t), *GL.attn_norm);
      }
      dx = std::move(dx_in);
    }
    for (std::size_t t = 0; t < n; ++t) {
      auto row = G.embed->row(tokens[t]);
      for (std::size_t i = 0; i < H; ++i) row[i] += dx.at(t, i);
    }
  }
  return result;
}

// Objective value only (same definition as backward), for finite differences.
template <class T>
LossBreakdown batch_loss(const Model<T>& m, const std::vector<std::vector<TokenId>>& batch,
                         const RoutingRecord* fixed_routing = nullptr) {
  using namespace detail;
  const auto R = resolve(m);
  std::size_t offset = 0, targets = 0;
  double ce = 0.0;
  const std::size_t n_layers = static_cast<std::size_t>(m.config.n_layers);
  std::vector<RoutingStats> stats;
  if (m.moe) stats.assign(n_layers, RoutingStats(static_cast<std::size_t>(m.moe->n_experts)));
  for (const auto& s : batch) {
    check_tokens<T>(m.config, s);
    SeqCache<T> cache;
    forward_sequence<T>(m, R, s, cache, fixed_routing, offset);
    for (T v : next_token_loss<T>(cache.logits, s, nullptr)) ce += static_cast<double>(v);
    if (m.moe)
      for (std::size_t l = 0; l < n_layers; ++l)
        for (const auto& tr : cache.layers[l].moe) stats[l].add(tr.route);
    offset += s.size();
    targets += s.size() - 1;
  }
  LossBreakdown out;
  out.ce = ce / static_cast<double>(targets);
  out.total = out.ce;
  if (m.moe) {
    for (auto& st : stats) {
      st.finalize(static_cast<std::size_t>(m.moe->top_k));
      out.aux += load_balance_loss(st, static_cast<std::size_t>(m.moe->n_experts)) / static_cast<double>(n_layers);
      out.z += max_z_loss(st.z) / static_cast<double>(n_layers);
    }
    out.total = moe_total_loss(out.ce, out.aux, out.z, *m.moe);
  }
  return out;
}

}  // namespace effscale
