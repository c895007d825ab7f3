#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "effscale/checkpoint.hpp"
#include "effscale/config.hpp"
#include "effscale/tensor.hpp"

namespace effscale {

// Routing decision for one token.
template <class T>
struct Route {
  std::vector<std::size_t> experts;  // ordered by descending probability
  std::vector<T> gates;              // aligned with experts
  std::vector<T> probs;              // full softmax over all experts
  T z = T{0};                        // log-sum-exp of the router logits
};

// Top-k selection over a fixed probability vector. Ties go to the lower index.
template <class T>
std::vector<std::size_t> select_top_k(std::span<const T> probs, std::size_t k) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  idx.resize(k);
  return idx;
}

// Gates for a given expert selection: the selected probabilities, renormalized
// to sum to one when requested.
template <class T>
std::vector<T> gates_for(std::span<const T> probs, std::span<const std::size_t> experts, bool renormalize) {
  std::vector<T> g(experts.size());
  T sum = T{0};
  for (std::size_t i = 0; i < experts.size(); ++i) {
    g[i] = probs[experts[i]];
    sum += g[i];
  }
  if (renormalize)
    for (auto& v : g) v /= sum;
  return g;
}

// Routes a token from its router logits. When `fixed` is non-null the expert
// selection is taken from it instead of being recomputed (used to hold routing
// constant under finite-difference perturbations).
template <class T>
Route<T> route_logits(std::span<const T> logits, const MoEConfig& cfg, const std::vector<std::size_t>* fixed = nullptr) {
  if (!all_finite<T>(logits)) fail("non-finite router logits");
  Route<T> r;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = T{0};
  r.probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.probs[i] = std::exp(logits[i] - mx);
    sum += r.probs[i];
  }
  for (auto& p : r.probs) p /= sum;
  r.z = mx + std::log(sum);
  r.experts = fixed ? *fixed : select_top_k<T>(r.probs, static_cast<std::size_t>(cfg.top_k));
  r.gates = gates_for<T>(r.probs, r.experts, cfg.renormalize_gates);
  return r;
}

// Routes hidden vector x through router weights [hidden, n_experts].
template <class T>
Route<T> route(std::span<const T> x, const Tensor<T>& router, const MoEConfig& cfg) {
  if (router.rank() != 2 || router.rows() != x.size() || router.cols() != static_cast<std::size_t>(cfg.n_experts))
    fail("router shape " + shape_string(router.shape) + " does not match input/expert count");
  std::vector<T> logits(router.cols());
  vecmat<T>(x, router, logits);
  return route_logits<T>(logits, cfg);
}

// Per-batch routing statistics. f counts hard assignments normalized by
// k * tokens; P is the mean full softmax.
struct RoutingStats {
  std::vector<double> f;
  std::vector<double> P;
  std::vector<double> z;

  RoutingStats() = default;
  explicit RoutingStats(std::size_t n_experts) : f(n_experts, 0.0), P(n_experts, 0.0) {}

  template <class T>
  void add(const Route<T>& r) {
    for (std::size_t e : r.experts) f[e] += 1.0;
    for (std::size_t i = 0; i < P.size(); ++i) P[i] += static_cast<double>(r.probs[i]);
    z.push_back(static_cast<double>(r.z));
  }

  // Converts accumulated sums to fractions; call once after all tokens.
  void finalize(std::size_t top_k) {
    const double tokens = static_cast<double>(z.size());
    if (tokens == 0) return;
    for (auto& v : f) v /= tokens * static_cast<double>(top_k);
    for (auto& v : P) v /= tokens;
  }
};

// N * sum_i f_i * P_i
inline double load_balance_loss(const RoutingStats& stats, std::size_t n_experts) {
  double s = 0.0;
  for (std::size_t i = 0; i < n_experts; ++i) s += stats.f[i] * stats.P[i];
  return static_cast<double>(n_experts) * s;
}

// Mean over tokens of the squared router log-sum-exp.
inline double max_z_loss(std::span<const double> z) {
  if (z.empty()) return 0.0;
  double s = 0.0;
  for (double v : z) s += v * v;
  return s / static_cast<double>(z.size());
}

inline double moe_total_loss(double ce, double aux, double z, const MoEConfig& cfg) {
  return ce + cfg.aux_coeff * aux + cfg.z_coeff * z;
}

// Replaces every dense MLP with n_experts bitwise replicas plus a freshly drawn
// router. Non-MLP tensors are copied unchanged.
inline Checkpoint upcycle(const Checkpoint& dense, const MoEConfig& cfg, std::uint64_t seed) {
  if (dense.moe) fail("checkpoint is already a mixture-of-experts model");
  require_valid(cfg);
  validate_model(dense);
  Checkpoint out{dense.config, cfg, {}};
  Rng rng(seed);
  const auto H = static_cast<std::size_t>(dense.config.hidden_dim);
  const auto E = static_cast<std::size_t>(cfg.n_experts);
  for (const auto& [name, t] : dense.tensors)
    if (name.find(".mlp.") == std::string::npos) out.tensors.emplace(name, t);
  for (std::size_t l = 0; l < static_cast<std::size_t>(dense.config.n_layers); ++l) {
    const auto p = layer_prefix(l);
    Tensor<float> router({H, E});
    for (auto& v : router.data) v = static_cast<float>(rng.normal() * cfg.router_init_std);
    out.tensors.emplace(p + "moe.router", std::move(router));
    for (std::size_t e = 0; e < E; ++e)
      for (const char* w : {"w_gate", "w_up", "w_down"})
        out.tensors.emplace(expert_prefix(l, e) + w, dense.get(p + "mlp." + w));
  }
  return out;
}

}  // namespace effscale
