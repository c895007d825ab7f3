#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "effscale/checkpoint.hpp"
#include "effscale/config.hpp"
#include "effscale/tensor.hpp"
#include "effscale/transformer.hpp"

namespace effscale {

// Mapping from positions of a grown axis to positions of the original axis.
// `replica[i]` marks positions that are not the first occurrence of their
// source; these are the slots AKI fills from the next layer.
struct WidthMap {
  std::size_t old_dim = 0;
  std::size_t new_dim = 0;
  std::vector<std::size_t> src_index;
  std::vector<std::size_t> multiplicity;
  std::vector<bool> replica;

  static WidthMap from_sources(std::size_t old_dim, std::vector<std::size_t> src) {
    WidthMap m;
    m.old_dim = old_dim;
    m.new_dim = src.size();
    m.multiplicity.assign(old_dim, 0);
    m.replica.assign(src.size(), false);
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] >= old_dim) fail("width map source index out of range");
      m.replica[i] = m.multiplicity[src[i]]++ > 0;
    }
    for (std::size_t j = 0; j < old_dim; ++j)
      if (m.multiplicity[j] == 0) fail("width map is not surjective: source " + std::to_string(j) + " unused");
    m.src_index = std::move(src);
    return m;
  }

  bool is_identity() const {
    if (old_dim != new_dim) return false;
    for (std::size_t i = 0; i < new_dim; ++i)
      if (src_index[i] != i) return false;
    return true;
  }
};

// Circular copy: position i reads source i mod old_dim.
inline WidthMap build_width_map(std::size_t old_dim, std::size_t new_dim) {
  if (old_dim < 1) fail("width map needs old_dim >= 1");
  if (new_dim < old_dim)
    fail("cannot shrink an axis (new_dim " + std::to_string(new_dim) + " < old_dim " + std::to_string(old_dim) + ")");
  std::vector<std::size_t> src(new_dim);
  for (std::size_t i = 0; i < new_dim; ++i) src[i] = i % old_dim;
  return WidthMap::from_sources(old_dim, std::move(src));
}

// Lifts a map over heads to a map over the head_dim lanes of each head.
inline WidthMap lanes_of(const WidthMap& heads, std::size_t head_dim) {
  std::vector<std::size_t> src;
  src.reserve(heads.new_dim * head_dim);
  for (std::size_t h = 0; h < heads.new_dim; ++h)
    for (std::size_t d = 0; d < head_dim; ++d) src.push_back(heads.src_index[h] * head_dim + d);
  return WidthMap::from_sources(heads.old_dim * head_dim, std::move(src));
}

// Split rule on the input axis (axis 0): W'[i,:] = W[src(i),:] / multiplicity.
template <class T>
Tensor<T> expand_in_axis(const Tensor<T>& w, const WidthMap& map) {
  if (w.rank() != 2) fail("expand_in_axis needs a matrix");
  if (w.rows() != map.old_dim)
    fail("input axis length " + std::to_string(w.rows()) + " does not match width map old_dim " +
         std::to_string(map.old_dim));
  if (map.is_identity()) return w;
  Tensor<T> out({map.new_dim, w.cols()});
  for (std::size_t i = 0; i < map.new_dim; ++i) {
    const std::size_t s = map.src_index[i];
    const T div = static_cast<T>(map.multiplicity[s]);
    for (std::size_t o = 0; o < w.cols(); ++o) out.at(i, o) = w.at(s, o) / div;
  }
  return out;
}

// Copy rule on the output axis (last axis). Without a donor every position
// duplicates its source slice. With a donor, replica positions take the
// donor's slice instead (AKI). The donor must have the same shape as `w`.
template <class T>
Tensor<T> expand_out_axis(const Tensor<T>& w, const WidthMap& map, const Tensor<T>* donor = nullptr) {
  if (w.rank() != 1 && w.rank() != 2) fail("expand_out_axis needs a vector or matrix");
  const std::size_t out_len = w.shape.back();
  if (out_len != map.old_dim)
    fail("output axis length " + std::to_string(out_len) + " does not match width map old_dim " +
         std::to_string(map.old_dim));
  if (donor && donor->shape != w.shape)
    fail("donor shape " + shape_string(donor->shape) + " differs from " + shape_string(w.shape));
  if (map.is_identity()) return w;
  const std::size_t rows = w.rank() == 2 ? w.rows() : 1;
  Shape shape = w.shape;
  shape.back() = map.new_dim;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < map.new_dim; ++i) {
      const Tensor<T>& from = (donor && map.replica[i]) ? *donor : w;
      out.data[r * map.new_dim + i] = from.data[r * out_len + map.src_index[i]];
    }
  return out;
}

// One dense transformer block, addressed by role.
template <class T>
struct Block {
  Tensor<T> attn_norm, wq, wk, wv, wo;
  std::optional<Tensor<T>> q_bias, k_bias, v_bias;
  Tensor<T> mlp_norm, w_gate, w_up, w_down;
};

template <class T>
Block<T> extract_block(const Model<T>& m, std::size_t l) {
  if (m.moe) fail("growth operators work on dense checkpoints only");
  const auto p = layer_prefix(l);
  Block<T> b{m.get(p + "attn_norm"), m.get(p + "attn.wq"), m.get(p + "attn.wk"), m.get(p + "attn.wv"),
             m.get(p + "attn.wo"),   std::nullopt,          std::nullopt,          std::nullopt,
             m.get(p + "mlp_norm"),  m.get(p + "mlp.w_gate"), m.get(p + "mlp.w_up"), m.get(p + "mlp.w_down")};
  if (m.config.qkv_bias) {
    b.q_bias = m.get(p + "attn.q_bias");
    b.k_bias = m.get(p + "attn.k_bias");
    b.v_bias = m.get(p + "attn.v_bias");
  }
  return b;
}

template <class T>
void insert_block(Model<T>& m, std::size_t l, Block<T> b) {
  const auto p = layer_prefix(l);
  m.tensors[p + "attn_norm"] = std::move(b.attn_norm);
  m.tensors[p + "attn.wq"] = std::move(b.wq);
  m.tensors[p + "attn.wk"] = std::move(b.wk);
  m.tensors[p + "attn.wv"] = std::move(b.wv);
  m.tensors[p + "attn.wo"] = std::move(b.wo);
  if (b.q_bias) {
    m.tensors[p + "attn.q_bias"] = std::move(*b.q_bias);
    m.tensors[p + "attn.k_bias"] = std::move(*b.k_bias);
    m.tensors[p + "attn.v_bias"] = std::move(*b.v_bias);
  }
  m.tensors[p + "mlp_norm"] = std::move(b.mlp_norm);
  m.tensors[p + "mlp.w_gate"] = std::move(b.w_gate);
  m.tensors[p + "mlp.w_up"] = std::move(b.w_up);
  m.tensors[p + "mlp.w_down"] = std::move(b.w_down);
}

// Head-level maps for query heads and key/value heads.
struct HeadGrowth {
  WidthMap q_heads;
  WidthMap kv_heads;
};

// Query heads grow inside each KV group by circular copy; the group count (and
// so every KV head) is kept. When both sides are plain multi-head attention
// (one query head per KV head) KV heads grow alongside their query heads.
inline HeadGrowth plan_heads(const ModelConfig& src, std::int64_t target_heads, std::int64_t target_kv_groups) {
  if (target_heads < src.n_heads) fail("target head count is smaller than source");
  const bool mha_to_mha = src.kv_groups == src.n_heads && target_kv_groups == target_heads;
  if (!mha_to_mha && target_kv_groups != src.kv_groups)
    fail("kv_groups must match between source and target (" + std::to_string(src.kv_groups) + " vs " +
         std::to_string(target_kv_groups) + "): the GQA group count is preserved by growth");
  if (target_heads % target_kv_groups != 0) fail("target n_heads not divisible by kv_groups");
  const auto src_heads = static_cast<std::size_t>(src.n_heads);
  const auto dst_heads = static_cast<std::size_t>(target_heads);
  HeadGrowth g;
  if (mha_to_mha) {
    g.q_heads = build_width_map(src_heads, dst_heads);
    g.kv_heads = g.q_heads;
    return g;
  }
  const auto groups = static_cast<std::size_t>(src.kv_groups);
  const std::size_t per_src = src_heads / groups, per_dst = dst_heads / groups;
  std::vector<std::size_t> q;
  for (std::size_t grp = 0; grp < groups; ++grp)
    for (std::size_t j = 0; j < per_dst; ++j) q.push_back(grp * per_src + j % per_src);
  g.q_heads = WidthMap::from_sources(src_heads, std::move(q));
  g.kv_heads = build_width_map(groups, groups);
  return g;
}

namespace detail {

template <class T>
Tensor<T> in_then_out(const Tensor<T>& w, const WidthMap& in_map, const WidthMap& out_map, const Tensor<T>* donor) {
  const Tensor<T> wi = expand_in_axis(w, in_map);
  if (!donor) return expand_out_axis(wi, out_map);
  const Tensor<T> di = expand_in_axis(*donor, in_map);
  return expand_out_axis(wi, out_map, &di);
}

}  // namespace detail

// Attention part of a block: query heads per group, hidden-axis splitting on
// every projection input, head-multiplicity splitting on wo's input. Other
// block tensors pass through. `donor` (AKI) is the raw next-layer block.
template <class T>
Block<T> expand_heads(const Block<T>& b, const ModelConfig& src, std::int64_t target_heads,
                      std::int64_t target_kv_groups, const WidthMap& hidden, const Block<T>* donor = nullptr) {
  const auto hd = static_cast<std::size_t>(src.head_dim);
  const HeadGrowth hg = plan_heads(src, target_heads, target_kv_groups);
  const WidthMap q_lanes = lanes_of(hg.q_heads, hd);
  const WidthMap kv_lanes = lanes_of(hg.kv_heads, hd);
  Block<T> out = b;
  out.wq = detail::in_then_out(b.wq, hidden, q_lanes, donor ? &donor->wq : nullptr);
  out.wk = detail::in_then_out(b.wk, hidden, kv_lanes, donor ? &donor->wk : nullptr);
  out.wv = detail::in_then_out(b.wv, hidden, kv_lanes, donor ? &donor->wv : nullptr);
  out.wo = detail::in_then_out(b.wo, q_lanes, hidden, donor ? &donor->wo : nullptr);
  if (b.q_bias) {
    out.q_bias = expand_out_axis(*b.q_bias, q_lanes, donor ? &*donor->q_bias : nullptr);
    out.k_bias = expand_out_axis(*b.k_bias, kv_lanes, donor ? &*donor->k_bias : nullptr);
    out.v_bias = expand_out_axis(*b.v_bias, kv_lanes, donor ? &*donor->v_bias : nullptr);
  }
  return out;
}

template <class T>
Block<T> expand_block(const Block<T>& b, const ModelConfig& src, const ModelConfig& dst, const WidthMap& hidden,
                      const WidthMap& inter, const Block<T>* donor) {
  Block<T> out = expand_heads(b, src, dst.n_heads, dst.kv_groups, hidden, donor);
  out.attn_norm = expand_out_axis(b.attn_norm, hidden);
  out.mlp_norm = expand_out_axis(b.mlp_norm, hidden);
  out.w_gate = detail::in_then_out(b.w_gate, hidden, inter, donor ? &donor->w_gate : nullptr);
  out.w_up = detail::in_then_out(b.w_up, hidden, inter, donor ? &donor->w_up : nullptr);
  out.w_down = detail::in_then_out(b.w_down, inter, hidden, donor ? &donor->w_down : nullptr);
  return out;
}

enum class GrowthMethod { fpi, aki };
enum class DepthMode { stack, interpolate };

NLOHMANN_JSON_SERIALIZE_ENUM(GrowthMethod, {{GrowthMethod::fpi, "fpi"}, {GrowthMethod::aki, "aki"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DepthMode, {{DepthMode::stack, "stack"}, {DepthMode::interpolate, "interpolate"}})

struct GrowthPlan {
  GrowthMethod method = GrowthMethod::fpi;
  DepthMode depth_mode = DepthMode::interpolate;
  ModelConfig source_config;
  ModelConfig target_config;
};

inline void to_json(nlohmann::json& j, const GrowthPlan& p) {
  j = nlohmann::json{{"method", p.method},
                     {"depth_mode", p.depth_mode},
                     {"source_config", p.source_config},
                     {"target_config", p.target_config}};
}

inline void from_json(const nlohmann::json& j, GrowthPlan& p) {
  const auto method = j.at("method").get<std::string>();
  const auto depth = j.at("depth_mode").get<std::string>();
  if (method != "fpi" && method != "aki") fail("unknown growth method '" + method + "'");
  if (depth != "stack" && depth != "interpolate") fail("unknown depth_mode '" + depth + "'");
  j.at("method").get_to(p.method);
  j.at("depth_mode").get_to(p.depth_mode);
  j.at("source_config").get_to(p.source_config);
  j.at("target_config").get_to(p.target_config);
}

inline std::optional<std::string> validate_plan(const GrowthPlan& p) {
  const auto& s = p.source_config;
  const auto& t = p.target_config;
  if (auto e = validate_config(s)) return "source_config: " + *e;
  if (auto e = validate_config(t)) return "target_config: " + *e;
  if (t.n_layers < s.n_layers) return "target n_layers is smaller than source";
  if (t.hidden_dim < s.hidden_dim) return "target hidden_dim is smaller than source";
  if (t.intermediate_dim < s.intermediate_dim) return "target intermediate_dim is smaller than source";
  if (t.n_heads < s.n_heads) return "target n_heads is smaller than source";
  if (t.head_dim != s.head_dim) return "head_dim must match between source and target (head count grows instead)";
  const bool mha_to_mha = s.kv_groups == s.n_heads && t.kv_groups == t.n_heads;
  if (t.kv_groups != s.kv_groups && !mha_to_mha)
    return "kv_groups must match between source and target (" + std::to_string(s.kv_groups) + " vs " +
           std::to_string(t.kv_groups) + ")";
  if (t.vocab_size != s.vocab_size) return "vocab_size must match between source and target";
  if (t.qkv_bias != s.qkv_bias) return "qkv_bias must match between source and target";
  return std::nullopt;
}

namespace detail {

template <class T>
Model<T> width_expand(const Model<T>& m, const ModelConfig& target, GrowthMethod method) {
  validate_model(m);
  if (m.moe) fail("growth operators work on dense checkpoints only");
  if (target.n_layers != m.config.n_layers) fail("width expansion keeps n_layers; use grow_depth for depth");
  if (auto e = validate_plan(GrowthPlan{method, DepthMode::stack, m.config, target})) fail(*e);
  const auto& src = m.config;
  const WidthMap hidden = build_width_map(static_cast<std::size_t>(src.hidden_dim),
                                          static_cast<std::size_t>(target.hidden_dim));
  const WidthMap inter = build_width_map(static_cast<std::size_t>(src.intermediate_dim),
                                         static_cast<std::size_t>(target.intermediate_dim));
  Model<T> out{target, std::nullopt, {}};
  out.tensors["embed"] = expand_out_axis(m.get("embed"), hidden);
  out.tensors["final_norm"] = expand_out_axis(m.get("final_norm"), hidden);
  out.tensors["unembed"] = expand_in_axis(m.get("unembed"), hidden);
  const auto L = static_cast<std::size_t>(src.n_layers);
  std::vector<Block<T>> blocks;
  for (std::size_t l = 0; l < L; ++l) blocks.push_back(extract_block(m, l));
  for (std::size_t l = 0; l < L; ++l) {
    // AKI draws replica slots from the layer above; the top layer has none and
    // falls back to self-donation (plain FPI).
    const Block<T>* donor = (method == GrowthMethod::aki && l + 1 < L) ? &blocks[l + 1] : nullptr;
    insert_block(out, l, expand_block(blocks[l], src, target, hidden, inter, donor));
  }
  validate_model(out);
  return out;
}

}  // namespace detail

template <class T>
Model<T> fpi_expand(const Model<T>& m, const ModelConfig& target) {
  return detail::width_expand(m, target, GrowthMethod::fpi);
}

template <class T>
Model<T> aki_expand(const Model<T>& m, const ModelConfig& target) {
  return detail::width_expand(m, target, GrowthMethod::aki);
}

// Source layer for each target layer.
//   stack:       l mod L1
//   interpolate: floor(l * L1 / L2), each source layer repeated consecutively
inline std::vector<std::size_t> depth_sources(std::size_t source_layers, std::size_t target_layers, DepthMode mode) {
  if (source_layers < 1) fail("source model has no layers");
  if (target_layers < source_layers) fail("target_layers is smaller than source layers");
  std::vector<std::size_t> src(target_layers);
  for (std::size_t l = 0; l < target_layers; ++l)
    src[l] = mode == DepthMode::stack ? l % source_layers : l * source_layers / target_layers;
  return src;
}

template <class T>
Model<T> grow_depth(const Model<T>& m, std::size_t target_layers, DepthMode mode) {
  const auto sources = depth_sources(static_cast<std::size_t>(m.config.n_layers), target_layers, mode);
  Model<T> out{m.config, m.moe, {}};
  out.config.n_layers = static_cast<std::int64_t>(target_layers);
  for (const auto& [name, t] : m.tensors)
    if (!name.starts_with("layers.")) out.tensors.emplace(name, t);
  for (std::size_t l = 0; l < target_layers; ++l) {
    const auto from = layer_prefix(sources[l]);
    const auto to = layer_prefix(l);
    for (auto it = m.tensors.lower_bound(from); it != m.tensors.end() && it->first.starts_with(from); ++it)
      out.tensors.emplace(to + it->first.substr(from.size()), it->second);
  }
  validate_model(out);
  return out;
}

// Width first, then depth.
template <class T>
Model<T> scale_up(const Model<T>& m, const GrowthPlan& plan) {
  if (auto e = validate_plan(plan)) fail("invalid growth plan: " + *e);
  if (!(m.config == plan.source_config)) fail("checkpoint config does not match the plan's source_config");
  ModelConfig width_target = plan.target_config;
  width_target.n_layers = m.config.n_layers;
  Model<T> wide = detail::width_expand(m, width_target, plan.method);
  Model<T> out = grow_depth(wide, static_cast<std::size_t>(plan.target_config.n_layers), plan.depth_mode);
  out.config = plan.target_config;
  validate_model(out);
  return out;
}

struct PreservationReport {
  double max_abs_logit_diff = 0.0;
  double loss_diff = 0.0;  // |mean probe loss of dst - mean probe loss of src|
  bool pass = false;
  std::size_t n_probes = 0;
  std::size_t probe_len = 0;
};

inline void to_json(nlohmann::json& j, const PreservationReport& r) {
  j = nlohmann::json{{"max_abs_logit_diff", r.max_abs_logit_diff},
                     {"loss_diff", r.loss_diff},
                     {"pass", r.pass},
                     {"n_probes", r.n_probes},
                     {"probe_len", r.probe_len}};
}

// Runs both models on the same random probe sequences and compares logits.
// probe_len 0 picks min(16, shorter context length).
template <class T>
PreservationReport verify_preservation(const Model<T>& src, const Model<T>& dst, std::size_t n_probes,
                                       std::uint64_t seed, double tol, std::size_t probe_len = 0) {
  if (src.config.vocab_size != dst.config.vocab_size) fail("vocab_size differs between source and destination");
  if (n_probes < 1) fail("n_probes must be >= 1");
  const auto ctx = static_cast<std::size_t>(std::min(src.config.context_length, dst.config.context_length));
  if (probe_len == 0) probe_len = std::min<std::size_t>(16, ctx);
  if (probe_len > ctx) fail("probe length exceeds context_length");
  PreservationReport rep;
  rep.n_probes = n_probes;
  rep.probe_len = probe_len;
  Rng rng(seed);
  const auto V = static_cast<std::size_t>(src.config.vocab_size);
  double src_loss = 0.0, dst_loss = 0.0;
  std::size_t count = 0;
  std::vector<TokenId> tokens(probe_len);
  for (std::size_t p = 0; p < n_probes; ++p) {
    for (auto& t : tokens) t = static_cast<TokenId>(rng.below(V));
    const auto a = forward<T>(src, tokens);
    const auto b = forward<T>(dst, tokens);
    for (std::size_t i = 0; i < a.logits.size(); ++i)
      rep.max_abs_logit_diff =
          std::max(rep.max_abs_logit_diff, std::abs(static_cast<double>(a.logits.data[i] - b.logits.data[i])));
    for (std::size_t i = 0; i < a.loss.size(); ++i) {
      src_loss += static_cast<double>(a.loss[i]);
      dst_loss += static_cast<double>(b.loss[i]);
    }
    count += a.loss.size();
  }
  if (count > 0) rep.loss_diff = std::abs(dst_loss - src_loss) / static_cast<double>(count);
  rep.pass = rep.max_abs_logit_diff <= tol;
  return rep;
}

struct SymmetryEntry {
  std::string tensor;
  std::size_t columns = 0;
  std::size_t duplicate_pairs = 0;
};

// For each weight matrix, the number of unordered pairs of output-axis columns
// that are bitwise identical.
template <class T>
std::vector<SymmetryEntry> symmetry_report(const Model<T>& m) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<SymmetryEntry> out;
  for (const auto& [name, t] : m.tensors) {
    if (t.rank() != 2) continue;
    const std::size_t R = t.rows(), C = t.cols();
    std::vector<std::vector<Bits>> cols(C, std::vector<Bits>(R));
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) cols[c][r] = std::bit_cast<Bits>(t.at(r, c));
    std::sort(cols.begin(), cols.end());
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < C;) {
      std::size_t j = i + 1;
      while (j < C && cols[j] == cols[i]) ++j;
      const std::size_t run = j - i;
      pairs += run * (run - 1) / 2;
      i = j;
    }
    out.push_back({name, C, pairs});
  }
  return out;
}

}  // namespace effscale
