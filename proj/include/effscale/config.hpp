#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "effscale/tensor.hpp"

namespace effscale {

// Architecture hyperparameters of a decoder-only transformer. The field names
// double as the JSON keys of config.json.
struct ModelConfig {
  std::int64_t n_layers = 1;
  std::int64_t hidden_dim = 1;
  std::int64_t n_heads = 1;
  std::int64_t head_dim = 1;
  std::int64_t kv_groups = 1;
  std::int64_t intermediate_dim = 1;
  std::int64_t vocab_size = 2;
  bool qkv_bias = false;
  std::int64_t context_length = 1;

  std::size_t q_dim() const { return static_cast<std::size_t>(n_heads * head_dim); }
  std::size_t kv_dim() const { return static_cast<std::size_t>(kv_groups * head_dim); }
  std::size_t heads_per_group() const { return static_cast<std::size_t>(n_heads / kv_groups); }

  bool operator==(const ModelConfig&) const = default;
};

struct MoEConfig {
  std::int64_t n_experts = 8;
  std::int64_t top_k = 2;
  double aux_coeff = 0.001;
  double z_coeff = 0.01;
  double router_init_std = 0.02;
  bool renormalize_gates = true;

  bool operator==(const MoEConfig&) const = default;
};

// nullopt when every invariant holds, otherwise a message naming the first
// violated one.
inline std::optional<std::string> validate_config(const ModelConfig& c) {
  const std::pair<const char*, std::int64_t> dims[] = {
      {"n_layers", c.n_layers},   {"hidden_dim", c.hidden_dim},           {"n_heads", c.n_heads},
      {"head_dim", c.head_dim},   {"kv_groups", c.kv_groups},             {"intermediate_dim", c.intermediate_dim},
      {"vocab_size", c.vocab_size}, {"context_length", c.context_length}};
  for (const auto& [name, v] : dims)
    if (v < 1) return std::string(name) + " must be >= 1 (got " + std::to_string(v) + ")";
  if (c.hidden_dim != c.n_heads * c.head_dim)
    return "hidden_dim != n_heads * head_dim (" + std::to_string(c.hidden_dim) + " != " + std::to_string(c.n_heads) +
           " * " + std::to_string(c.head_dim) + ")";
  if (c.n_heads % c.kv_groups != 0)
    return "n_heads not divisible by kv_groups (" + std::to_string(c.n_heads) + " % " + std::to_string(c.kv_groups) +
           " != 0)";
  return std::nullopt;
}

inline void require_valid(const ModelConfig& c) {
  if (auto err = validate_config(c)) fail("invalid model config: " + *err);
}

inline std::optional<std::string> validate_moe_config(const MoEConfig& m) {
  if (m.n_experts < 1) return "n_experts must be >= 1";
  if (m.top_k < 1 || m.top_k > m.n_experts) return "top_k must lie in [1, n_experts]";
  if (!(m.aux_coeff >= 0.0) || !(m.z_coeff >= 0.0)) return "loss coefficients must be >= 0";
  if (!(m.router_init_std >= 0.0)) return "router_init_std must be >= 0";
  return std::nullopt;
}

inline void require_valid(const MoEConfig& m) {
  if (auto err = validate_moe_config(m)) fail("invalid moe config: " + *err);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"hidden_dim", c.hidden_dim},
                     {"n_heads", c.n_heads},
                     {"head_dim", c.head_dim},
                     {"kv_groups", c.kv_groups},
                     {"intermediate_dim", c.intermediate_dim},
                     {"vocab_size", c.vocab_size},
                     {"qkv_bias", c.qkv_bias},
                     {"context_length", c.context_length}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("n_heads").get_to(c.n_heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("kv_groups").get_to(c.kv_groups);
  j.at("intermediate_dim").get_to(c.intermediate_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("qkv_bias").get_to(c.qkv_bias);
  j.at("context_length").get_to(c.context_length);
}

inline void to_json(nlohmann::json& j, const MoEConfig& m) {
  j = nlohmann::json{{"n_experts", m.n_experts},         {"top_k", m.top_k},
                     {"aux_coeff", m.aux_coeff},         {"z_coeff", m.z_coeff},
                     {"router_init_std", m.router_init_std}, {"renormalize_gates", m.renormalize_gates}};
}

inline void from_json(const nlohmann::json& j, MoEConfig& m) {
  j.at("n_experts").get_to(m.n_experts);
  j.at("top_k").get_to(m.top_k);
  m.aux_coeff = j.value("aux_coeff", 0.001);
  m.z_coeff = j.value("z_coeff", 0.01);
  m.router_init_std = j.value("router_init_std", 0.02);
  m.renormalize_gates = j.value("renormalize_gates", true);
}

// Parses JSON text into T, converting parse and schema errors into Error.
template <class T>
T parse_json_as(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail("malformed " + what + ": " + e.what());
  }
}

}  // namespace effscale
