#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "effscale/config.hpp"
#include "effscale/tensor.hpp"

namespace effscale {

// A configuration plus its named weights. Checkpoint (binary32) is what gets
// stored and transformed; Model<double> exists for gradient checking.
template <class T>
struct Model {
  ModelConfig config;
  std::optional<MoEConfig> moe;
  TensorMap<T> tensors;

  const Tensor<T>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("missing tensor " + name);
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("missing tensor " + name);
    return it->second;
  }

  bool operator==(const Model&) const = default;
};

using Checkpoint = Model<float>;

inline std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }
inline std::string expert_prefix(std::size_t l, std::size_t e) {
  return layer_prefix(l) + "moe.expert." + std::to_string(e) + ".";
}

// Every tensor the configuration requires, with its exact shape.
inline std::map<std::string, Shape> expected_shapes(const ModelConfig& c, const std::optional<MoEConfig>& moe) {
  const auto H = static_cast<std::size_t>(c.hidden_dim);
  const auto I = static_cast<std::size_t>(c.intermediate_dim);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  std::map<std::string, Shape> out;
  out["embed"] = {V, H};
  out["final_norm"] = {H};
  out["unembed"] = {H, V};
  for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
    const auto p = layer_prefix(l);
    out[p + "attn_norm"] = {H};
    out[p + "attn.wq"] = {H, c.q_dim()};
    out[p + "attn.wk"] = {H, c.kv_dim()};
    out[p + "attn.wv"] = {H, c.kv_dim()};
    out[p + "attn.wo"] = {c.q_dim(), H};
    if (c.qkv_bias) {
      out[p + "attn.q_bias"] = {c.q_dim()};
      out[p + "attn.k_bias"] = {c.kv_dim()};
      out[p + "attn.v_bias"] = {c.kv_dim()};
    }
    out[p + "mlp_norm"] = {H};
    if (moe) {
      out[p + "moe.router"] = {H, static_cast<std::size_t>(moe->n_experts)};
      for (std::size_t e = 0; e < static_cast<std::size_t>(moe->n_experts); ++e) {
        const auto ep = expert_prefix(l, e);
        out[ep + "w_gate"] = {H, I};
        out[ep + "w_up"] = {H, I};
        out[ep + "w_down"] = {I, H};
      }
    } else {
      out[p + "mlp.w_gate"] = {H, I};
      out[p + "mlp.w_up"] = {H, I};
      out[p + "mlp.w_down"] = {I, H};
    }
  }
  return out;
}

template <class T>
void validate_model(const Model<T>& m) {
  require_valid(m.config);
  if (m.moe) require_valid(*m.moe);
  const auto shapes = expected_shapes(m.config, m.moe);
  for (const auto& [name, shape] : shapes) {
    auto it = m.tensors.find(name);
    if (it == m.tensors.end()) fail("missing tensor " + name);
    if (it->second.shape != shape)
      fail("shape mismatch for " + name + ": expected " + shape_string(shape) + ", got " +
           shape_string(it->second.shape));
    if (it->second.data.size() != element_count(shape)) fail("tensor " + name + " has wrong element count");
    if (!all_finite<T>(it->second.data)) fail("non-finite value in tensor " + name);
  }
  for (const auto& [name, t] : m.tensors)
    if (!shapes.contains(name)) fail("unknown tensor " + name);
}

template <class U, class T>
Model<U> model_cast(const Model<T>& m) {
  Model<U> out{m.config, m.moe, {}};
  for (const auto& [name, t] : m.tensors) out.tensors.emplace(name, tensor_cast<U>(t));
  return out;
}

struct ParamCount {
  std::uint64_t total = 0;
  std::uint64_t activated = 0;
};

// Parameter totals. For MoE checkpoints only top_k of the n_experts expert MLPs
// count toward the activated figure.
template <class T>
ParamCount count_params(const Model<T>& m) {
  ParamCount pc;
  std::uint64_t expert_total = 0;
  for (const auto& [name, t] : m.tensors) {
    pc.total += t.size();
    if (name.find(".moe.expert.") != std::string::npos) expert_total += t.size();
  }
  pc.activated = pc.total;
  if (m.moe) {
    const auto n = static_cast<std::uint64_t>(m.moe->n_experts);
    const auto k = static_cast<std::uint64_t>(m.moe->top_k);
    pc.activated = pc.total - expert_total / n * (n - k);
  }
  return pc;
}

// Same accounting from the configuration alone, for models too large to
// materialize.
inline ParamCount count_params(const ModelConfig& c, const std::optional<MoEConfig>& moe) {
  require_valid(c);
  ParamCount pc;
  std::uint64_t expert_total = 0;
  for (const auto& [name, shape] : expected_shapes(c, moe)) {
    pc.total += element_count(shape);
    if (name.find(".moe.expert.") != std::string::npos) expert_total += element_count(shape);
  }
  pc.activated = pc.total;
  if (moe) {
    const auto n = static_cast<std::uint64_t>(moe->n_experts);
    pc.activated = pc.total - expert_total / n * (n - static_cast<std::uint64_t>(moe->top_k));
  }
  return pc;
}

// Checkpoint directory layout:
//   config.json    {"model": ModelConfig, "moe": MoEConfig | null}
//   model.tensors  u64 LE header length | JSON header | raw LE binary32 data
// The JSON header maps each tensor name to {"dtype":"f32","shape":[...],
// "data_offsets":[begin,end]} with offsets relative to the start of the data.
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kTensorFile = "model.tensors";

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_io("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail_io("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_tensors(const TensorMap<float>& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t bytes = t.size() * 4;
    header[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  const std::string header_text = header.dump();
  std::string out;
  out.reserve(8 + header_text.size() + offset);
  detail::put_u64_le(out, header_text.size());
  out += header_text;
  for (const auto& [name, t] : tensors)
    for (float v : t.data) detail::put_f32_le(out, v);
  return out;
}

inline TensorMap<float> decode_tensors(const std::string& bytes) {
  if (bytes.size() < 8) fail("truncated tensor file: missing header length");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t header_len = detail::get_u64_le(raw);
  if (header_len > bytes.size() - 8) fail("truncated tensor file: header extends past end of file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed tensor header: ") + e.what());
  }
  if (!header.is_object()) fail("malformed tensor header: expected an object");
  const std::uint64_t data_start = 8 + header_len;
  const std::uint64_t data_len = bytes.size() - data_start;
  TensorMap<float> out;
  for (const auto& [name, entry] : header.items()) {
    try {
      if (entry.at("dtype").get<std::string>() != "f32") fail("tensor " + name + " has unsupported dtype");
      Tensor<float> t;
      t.shape = entry.at("shape").get<Shape>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1]) fail("tensor " + name + " has invalid data_offsets");
      if (offsets[1] > data_len) fail("truncated tensor file: data for " + name + " extends past end of file");
      const std::uint64_t n = element_count(t.shape);
      if (offsets[1] - offsets[0] != n * 4) fail("tensor " + name + " byte range does not match its shape");
      t.data.resize(n);
      const unsigned char* p = raw + data_start + offsets[0];
      for (std::uint64_t i = 0; i < n; ++i) t.data[i] = detail::get_f32_le(p + 4 * i);
      out.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail("malformed entry for tensor " + name + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json config_document(const ModelConfig& c, const std::optional<MoEConfig>& moe) {
  nlohmann::json j;
  j["model"] = c;
  j["moe"] = moe ? nlohmann::json(*moe) : nlohmann::json(nullptr);
  return j;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  validate_model(ckpt);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail_io("cannot create directory " + dir.string() + ": " + ec.message());
  detail::write_file(dir / kConfigFile, config_document(ckpt.config, ckpt.moe).dump(2) + "\n");
  detail::write_file(dir / kTensorFile, encode_tensors(ckpt.tensors));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto config_text = detail::read_file(dir / kConfigFile);
  const auto tensor_bytes = detail::read_file(dir / kTensorFile);
  Checkpoint ckpt;
  try {
    const auto doc = nlohmann::json::parse(config_text);
    ckpt.config = doc.at("model").get<ModelConfig>();
    if (doc.contains("moe") && !doc.at("moe").is_null()) ckpt.moe = doc.at("moe").get<MoEConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed config.json: ") + e.what());
  }
  ckpt.tensors = decode_tensors(tensor_bytes);
  validate_model(ckpt);
  return ckpt;
}

}  // namespace effscale
