#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "effscale/checkpoint.hpp"
#include "effscale/tensor.hpp"
#include "effscale/transformer.hpp"

namespace effscale {

struct TrainConfig {
  double lr = 3e-4;
  std::int64_t warmup_steps = 10;
  std::int64_t total_steps = 100;
  std::int64_t batch_tokens = 256;
  std::int64_t seq_len = 32;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of lr
  double grad_clip = 1.0;     // global L2 norm; 0 disables
  std::int64_t eval_every = 10;
  std::int64_t eval_windows = 16;
};

inline std::optional<std::string> validate_train_config(const TrainConfig& c) {
  if (!(c.lr >= 0.0)) return "lr must be >= 0";
  if (c.total_steps < 0) return "total_steps must be >= 0";
  if (c.warmup_steps < 0 || c.warmup_steps > c.total_steps) return "warmup_steps must lie in [0, total_steps]";
  if (c.seq_len < 1) return "seq_len must be >= 1";
  if (c.batch_tokens < c.seq_len) return "batch_tokens must be >= seq_len";
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) return "adam betas must lie in [0, 1)";
  if (!(c.adam_eps > 0.0)) return "adam_eps must be > 0";
  if (!(c.weight_decay >= 0.0)) return "weight_decay must be >= 0";
  if (!(c.min_lr_ratio >= 0.0 && c.min_lr_ratio <= 1.0)) return "min_lr_ratio must lie in [0, 1]";
  if (c.eval_every < 1) return "eval_every must be >= 1";
  return std::nullopt;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"warmup_steps", c.warmup_steps},
                     {"total_steps", c.total_steps},
                     {"batch_tokens", c.batch_tokens},
                     {"seq_len", c.seq_len},
                     {"seed", c.seed},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"min_lr_ratio", c.min_lr_ratio},
                     {"grad_clip", c.grad_clip},
                     {"eval_every", c.eval_every},
                     {"eval_windows", c.eval_windows}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.seed = j.value("seed", d.seed);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_windows = j.value("eval_windows", d.eval_windows);
}

// Linear warmup to lr, then cosine decay to lr * min_lr_ratio at total_steps.
inline double learning_rate(const TrainConfig& c, std::int64_t step) {
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const double span = static_cast<double>(std::max<std::int64_t>(1, c.total_steps - c.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

struct MetricRow {
  std::int64_t step = 0;
  std::optional<double> train_loss;
  std::optional<double> lr;
  std::optional<double> eval_loss;
  std::optional<double> aux_loss;
  std::optional<double> z_loss;
};

struct MetricLog {
  std::vector<MetricRow> rows;

  std::vector<std::pair<std::int64_t, double>> eval_curve() const {
    std::vector<std::pair<std::int64_t, double>> out;
    for (const auto& r : rows)
      if (r.eval_loss) out.emplace_back(r.step, *r.eval_loss);
    return out;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "step,train_loss,lr,eval_loss,aux_loss,z_loss\n";
    const auto field = [&](const std::optional<double>& v) {
      if (v) os << *v;
    };
    for (const auto& r : rows) {
      os << r.step << ',';
      field(r.train_loss);
      os << ',';
      field(r.lr);
      os << ',';
      field(r.eval_loss);
      os << ',';
      field(r.aux_loss);
      os << ',';
      field(r.z_loss);
      os << '\n';
    }
    return os.str();
  }
};

// First logged step whose eval loss is at or below `threshold`.
inline std::optional<std::int64_t> steps_to_threshold(const MetricLog& log, double threshold) {
  for (const auto& r : log.rows)
    if (r.eval_loss && *r.eval_loss <= threshold) return r.step;
  return std::nullopt;
}

struct TrainResult {
  Checkpoint ckpt;
  MetricLog log;
  double final_eval_loss = 0.0;
};

namespace detail {

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
};

inline std::vector<std::vector<TokenId>> sample_batch(std::span<const TokenId> data, std::size_t n_seqs,
                                                      std::size_t seq_len, Rng& rng) {
  std::vector<std::vector<TokenId>> batch(n_seqs);
  const std::size_t starts = data.size() - seq_len;
  for (auto& s : batch) {
    const std::size_t at = rng.below(starts);
    s.assign(data.begin() + static_cast<std::ptrdiff_t>(at), data.begin() + static_cast<std::ptrdiff_t>(at + seq_len + 1));
  }
  return batch;
}

}  // namespace detail

// AdamW continuous pretraining. Evaluation happens before the update at every
// eval_every-th step and once more after the final step; `eval_data` defaults
// to the training stream. Weight decay applies to matrices only.
inline TrainResult train(const Checkpoint& start, std::span<const TokenId> data, const TrainConfig& cfg,
                         std::span<const TokenId> eval_data = {}) {
  validate_model(start);
  if (auto e = validate_train_config(cfg)) fail("invalid train config: " + *e);
  const auto seq_len = static_cast<std::size_t>(cfg.seq_len);
  if (seq_len > static_cast<std::size_t>(start.config.context_length)) fail("seq_len exceeds context_length");
  if (data.size() < seq_len + 1) fail("training data shorter than seq_len + 1 tokens");
  if (eval_data.empty()) eval_data = data;
  const auto n_seqs = static_cast<std::size_t>(cfg.batch_tokens / cfg.seq_len);
  const auto eval_windows = static_cast<std::size_t>(std::max<std::int64_t>(0, cfg.eval_windows));

  TrainResult res{start, {}, 0.0};
  Checkpoint& params = res.ckpt;
  detail::AdamState adam;
  for (const auto& [name, t] : params.tensors) {
    adam.m[name].assign(t.size(), 0.0);
    adam.v[name].assign(t.size(), 0.0);
  }
  Rng rng(cfg.seed);

  for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
    MetricRow row;
    row.step = step;
    if (step % cfg.eval_every == 0) row.eval_loss = eval_loss<float>(params, eval_data, seq_len, eval_windows);
    const auto batch = detail::sample_batch(data, n_seqs, seq_len, rng);
    GradResult<float> g;
    try {
      g = backward<float>(params, batch);
    } catch (const Error& e) {
      fail("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(g.loss.total)) fail("training diverged at step " + std::to_string(step));
    const double lr = learning_rate(cfg, step);
    row.train_loss = g.loss.total;
    row.lr = lr;
    if (params.moe) {
      row.aux_loss = g.loss.aux;
      row.z_loss = g.loss.z;
    }
    res.log.rows.push_back(row);

    double norm2 = 0.0;
    for (const auto& [name, t] : g.grads)
      for (float v : t.data) norm2 += static_cast<double>(v) * static_cast<double>(v);
    if (!std::isfinite(norm2)) fail("training diverged at step " + std::to_string(step) + ": non-finite gradient");
    const double norm = std::sqrt(norm2);
    const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params.tensors) {
      const auto& gd = g.grads.at(name).data;
      auto& m = adam.m[name];
      auto& v = adam.v[name];
      const double wd = p.rank() == 2 ? cfg.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(gd[i]) * clip;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps) + wd * p.data[i];
        p.data[i] = static_cast<float>(static_cast<double>(p.data[i]) - lr * update);
      }
    }
  }
  res.final_eval_loss = eval_loss<float>(params, eval_data, seq_len, eval_windows);
  MetricRow last;
  last.step = cfg.total_steps;
  last.eval_loss = res.final_eval_loss;
  res.log.rows.push_back(last);
  return res;
}

// Synthetic token stream from a seeded order-k Markov chain. Each context's
// next-token distribution is softmax(s * N(0,1) - (1 + s) ln(j + 1)), s = sharpness:
// rows are skewed, and the rank term (scaled with the noise) keeps the unigram
// distribution Zipf-like after averaging over many rows.
inline std::vector<TokenId> make_synthetic_corpus(std::uint64_t seed, std::size_t vocab, std::size_t n_tokens,
                                                  std::size_t order, double sharpness = 3.0) {
  if (vocab < 2) fail("synthetic corpus needs vocab >= 2");
  if (order < 1) fail("synthetic corpus needs order >= 1");
  Rng rng(seed);
  std::unordered_map<std::uint64_t, std::vector<double>> rows;
  const auto row_for = [&](std::uint64_t key) -> const std::vector<double>& {
    auto it = rows.find(key);
    if (it != rows.end()) return it->second;
    Rng row_rng(mix64(seed ^ mix64(key)));
    std::vector<double> w(vocab);
    double mx = -1e300;
    for (std::size_t j = 0; j < vocab; ++j) {
      w[j] = sharpness * row_rng.normal() - (1.0 + sharpness) * std::log(static_cast<double>(j + 1));
      mx = std::max(mx, w[j]);
    }
    double sum = 0.0;
    for (auto& x : w) sum += (x = std::exp(x - mx));
    double acc = 0.0;
    for (auto& x : w) x = (acc += x / sum);
    w.back() = 1.0;
    return rows.emplace(key, std::move(w)).first->second;
  };

  std::vector<TokenId> out;
  out.reserve(n_tokens);
  for (std::size_t i = 0; i < std::min(order, n_tokens); ++i) out.push_back(static_cast<TokenId>(rng.below(vocab)));
  while (out.size() < n_tokens) {
    std::uint64_t key = order;
    for (std::size_t i = out.size() - order; i < out.size(); ++i) key = mix64(key ^ out[i]);
    const auto& cdf = row_for(key);
    const double u = rng.uniform();
    const auto pos = std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
    out.push_back(static_cast<TokenId>(std::min<std::ptrdiff_t>(pos, static_cast<std::ptrdiff_t>(vocab) - 1)));
  }
  return out;
}

// Empirical unigram entropy in nats.
inline double unigram_entropy(std::span<const TokenId> tokens, std::size_t vocab) {
  std::vector<double> counts(vocab, 0.0);
  for (TokenId t : tokens) counts.at(t) += 1.0;
  double h = 0.0;
  const double n = static_cast<double>(tokens.size());
  for (double c : counts)
    if (c > 0) h -= (c / n) * std::log(c / n);
  return h;
}

// Raw little-endian uint32 token ids, no header.
inline void save_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens) {
  std::string bytes;
  bytes.reserve(tokens.size() * 4);
  for (TokenId t : tokens)
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((t >> (8 * i)) & 0xff));
  detail::write_file(path, bytes);
}

inline std::vector<TokenId> load_tokens(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() % 4 != 0) fail("token file size is not a multiple of 4 bytes: " + path.string());
  std::vector<TokenId> out(bytes.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<TokenId>(p[4 * i]) | (static_cast<TokenId>(p[4 * i + 1]) << 8) |
             (static_cast<TokenId>(p[4 * i + 2]) << 16) | (static_cast<TokenId>(p[4 * i + 3]) << 24);
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t params_checked = 0;
};

// Central finite differences in binary64 against backward(), over every
// parameter of a randomly initialized micro model. MoE routing is frozen at the
// unperturbed selection so the objective is smooth in every coordinate.
inline GradCheckResult grad_check(const ModelConfig& config, std::uint64_t seed, double eps,
                                  const std::optional<MoEConfig>& moe = std::nullopt, double init_std = 0.3) {
  Model<double> model = random_init<double>(config, seed, init_std, moe);
  Rng rng(mix64(seed + 1));
  for (auto& [name, t] : model.tensors)
    if (name.ends_with("_norm"))
      for (auto& v : t.data) v = 1.0 + 0.2 * rng.normal();
  if (count_params(model).total > 10000) fail("grad_check needs a micro model (< 10k parameters)");
  const std::size_t len = std::min<std::size_t>(6, static_cast<std::size_t>(config.context_length));
  if (len < 2) fail("grad_check needs context_length >= 2");
  std::vector<std::vector<TokenId>> batch(2, std::vector<TokenId>(len));
  for (auto& s : batch)
    for (auto& t : s) t = static_cast<TokenId>(rng.below(static_cast<std::size_t>(config.vocab_size)));

  const auto analytic = backward<double>(model, batch);
  const RoutingRecord* fixed = model.moe ? &analytic.routing : nullptr;
  GradCheckResult res;
  for (auto& [name, t] : model.tensors) {
    const auto& g = analytic.grads.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + eps;
      const double lp = batch_loss<double>(model, batch, fixed).total;
      t.data[i] = orig - eps;
      const double lm = batch_loss<double>(model, batch, fixed).total;
      t.data[i] = orig;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double a = g.data[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      ++res.params_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_tensor = name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace effscale
