// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "effscale/effscale.hpp"

using namespace effscale;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Toy growth protocol shared by criteria 5 and 6. Fixed up front; seeds 1..3.
constexpr std::size_t kVocab = 16;
constexpr std::size_t kCorpusOrder = 2;
constexpr double kCorpusSharpness = 5.0;
constexpr std::size_t kTrainTokens = 70000, kEvalTokens = 10000;
constexpr std::size_t kEvalSeq = 32, kEvalWindows = 64;
constexpr double kThreshold = 1.5;  // nats, criterion 6

ModelConfig toy(std::int64_t layers, std::int64_t hidden) {
  return ModelConfig{layers, hidden, hidden / 4, 4, 2, 2 * hidden, static_cast<std::int64_t>(kVocab), true, 64};
}

TrainConfig source_training(std::uint64_t seed) {
  TrainConfig c;
  c.lr = 1e-2;
  c.total_steps = 1500;
  c.warmup_steps = 150;
  c.batch_tokens = 256;
  c.seq_len = 32;
  c.seed = seed;
  c.eval_every = 1500;
  c.eval_windows = kEvalWindows;
  return c;
}

TrainConfig continued_training(std::uint64_t seed) {
  TrainConfig c = source_training(seed);
  c.total_steps = 600;
  c.warmup_steps = 60;
  c.eval_every = 10;
  return c;
}

struct ToyRun {
  std::vector<TokenId> corpus;
  Checkpoint source;
  std::span<const TokenId> train() const { return {corpus.data(), kTrainTokens}; }
  std::span<const TokenId> eval() const { return {corpus.data() + kTrainTokens, kEvalTokens}; }
  double loss(const Checkpoint& m) const { return eval_loss<float>(m, eval(), kEvalSeq, kEvalWindows); }
};

const ToyRun& toy_run(std::uint64_t seed) {
  static std::map<std::uint64_t, ToyRun> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  ToyRun r;
  r.corpus = make_synthetic_corpus(seed, kVocab, kTrainTokens + kEvalTokens, kCorpusOrder, kCorpusSharpness);
  r.source = train(random_init<float>(toy(2, 8), seed), r.train(), source_training(seed), r.eval()).ckpt;
  return cache.emplace(seed, std::move(r)).first->second;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome function_preservation() {
  const std::vector<std::pair<std::int64_t, std::int64_t>> shapes{{2, 8}, {4, 8}, {2, 16}, {4, 16}, {2, 8}, {4, 16}};
  double worst = 0.0;
  std::uint64_t seed = 0;
  for (auto [L, H] : shapes) {
    ModelConfig src{L, H, H / 4, 4, 2, 2 * H, 32, true, 64};
    ModelConfig dst{L, 2 * H, H / 2, 4, 2, 4 * H, 32, true, 64};
    const auto m = random_init<float>(src, ++seed, 0.3);
    worst = std::max(worst, verify_preservation(m, fpi_expand(m, dst), 64, seed, 1e-5).max_abs_logit_diff);
  }
  return {worst <= 1e-5, std::to_string(shapes.size()) + " models, max |dlogit| " + fmt("%.3g", worst)};
}

Outcome upcycling_identity() {
  const auto dense = random_init<float>(ModelConfig{2, 8, 2, 4, 2, 16, 32, true, 64}, 5, 0.3);
  const MoEConfig moe{8, 2, 0.001, 0.01, 0.02, true};
  double worst = 0.0;
  for (std::uint64_t s : {1, 2, 3})
    worst = std::max(worst, verify_preservation(dense, upcycle(dense, moe, s), 64, s, 1e-5).max_abs_logit_diff);
  return {worst <= 1e-5, "3 router seeds, max |dlogit| " + fmt("%.3g", worst)};
}

Outcome savings_factors() {
  const auto plan = aquila_moe_plan();
  const double t = time_savings_factor(plan.phases, plan.baseline);
  const double p = power_savings_factor(plan.phases, plan.baseline);
  return {std::abs(t - 4.12) <= 0.01 && std::abs(p - 3.35) <= 0.02, "time " + fmt("%.5f", t) + ", power " + fmt("%.5f", p)};
}

Outcome gradient_correctness() {
  const ModelConfig micro{1, 4, 2, 2, 1, 6, 8, true, 16};
  const auto dense = grad_check(micro, 3, 1e-5);
  const auto moe = grad_check(ModelConfig{2, 4, 2, 2, 1, 6, 8, true, 16}, 4, 1e-5, MoEConfig{4, 2, 0.001, 0.01, 0.3, true});
  return {dense.max_rel_error < 1e-3 && moe.max_rel_error < 1e-3,
          "dense " + fmt("%.2e", dense.max_rel_error) + " (" + std::to_string(dense.params_checked) + " params), moe " +
              fmt("%.2e", moe.max_rel_error) + " (" + std::to_string(moe.params_checked) + " params)"};
}

Outcome initial_loss_ordering() {
  bool a_ok = true, b_ok = true;
  int interp_wins = 0;
  std::ostringstream os;
  os.precision(4);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& run = toy_run(seed);
    const double src = run.loss(run.source);
    const double width = run.loss(fpi_expand(run.source, toy(2, 16)));
    const double random = run.loss(random_init<float>(toy(4, 16), seed + 100));
    a_ok &= std::abs(width - src) <= 1e-5;
    os << "\n    seed " << seed << ": source " << src << ", fpi-width " << width << ", random " << random << ";";
    double fpi[2] = {0, 0};
    for (auto method : {GrowthMethod::fpi, GrowthMethod::aki})
      for (auto depth : {DepthMode::stack, DepthMode::interpolate}) {
        const double l = run.loss(scale_up(run.source, GrowthPlan{method, depth, toy(2, 8), toy(4, 16)}));
        b_ok &= l < 0.6 * random;
        if (method == GrowthMethod::fpi) fpi[depth == DepthMode::interpolate] = l;
        os << ' ' << (method == GrowthMethod::fpi ? "fpi" : "aki") << '-'
           << (depth == DepthMode::stack ? "stack " : "interp ") << l;
      }
    interp_wins += fpi[1] <= fpi[0];
  }
  os << "\n    (a) " << (a_ok ? "ok" : "FAIL") << "  (b) " << (b_ok ? "ok" : "FAIL") << "  (c) interp<=stack on "
     << interp_wins << "/3 seeds";
  return {a_ok && b_ok && interp_wins >= 2, os.str()};
}

Outcome convergence_speed() {
  int wins = 0;
  std::ostringstream os;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& run = toy_run(seed);
    const auto grown = scale_up(run.source, GrowthPlan{GrowthMethod::fpi, DepthMode::interpolate, toy(2, 8), toy(4, 16)});
    const auto scratch = random_init<float>(toy(4, 16), seed + 100);
    const auto cfg = continued_training(seed);
    const auto g = steps_to_threshold(train(grown, run.train(), cfg, run.eval()).log, kThreshold);
    const auto r = steps_to_threshold(train(scratch, run.train(), cfg, run.eval()).log, kThreshold);
    const auto show = [](const std::optional<std::int64_t>& s) { return s ? std::to_string(*s) : std::string("never"); };
    wins += g && (!r || *g < *r);
    os << " seed " << seed << ": grown " << show(g) << " vs random " << show(r) << ";";
  }
  return {wins == 3, "steps to eval loss " + fmt("%.2f", kThreshold) + ":" + os.str()};
}

// Independent circular maps for the AKI check (no library map builders).
std::size_t hidden_src(std::size_t i, std::size_t old) { return i % old; }
std::size_t q_lane_src(std::size_t lane, std::size_t hd, std::size_t heads_old, std::size_t heads_new, std::size_t groups) {
  const std::size_t h = lane / hd, per_old = heads_old / groups, per_new = heads_new / groups;
  return ((h / per_new) * per_old + (h % per_new) % per_old) * hd + lane % hd;
}

Outcome aki_provenance() {
  const ModelConfig src{3, 8, 2, 4, 2, 16, 32, true, 64};
  const ModelConfig dst{3, 16, 4, 4, 2, 32, 32, true, 64};
  const auto m = random_init<float>(src, 13);
  const auto aki = aki_expand(m, dst);
  const auto fpi = fpi_expand(m, dst);
  const auto qsrc = [](std::size_t i) { return q_lane_src(i, 4, 2, 4, 2); };
  const auto hsrc = [](std::size_t i) { return hidden_src(i, 8); };
  const auto isrc = [](std::size_t i) { return hidden_src(i, 16); };
  const auto ident = [](std::size_t i) { return i; };
  struct Spec {
    const char* name;
    std::function<std::size_t(std::size_t)> in, out;
    std::size_t in_old, in_new, out_new;
  };
  const std::vector<Spec> specs{{"attn.wq", hsrc, qsrc, 8, 16, 16},   {"attn.wk", hsrc, ident, 8, 16, 8},
                                {"attn.wv", hsrc, ident, 8, 16, 8},   {"attn.wo", qsrc, hsrc, 8, 16, 16},
                                {"mlp.w_gate", hsrc, isrc, 8, 16, 32}, {"mlp.w_up", hsrc, isrc, 8, 16, 32},
                                {"mlp.w_down", isrc, hsrc, 16, 32, 16}};
  std::size_t checked = 0, mismatched = 0;
  for (std::size_t l = 0; l + 1 < 3; ++l)
    for (const auto& s : specs) {
      const auto& got = aki.get(layer_prefix(l) + s.name);
      const auto& own = m.get(layer_prefix(l) + s.name);
      const auto& donor = m.get(layer_prefix(l + 1) + s.name);
      std::vector<std::size_t> mult(s.in_old, 0);
      for (std::size_t i = 0; i < s.in_new; ++i) ++mult[s.in(i)];
      std::vector<bool> seen(own.cols(), false);
      for (std::size_t c = 0; c < s.out_new; ++c) {
        const std::size_t sc = s.out(c);
        const bool replica = seen[sc];
        seen[sc] = true;
        const auto& from = replica ? donor : own;
        for (std::size_t r = 0; r < s.in_new; ++r) {
          const float want = from.at(s.in(r), sc) / static_cast<float>(mult[s.in(r)]);
          ++checked;
          mismatched += std::bit_cast<std::uint32_t>(want) != std::bit_cast<std::uint32_t>(got.at(r, c));
        }
      }
    }
  std::size_t fpi_short = 0, aki_dups = 0;
  for (const auto& e : symmetry_report(fpi)) {
    const std::size_t old_cols = m.get(e.tensor).cols();
    if (e.columns > old_cols && e.duplicate_pairs < old_cols) ++fpi_short;
  }
  for (const auto& e : symmetry_report(aki))
    if (!e.tensor.starts_with("layers.2.") && e.tensor.starts_with("layers.")) aki_dups += e.duplicate_pairs;
  std::ostringstream os;
  os << checked << " entries checked, " << mismatched << " mismatched; FPI tensors short of old_dim pairs " << fpi_short
     << "; duplicate pairs in AKI regions " << aki_dups;
  return {mismatched == 0 && fpi_short == 0 && aki_dups == 0, os.str()};
}

Outcome auxiliary_losses() {
  const MoEConfig cfg;
  RoutingStats uniform(8);
  const std::vector<double> zeros(8, 0.0);
  for (int t = 0; t < 16; ++t) uniform.add(route_logits<double>(zeros, cfg));
  uniform.finalize(2);
  const double lb = load_balance_loss(uniform, 8);
  const double z = max_z_loss(uniform.z);
  const double want_z = std::log(8.0) * std::log(8.0);
  const double ce = 2.75, aux = 1.3, zz = 4.5;
  const bool coeffs = cfg.aux_coeff == 0.001 && cfg.z_coeff == 0.01 &&
                      moe_total_loss(ce, aux, zz, cfg) == ce + 0.001 * aux + 0.01 * zz;
  return {lb == 1.0 && std::abs(z - want_z) <= 1e-9 && coeffs,
          "load balance " + fmt("%.17g", lb) + ", z-loss " + fmt("%.15f", z) + ", coefficients " + (coeffs ? "ok" : "wrong")};
}

Outcome parameter_accounting() {
  const ModelConfig m16b{40, 5120, 40, 128, 8, 20480, 100000, true, 4096};
  const auto pc = count_params(m16b, MoEConfig{8, 2, 0.001, 0.01, 0.02, true});
  return {pc.activated >= 27'000'000'000ull && pc.activated <= 31'000'000'000ull,
          "8x16B activated " + std::to_string(pc.activated) + ", total " + std::to_string(pc.total)};
}

Outcome depth_goldens() {
  const auto in = depth_sources(3, 6, DepthMode::interpolate);
  const auto st = depth_sources(3, 6, DepthMode::stack);
  const auto show = [](const std::vector<std::size_t>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s + "]";
  };
  return {in == std::vector<std::size_t>{0, 0, 1, 1, 2, 2} && st == std::vector<std::size_t>{0, 1, 2, 0, 1, 2},
          "interpolate " + show(in) + ", stack " + show(st)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {1, "function preservation", 10, function_preservation},
      {2, "upcycling identity", 10, upcycling_identity},
      {3, "savings factors", 1, savings_factors},
      {4, "gradient correctness", 60, gradient_correctness},
      {5, "initial-loss ordering", 600, initial_loss_ordering},
      {6, "convergence speed", 600, convergence_speed},
      {7, "AKI provenance and symmetry", 5, aki_provenance},
      {8, "auxiliary-loss values", 1, auxiliary_losses},
      {9, "parameter accounting", 1, parameter_accounting},
      {10, "depth-map goldens", 1, depth_goldens},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s %2d %s (%.2fs / %.0fs%s): %s\n", pass ? "PASS" : "FAIL", c.id, c.name, secs, c.budget_s,
                in_time ? "" : " over budget", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
