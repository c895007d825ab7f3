#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "effscale/effscale.hpp"

namespace effscale::cli {

// 0 success, 1 validation failure (bad input or failed verification), 2 I/O.
enum ExitCode : int { kOk = 0, kInvalid = 1, kIo = 2 };

struct CommandResult {
  int exit_code = kOk;
  std::string out;  // human-readable summary
  std::string err;
};

namespace detail {

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline nlohmann::json read_json_file(const std::string& path, const std::string& what) {
  const auto text = effscale::detail::read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail("malformed " + what + " " + path + ": " + e.what());
  }
}

template <class T>
T read_json_as(const std::string& path, const std::string& what) {
  const auto j = read_json_file(path, what);
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail("malformed " + what + " " + path + ": " + e.what());
  }
}

inline void write_report(const std::string& path, const nlohmann::json& report) {
  if (path.empty()) return;
  effscale::detail::write_file(path, report.dump(2) + "\n");
}

inline std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << "layers " << c.n_layers << ", hidden " << c.hidden_dim << ", heads " << c.n_heads << " x " << c.head_dim
     << ", kv_groups " << c.kv_groups << ", intermediate " << c.intermediate_dim << ", vocab " << c.vocab_size
     << ", qkv_bias " << (c.qkv_bias ? "yes" : "no") << ", context " << c.context_length;
  return os.str();
}

}  // namespace detail

// Parses and executes one command line (argv[0] is the program name).
inline CommandResult run(const std::vector<std::string>& argv) {
  CommandResult result;
  std::ostringstream out;

  CLI::App app{"Grow dense transformers, upcycle them into MoE models, and check the results"};
  app.require_subcommand(1);
  std::string report_path;
  app.add_option("--report", report_path, "Write a JSON report to this file");

  // init
  std::string init_config, init_out;
  std::uint64_t init_seed = 0;
  double init_std = 0.02;
  auto* init = app.add_subcommand("init", "Randomly initialize a checkpoint");
  init->add_option("--config", init_config, "ModelConfig JSON file")->required();
  init->add_option("--seed", init_seed, "Random seed")->required();
  init->add_option("--out", init_out, "Output checkpoint directory")->required();
  init->add_option("--std", init_std, "Weight standard deviation");

  // grow
  std::string grow_in, grow_plan, grow_out;
  auto* grow = app.add_subcommand("grow", "Scale a dense checkpoint up according to a growth plan");
  grow->add_option("--in", grow_in)->required();
  grow->add_option("--plan", grow_plan, "GrowthPlan JSON file")->required();
  grow->add_option("--out", grow_out)->required();

  // upcycle
  std::string up_in, up_out;
  MoEConfig up_cfg;
  std::uint64_t up_seed = 0;
  bool up_no_renorm = false;
  auto* up = app.add_subcommand("upcycle", "Convert a dense checkpoint into a mixture-of-experts checkpoint");
  up->add_option("--in", up_in)->required();
  up->add_option("--out", up_out)->required();
  up->add_option("--experts", up_cfg.n_experts)->required();
  up->add_option("--top-k", up_cfg.top_k)->required();
  up->add_option("--seed", up_seed)->required();
  up->add_option("--router-std", up_cfg.router_init_std);
  up->add_option("--aux-coeff", up_cfg.aux_coeff);
  up->add_option("--z-coeff", up_cfg.z_coeff);
  up->add_flag("--no-renormalize", up_no_renorm, "Use raw top-k probabilities as gates");

  // verify
  std::string ver_src, ver_dst;
  std::size_t ver_probes = 64, ver_len = 0;
  double ver_tol = 1e-5;
  std::uint64_t ver_seed = 0;
  auto* ver = app.add_subcommand("verify", "Compare the logits of two checkpoints on random probes");
  ver->add_option("--src", ver_src)->required();
  ver->add_option("--dst", ver_dst)->required();
  ver->add_option("--probes", ver_probes)->required();
  ver->add_option("--tol", ver_tol)->required();
  ver->add_option("--seed", ver_seed);
  ver->add_option("--probe-len", ver_len);

  // train
  std::string tr_in, tr_data, tr_config, tr_out, tr_log, tr_eval;
  auto* trn = app.add_subcommand("train", "Continue pretraining a checkpoint");
  trn->add_option("--in", tr_in)->required();
  trn->add_option("--data", tr_data, "Token file (little-endian uint32)")->required();
  trn->add_option("--config", tr_config, "TrainConfig JSON file")->required();
  trn->add_option("--out", tr_out)->required();
  trn->add_option("--log", tr_log, "Metric log CSV")->required();
  trn->add_option("--eval-data", tr_eval, "Held-out token file (defaults to --data)");

  // eval
  std::string ev_in, ev_data;
  std::size_t ev_seq = 32, ev_windows = 0;
  auto* ev = app.add_subcommand("eval", "Mean next-token loss of a checkpoint on a token file");
  ev->add_option("--in", ev_in)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--seq-len", ev_seq);
  ev->add_option("--max-windows", ev_windows);

  // savings
  std::string sv_plan;
  auto* sv = app.add_subcommand("savings", "Time and compute savings of a phased training plan");
  sv->add_option("--plan", sv_plan, "Plan JSON file")->required();

  // inspect
  std::string in_path;
  auto* insp = app.add_subcommand("inspect", "Print a checkpoint's configuration and parameter counts");
  insp->add_option("--in", in_path)->required();

  // synth
  std::string sy_out;
  std::uint64_t sy_seed = 0;
  std::size_t sy_vocab = 0, sy_tokens = 0, sy_order = 1;
  double sy_sharp = 3.0;
  auto* sy = app.add_subcommand("synth", "Generate a synthetic Markov-chain token file");
  sy->add_option("--seed", sy_seed)->required();
  sy->add_option("--vocab", sy_vocab)->required();
  sy->add_option("--tokens", sy_tokens)->required();
  sy->add_option("--out", sy_out)->required();
  sy->add_option("--order", sy_order);
  sy->add_option("--sharpness", sy_sharp);

  try {
    std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    result.out = app.help();
    return result;
  } catch (const CLI::ParseError& e) {
    result.exit_code = kInvalid;
    result.err = std::string(e.what()) + "\n";
    return result;
  }

  try {
    nlohmann::json report;
    if (*init) {
      const auto cfg = detail::read_json_as<ModelConfig>(init_config, "model config");
      const auto ckpt = random_init<float>(cfg, init_seed, init_std);
      save_checkpoint(ckpt, init_out);
      const auto pc = count_params(ckpt);
      out << "initialized " << init_out << " (" << pc.total << " parameters)\n";
      report = {{"params_total", pc.total}};
    } else if (*grow) {
      const auto plan = detail::read_json_as<GrowthPlan>(grow_plan, "growth plan");
      if (auto e = validate_plan(plan)) fail("invalid growth plan: " + *e);
      const auto src = load_checkpoint(grow_in);
      const auto dst = scale_up(src, plan);
      save_checkpoint(dst, grow_out);
      out << "grew " << grow_in << " -> " << grow_out << ": " << detail::describe(dst.config) << "\n";
      report = {{"target_config", dst.config}, {"params_total", count_params(dst).total}};
    } else if (*up) {
      up_cfg.renormalize_gates = !up_no_renorm;
      const auto dense = load_checkpoint(up_in);
      const auto moe = upcycle(dense, up_cfg, up_seed);
      save_checkpoint(moe, up_out);
      const auto pc = count_params(moe);
      out << "upcycled " << up_in << " -> " << up_out << ": " << up_cfg.n_experts << " experts, top-" << up_cfg.top_k
          << ", " << pc.total << " total / " << pc.activated << " activated parameters\n";
      report = {{"params_total", pc.total}, {"params_activated", pc.activated}, {"moe", up_cfg}};
    } else if (*ver) {
      const auto a = load_checkpoint(ver_src);
      const auto b = load_checkpoint(ver_dst);
      const auto rep = verify_preservation(a, b, ver_probes, ver_seed, ver_tol, ver_len);
      out << "max_abs_logit_diff " << rep.max_abs_logit_diff << ", loss_diff " << rep.loss_diff << ", "
          << (rep.pass ? "PASS" : "FAIL") << " (tol " << ver_tol << ")\n";
      report = rep;
      if (!rep.pass) result.exit_code = kInvalid;
    } else if (*trn) {
      const auto cfg = detail::read_json_as<TrainConfig>(tr_config, "train config");
      const auto ckpt = load_checkpoint(tr_in);
      const auto data = load_tokens(tr_data);
      const auto eval_data = tr_eval.empty() ? data : load_tokens(tr_eval);
      const auto res = train(ckpt, data, cfg, eval_data);
      save_checkpoint(res.ckpt, tr_out);
      effscale::detail::write_file(tr_log, res.log.to_csv());
      out << "trained " << cfg.total_steps << " steps, final eval loss " << res.final_eval_loss << "\n";
      report = {{"final_eval_loss", res.final_eval_loss}, {"steps", cfg.total_steps}};
    } else if (*ev) {
      const auto ckpt = load_checkpoint(ev_in);
      const auto data = load_tokens(ev_data);
      const double loss = eval_loss<float>(ckpt, data, ev_seq, ev_windows);
      out << "eval_loss " << loss << "\n";
      report = {{"eval_loss", loss}};
    } else if (*sv) {
      const auto plan = detail::read_json_as<TrainingPlan>(sv_plan, "training plan");
      const auto rep = savings_report(plan);
      out << "time_factor " << detail::fixed2(rep.time_factor) << ", power_factor " << detail::fixed2(rep.power_factor)
          << "\n";
      report = rep;
    } else if (*insp) {
      const auto ckpt = load_checkpoint(in_path);
      const auto pc = count_params(ckpt);
      out << detail::describe(ckpt.config) << "\n";
      if (ckpt.moe)
        out << "moe: " << ckpt.moe->n_experts << " experts, top-" << ckpt.moe->top_k << ", aux " << ckpt.moe->aux_coeff
            << ", z " << ckpt.moe->z_coeff << "\n";
      out << "params total " << pc.total << ", activated " << pc.activated << "\n";
      report = {{"config", ckpt.config}, {"params_total", pc.total}, {"params_activated", pc.activated}};
    } else if (*sy) {
      const auto tokens = make_synthetic_corpus(sy_seed, sy_vocab, sy_tokens, sy_order, sy_sharp);
      save_tokens(sy_out, tokens);
      const double h = unigram_entropy(tokens, sy_vocab);
      out << "wrote " << tokens.size() << " tokens to " << sy_out << " (unigram entropy " << h << " nats)\n";
      report = {{"tokens", tokens.size()}, {"unigram_entropy", h}};
    }
    detail::write_report(report_path, report);
  } catch (const Error& e) {
    result.exit_code = e.kind() == ErrorKind::io ? kIo : kInvalid;
    result.err = std::string("error: ") + e.what() + "\n";
  }
  result.out = out.str();
  return result;
}

}  // namespace effscale::cli
