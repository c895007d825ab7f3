#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "effscale/tensor.hpp"

namespace effscale {

// One training phase. Token quantities are in billions; throughput is tokens
// per day in billions.
struct PhaseSpec {
  std::string name;
  double devices = 0.0;
  double gflops_per_device = 0.0;
  double model_size_B = 0.0;
  double trained_tokens_B = 0.0;
  double tokens_per_day_B = 0.0;

  double cluster_gflops() const { return devices * gflops_per_device; }
  double days() const { return trained_tokens_B / tokens_per_day_B; }
};

inline void to_json(nlohmann::json& j, const PhaseSpec& p) {
  j = nlohmann::json{{"name", p.name},
                     {"devices", p.devices},
                     {"gflops_per_device", p.gflops_per_device},
                     {"model_size_B", p.model_size_B},
                     {"trained_tokens_B", p.trained_tokens_B},
                     {"tokens_per_day_B", p.tokens_per_day_B}};
}

inline void from_json(const nlohmann::json& j, PhaseSpec& p) {
  p.name = j.value("name", std::string{});
  j.at("devices").get_to(p.devices);
  j.at("gflops_per_device").get_to(p.gflops_per_device);
  j.at("model_size_B").get_to(p.model_size_B);
  j.at("trained_tokens_B").get_to(p.trained_tokens_B);
  j.at("tokens_per_day_B").get_to(p.tokens_per_day_B);
}

struct TrainingPlan {
  std::vector<PhaseSpec> phases;
  PhaseSpec baseline;
};

inline void to_json(nlohmann::json& j, const TrainingPlan& p) {
  j = nlohmann::json{{"phases", p.phases}, {"baseline", p.baseline}};
}

inline void from_json(const nlohmann::json& j, TrainingPlan& p) {
  j.at("phases").get_to(p.phases);
  j.at("baseline").get_to(p.baseline);
}

namespace detail {

inline void check_phase(const PhaseSpec& p) {
  const std::string who = p.name.empty() ? std::string("phase") : "phase '" + p.name + "'";
  if (!(p.tokens_per_day_B > 0.0)) fail(who + ": tokens_per_day_B must be > 0");
  if (!(p.trained_tokens_B > 0.0)) fail(who + ": trained_tokens_B must be > 0");
  if (!(p.devices > 0.0) || !(p.gflops_per_device > 0.0)) fail(who + ": cluster GFLOPS must be > 0");
  if (!(p.model_size_B > 0.0)) fail(who + ": model_size_B must be > 0");
}

inline double total_tokens(const std::vector<PhaseSpec>& phases) {
  double n = 0.0;
  for (const auto& p : phases) n += p.trained_tokens_B;
  return n;
}

inline void check_plan(const std::vector<PhaseSpec>& phases, const PhaseSpec& baseline) {
  if (phases.empty()) fail("training plan has no phases");
  for (const auto& p : phases) check_phase(p);
  check_phase(baseline);
}

}  // namespace detail

// Days to train all phases' tokens at the baseline rate, divided by the days
// the phased plan takes.
inline double time_savings_factor(const std::vector<PhaseSpec>& phases, const PhaseSpec& baseline) {
  detail::check_plan(phases, baseline);
  double phased_days = 0.0;
  for (const auto& p : phases) phased_days += p.days();
  return (detail::total_tokens(phases) / baseline.tokens_per_day_B) / phased_days;
}

// Same comparison in GFLOPS-days: every phase's days weighted by its own
// cluster GFLOPS, the baseline weighted by the baseline cluster.
inline double power_savings_factor(const std::vector<PhaseSpec>& phases, const PhaseSpec& baseline) {
  detail::check_plan(phases, baseline);
  double phased = 0.0;
  for (const auto& p : phases) phased += p.days() * p.cluster_gflops();
  const double scratch = detail::total_tokens(phases) * baseline.cluster_gflops() / baseline.tokens_per_day_B;
  return scratch / phased;
}

struct PhaseCost {
  std::string name;
  double days = 0.0;
  double gflops_days = 0.0;
};

struct SavingsReport {
  double time_factor = 0.0;
  double power_factor = 0.0;
  std::vector<PhaseCost> phases;
  double baseline_days = 0.0;
  double baseline_gflops_days = 0.0;
};

inline SavingsReport savings_report(const TrainingPlan& plan) {
  SavingsReport r;
  r.time_factor = time_savings_factor(plan.phases, plan.baseline);
  r.power_factor = power_savings_factor(plan.phases, plan.baseline);
  for (const auto& p : plan.phases) r.phases.push_back({p.name, p.days(), p.days() * p.cluster_gflops()});
  r.baseline_days = detail::total_tokens(plan.phases) / plan.baseline.tokens_per_day_B;
  r.baseline_gflops_days = r.baseline_days * plan.baseline.cluster_gflops();
  return r;
}

inline void to_json(nlohmann::json& j, const SavingsReport& r) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : r.phases) phases.push_back({{"name", p.name}, {"days", p.days}, {"gflops_days", p.gflops_days}});
  j = nlohmann::json{{"time_factor", r.time_factor},
                     {"power_factor", r.power_factor},
                     {"phases", phases},
                     {"baseline_days", r.baseline_days},
                     {"baseline_gflops_days", r.baseline_gflops_days}};
}

// The AquilaMoE schedule: a 7B preparation run, scale-up to 16B, scale-out to
// 8x16B, against training the final model from scratch on the same tokens.
inline TrainingPlan aquila_moe_plan() {
  return TrainingPlan{{{"preparation", 480, 989.5, 7, 3600, 279},
                       {"scale-up", 1024, 240, 16, 1200, 70},
                       {"scale-out", 1024, 240, 32, 545, 25}},
                      {"from-scratch", 1024, 240, 32, 5345, 25}};
}

}  // namespace effscale
