#pragma once

// Experiment harness: run configuration, the per-run directory and one
// function per subcommand. Each command validates everything it needs before
// writing anything.
//
// Run directory layout:
//   config.json, manifest.json
//   data/      rtp.csv weather.csv traffic.csv charging.csv strata.csv
//   models/    cfmtl.ckpt uplift.ckpt
//   pricing/   eval_price.csv strata_by_period.csv
//   drl/       hub<id>_<method>.ckpt, hub<id>_<method>_curve.csv, eval_drl.csv
//   report/    pricing_long.csv drl_long.csv

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ecthub/hub.hpp"
#include "ecthub/pricing.hpp"
#include "ecthub/scheduler.hpp"
#include "ecthub/traces.hpp"

namespace ecthub::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kTrainingAbort = 4 };

// 11 stations x 766 slots = 8426 (station, slot) items.
inline traces::PopulationConfig default_population() {
  traces::PopulationConfig p;
  p.n_stations = 11;
  return p;
}

// The benchmark fits every model on all items, as the uplift baselines do.
inline pricing::TrainConfig default_pricing_train() {
  pricing::TrainConfig t;
  t.holdout_fraction = 0.0;
  return t;
}

struct DataConfig {
  long n_slots = 766;
  int slots_per_day = 24;
  traces::RtpProfile rtp;
  traces::WeatherProfile weather;
  traces::PopulationConfig population = default_population();  // n_slots / slots_per_day follow the fields above
};

struct PricingSettings {
  pricing::TrainConfig train = default_pricing_train();
  std::vector<double> discounts = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  pricing::RewardMetric metric = pricing::RewardMetric::Coherent;
};

// One simulated hub: the charging station it serves plus local generation.
struct HubSite {
  int station_id = 0;
  double wt_capacity = 0.0;
  double pv_capacity = 0.0;
};

// Month-long episodes train better on rewards scaled to a tenth.
inline sched::PpoConfig default_ppo() {
  sched::PpoConfig p;
  p.reward_scale = 0.1;
  return p;
}

struct DrlSettings {
  sched::PpoConfig ppo = default_ppo();
  double discount = 0.2;
  int window = 24;
  long episode_slots = 30 * 24;
  std::vector<HubSite> hubs = {{0, 10.0, 0.0}, {5, 0.0, 8.0}};
};

struct RunConfig {
  std::uint64_t seed = 1;
  hub::HubConfig hub;
  DataConfig data;
  PricingSettings pricing;
  DrlSettings drl;
};

// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

// Applies the global seed to every module and keeps derived sizes consistent.
void finalize(RunConfig& cfg);
// Throws ConfigError naming the first invalid field.
void validate(const RunConfig& cfg);

// Seeds derived from the global seed; each consumer owns one stream.
std::uint64_t derived_seed(std::uint64_t seed, const std::string& purpose);

// Output root from the ECTHUB_OUT_ROOT environment variable, else "runs".
std::string output_root();
// Resolves a relative --out against the output root.
std::string resolve_run_dir(const std::string& out);

struct CommandOptions {
  std::string run_dir;
  bool force = false;
};

// Each returns an ExitCode after mapping the module exceptions; messages go to stderr.
int cmd_gen_data(const RunConfig& cfg, const CommandOptions& opt);
int cmd_train_price(const RunConfig& cfg, const CommandOptions& opt);
int cmd_eval_price(const RunConfig& cfg, const CommandOptions& opt);
int cmd_train_drl(const RunConfig& cfg, const CommandOptions& opt);
int cmd_eval_drl(const RunConfig& cfg, const CommandOptions& opt);
int cmd_report(const CommandOptions& opt);

// ---- pipeline pieces shared with tests ----------------------------------------

enum class PricingMethod { CfMtl, OR, IPS, DR };
std::string to_string(PricingMethod m);
inline constexpr PricingMethod kAllMethods[] = {PricingMethod::CfMtl, PricingMethod::OR, PricingMethod::IPS,
                                                PricingMethod::DR};

struct GeneratedData {
  traces::TraceSet traces;
  std::vector<traces::Item> items;
  std::vector<std::string> warnings;
};

GeneratedData generate_data(const RunConfig& cfg);

struct PricingModels {
  pricing::PricingModel cfmtl;
  pricing::UpliftModels uplift;
};

PricingModels train_pricing(const RunConfig& cfg, std::span<const traces::ChargingRecord> records);

struct PriceRow {
  std::string method;
  double discount = 0.0;
  pricing::PolicyEvaluation eval;
};

// 4 methods x discounts; baselines discount as many items as CF-MTL does.
std::vector<PriceRow> evaluate_pricing(const RunConfig& cfg, const PricingModels& models,
                                       std::span<const traces::ChargingRecord> records,
                                       std::span<const traces::Item> truth);

// Per (station, slot-of-day) cell, station-major: 1 if the method discounts it at drl.discount.
// Baselines discount the top-k cells by uplift, k = CF-MTL's cell count.
std::vector<int> cell_discounts(const RunConfig& cfg, const PricingModels& models, PricingMethod m);

// Exogenous series for a hub's episode plus occupancy implied by the planted
// strata frequencies under the given per-cell discounts.
sched::HubTraces hub_traces(const RunConfig& cfg, const traces::TraceSet& exo, std::span<const traces::Item> truth,
                            const HubSite& site, std::span<const int> discounted_cells);

// Exogenous test series (same generators, independent seed stream).
traces::TraceSet test_exogenous(const RunConfig& cfg);

sched::EnvConfig env_config(const RunConfig& cfg, const HubSite& site);

}  // namespace ecthub::cli
