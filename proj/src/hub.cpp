#include "ecthub/hub.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ecthub/errors.hpp"

namespace ecthub::hub {

namespace {

// Absorbs rounding in SoC arithmetic (e.g. 0.1 + 0.2 style drift) at the bounds.
constexpr double kSocSlack = 1e-9;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

void validate(const HubConfig& cfg) {
  require(cfg.p_bs_min > 0.0, "p_bs_min must be positive");
  require(cfg.p_bs_min <= cfg.p_bs_max, "p_bs_min must not exceed p_bs_max");
  require(cfg.r_cs >= 0.0, "r_cs must be nonnegative");
  require(cfg.wt_capacity >= 0.0, "wt_capacity must be nonnegative");
  require(cfg.pv_capacity >= 0.0, "pv_capacity must be nonnegative");
  require(cfg.slot_hours > 0.0, "slot_hours must be positive");
  require(cfg.t_recovery_slots >= 0, "t_recovery_slots must be nonnegative");
  require(cfg.c_bp >= 0.0, "c_bp must be nonnegative");
  require(cfg.base_sell_price >= 0.0, "base_sell_price must be nonnegative");

  const auto& b = cfg.battery;
  require(b.capacity > 0.0, "battery.capacity must be positive");
  require(b.soc_min >= 0.0, "battery.soc_min must be nonnegative");
  require(b.soc_min < b.soc_max, "battery.soc_min must be below battery.soc_max");
  require(b.soc_max <= b.capacity, "battery.soc_max must not exceed battery.capacity");
  require(b.r_ch > 0.0, "battery.r_ch must be positive");
  require(b.r_dch > 0.0, "battery.r_dch must be positive");
  require(b.eta_ch > 0.0 && b.eta_ch <= 1.0, "battery.eta_ch must lie in (0,1]");
  require(b.eta_dch > 0.0 && b.eta_dch <= 1.0, "battery.eta_dch must lie in (0,1]");

  const double floor = reserve_floor(cfg);
  require(b.soc_min + kSocSlack >= floor,
          fmt::format("battery.soc_min={} is below the blackout reserve floor {}", b.soc_min, floor));
}

HubConfig hub_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys{"p_bs_min", "p_bs_max",         "r_cs", "wt_capacity",     "pv_capacity",
                                           "slot_hours", "t_recovery_slots", "c_bp", "base_sell_price", "battery"};
  static const std::set<std::string> kBatteryKeys{"capacity", "soc_min", "soc_max", "r_ch",
                                                  "r_dch",    "eta_ch",  "eta_dch"};
  require(j.is_object(), "hub config must be an object");
  for (const auto& [k, v] : j.items()) require(kKeys.contains(k), "hub config: unknown key '" + k + "'");
  if (j.contains("battery")) {
    require(j.at("battery").is_object(), "hub config: battery must be an object");
    for (const auto& [k, v] : j.at("battery").items())
      require(kBatteryKeys.contains(k), "hub config: unknown key 'battery." + k + "'");
  }
  HubConfig cfg;
  try {
    cfg.p_bs_min = j.value("p_bs_min", cfg.p_bs_min);
    cfg.p_bs_max = j.value("p_bs_max", cfg.p_bs_max);
    cfg.r_cs = j.value("r_cs", cfg.r_cs);
    cfg.wt_capacity = j.value("wt_capacity", cfg.wt_capacity);
    cfg.pv_capacity = j.value("pv_capacity", cfg.pv_capacity);
    cfg.slot_hours = j.value("slot_hours", cfg.slot_hours);
    cfg.t_recovery_slots = j.value("t_recovery_slots", cfg.t_recovery_slots);
    cfg.c_bp = j.value("c_bp", cfg.c_bp);
    cfg.base_sell_price = j.value("base_sell_price", cfg.base_sell_price);
    if (j.contains("battery")) {
      const auto& b = j.at("battery");
      auto& s = cfg.battery;
      s.capacity = b.value("capacity", s.capacity);
      s.soc_min = b.value("soc_min", s.soc_min);
      s.soc_max = b.value("soc_max", s.soc_max);
      s.r_ch = b.value("r_ch", s.r_ch);
      s.r_dch = b.value("r_dch", s.r_dch);
      s.eta_ch = b.value("eta_ch", s.eta_ch);
      s.eta_dch = b.value("eta_dch", s.eta_dch);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("hub config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

nlohmann::json to_json(const HubConfig& cfg) {
  const auto& b = cfg.battery;
  return {
      {"p_bs_min", cfg.p_bs_min},
      {"p_bs_max", cfg.p_bs_max},
      {"r_cs", cfg.r_cs},
      {"wt_capacity", cfg.wt_capacity},
      {"pv_capacity", cfg.pv_capacity},
      {"slot_hours", cfg.slot_hours},
      {"t_recovery_slots", cfg.t_recovery_slots},
      {"c_bp", cfg.c_bp},
      {"base_sell_price", cfg.base_sell_price},
      {"battery",
       {{"capacity", b.capacity},
        {"soc_min", b.soc_min},
        {"soc_max", b.soc_max},
        {"r_ch", b.r_ch},
        {"r_dch", b.r_dch},
        {"eta_ch", b.eta_ch},
        {"eta_dch", b.eta_dch}}},
  };
}

HubConfig load_hub_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open hub config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("hub config {}: {}", path, e.what()));
  }
  return hub_config_from_json(j);
}

double base_station_power(const HubConfig& cfg, double load_rate) {
  if (!(load_rate >= 0.0 && load_rate <= 1.0))
    throw DomainError(fmt::format("load rate {} outside [0,1]", load_rate));
  return cfg.p_bs_min + load_rate * (cfg.p_bs_max - cfg.p_bs_min);
}

double charging_station_power(const HubConfig& cfg, int cs_active) {
  return cs_active != 0 ? cfg.r_cs : 0.0;
}

BatteryPower battery_power(const BatterySpec& spec, double slot_hours, BatteryAction action) {
  switch (action) {
    case BatteryAction::Charge:
      return {spec.r_ch, spec.eta_ch * spec.r_ch * slot_hours};
    case BatteryAction::Discharge:
      return {-spec.eta_dch * spec.r_dch, -spec.r_dch * slot_hours};
    case BatteryAction::Idle:
      break;
  }
  return {0.0, 0.0};
}

ActionSet feasible_actions(const BatteryState& state, const BatterySpec& spec, double slot_hours) {
  ActionSet set;
  set.insert(BatteryAction::Idle);
  if (state.soc + battery_power(spec, slot_hours, BatteryAction::Charge).soc_delta <=
      spec.soc_max + kSocSlack)
    set.insert(BatteryAction::Charge);
  if (state.soc + battery_power(spec, slot_hours, BatteryAction::Discharge).soc_delta >=
      spec.soc_min - kSocSlack)
    set.insert(BatteryAction::Discharge);
  return set;
}

BatteryState soc_step(const BatteryState& state, const BatterySpec& spec, double slot_hours,
                      BatteryAction action) {
  if (!feasible_actions(state, spec, slot_hours).contains(action)) {
    const bool charging = action == BatteryAction::Charge;
    throw FeasibilityError(fmt::format("{} from soc={} violates {}={}",
                                       charging ? "charge" : "discharge", state.soc,
                                       charging ? "soc_max" : "soc_min",
                                       charging ? spec.soc_max : spec.soc_min));
  }
  const double next = state.soc + battery_power(spec, slot_hours, action).soc_delta;
  return {std::clamp(next, spec.soc_min, spec.soc_max)};
}

double reserve_floor(const HubConfig& cfg) {
  return cfg.p_bs_max * cfg.t_recovery_slots * cfg.slot_hours;
}

double grid_power(double p_bs, double p_cs, double bp_hub_side_power, double p_wt, double p_pv) {
  return std::max(0.0, p_bs + p_cs + bp_hub_side_power - p_wt - p_pv);
}

SlotOutcome step(const HubConfig& cfg, const BatteryState& state, const SlotInputs& in,
                 BatteryAction action) {
  const BatteryState next = soc_step(state, cfg.battery, cfg.slot_hours, action);

  SlotOutcome out;
  out.p_bs = base_station_power(cfg, in.load_rate);
  out.p_cs = charging_station_power(cfg, in.cs_active);
  out.p_bp = battery_power(cfg.battery, cfg.slot_hours, action).hub_side_power;
  const double net = out.p_bs + out.p_cs + out.p_bp - in.p_wt - in.p_pv;
  out.p_grid = std::max(0.0, net);
  out.curtailment = std::max(0.0, -net);
  out.c_grid = out.p_grid * cfg.slot_hours * in.rtp;
  out.c_bp = std::abs(static_cast<int>(action)) * cfg.c_bp;
  out.charging_revenue = out.p_cs * cfg.slot_hours * in.srtp;
  out.profit = out.charging_revenue - out.c_grid - out.c_bp;
  out.soc_after = next.soc;
  return out;
}

EpisodeTotals episode_totals(std::span<const SlotOutcome> outcomes) {
  if (outcomes.empty()) throw DomainError("episode_totals of an empty episode");
  EpisodeTotals t;
  double profit = 0.0;
  for (const auto& o : outcomes) {
    t.operation_cost += o.c_grid + o.c_bp;
    t.charging_revenue += o.charging_revenue;
    profit += o.profit;
  }
  // Sum of per-slot profits, so the total matches a slot-by-slot ledger exactly.
  t.profit = profit;
  return t;
}

}  // namespace ecthub::hub
