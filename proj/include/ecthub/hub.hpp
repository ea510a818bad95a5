#pragma once

// Per-slot physics and economics of one hub: base station, EV charging
// station, battery, wind/PV generation and the grid connection.
//
// Units: power in kW, energy in kWh, money in currency units, one slot lasts
// HubConfig::slot_hours. All functions are pure over explicit state.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ecthub::hub {

struct BatterySpec {
  double capacity = 50.0;
  double soc_min = 10.0;
  double soc_max = 45.0;
  double r_ch = 5.0;
  double r_dch = 5.0;
  double eta_ch = 0.95;
  double eta_dch = 0.95;
};

struct HubConfig {
  double p_bs_min = 1.0;
  double p_bs_max = 4.0;
  double r_cs = 7.0;
  BatterySpec battery;
  double wt_capacity = 0.0;
  double pv_capacity = 0.0;
  double slot_hours = 1.0;
  int t_recovery_slots = 2;
  double c_bp = 0.01;
  // Undiscounted EV charging price; the sell price of a slot is this times (1 - discount).
  double base_sell_price = 0.35;
};

struct BatteryState {
  double soc = 0.0;
};

enum class BatteryAction : int { Discharge = -1, Idle = 0, Charge = 1 };

// Small set over the three battery actions.
class ActionSet {
 public:
  void insert(BatteryAction a) { bits_ |= bit(a); }
  bool contains(BatteryAction a) const { return (bits_ & bit(a)) != 0; }
  int size() const { return __builtin_popcount(bits_); }
  bool operator==(const ActionSet&) const = default;

 private:
  static unsigned bit(BatteryAction a) { return 1u << (static_cast<int>(a) + 1); }
  unsigned bits_ = 0;
};

struct SlotInputs {
  double load_rate = 0.0;
  int cs_active = 0;
  double p_wt = 0.0;
  double p_pv = 0.0;
  double rtp = 0.0;
  double srtp = 0.0;
};

struct SlotOutcome {
  double p_bs = 0.0;
  double p_cs = 0.0;
  double p_bp = 0.0;  // hub-side battery power: +draw when charging, -delivery when discharging
  double p_grid = 0.0;
  double curtailment = 0.0;
  double c_grid = 0.0;
  double c_bp = 0.0;
  double charging_revenue = 0.0;
  double profit = 0.0;
  double soc_after = 0.0;
};

struct BatteryPower {
  double hub_side_power = 0.0;
  double soc_delta = 0.0;
};

struct EpisodeTotals {
  double operation_cost = 0.0;    // OC
  double charging_revenue = 0.0;  // CR
  double profit = 0.0;            // CR - OC
};

// Throws ConfigError naming the first violated constraint.
void validate(const HubConfig& cfg);

HubConfig hub_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const HubConfig& cfg);
HubConfig load_hub_config(const std::string& path);

double base_station_power(const HubConfig& cfg, double load_rate);
double charging_station_power(const HubConfig& cfg, int cs_active);
BatteryPower battery_power(const BatterySpec& spec, double slot_hours, BatteryAction action);

ActionSet feasible_actions(const BatteryState& state, const BatterySpec& spec, double slot_hours);
BatteryState soc_step(const BatteryState& state, const BatterySpec& spec, double slot_hours,
                      BatteryAction action);

// Worst-case blackout reserve: full-load base station over the recovery horizon.
double reserve_floor(const HubConfig& cfg);

double grid_power(double p_bs, double p_cs, double bp_hub_side_power, double p_wt, double p_pv);

SlotOutcome step(const HubConfig& cfg, const BatteryState& state, const SlotInputs& in,
                 BatteryAction action);

EpisodeTotals episode_totals(std::span<const SlotOutcome> outcomes);

}  // namespace ecthub::hub
