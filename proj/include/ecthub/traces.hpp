#pragma once

// Exogenous per-slot series consumed by the hub simulation and the two
// learners: real-time price, weather, network load rate and EV charging
// records. Synthetic generators are pure functions of (seed, params).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ecthub::traces {

// Order matches the stratification head outputs (P00, P01, P11).
enum class Stratum : int { NoCharge = 0, IncentiveCharge = 1, AlwaysCharge = 2 };

std::string to_string(Stratum s);
Stratum stratum_from_string(const std::string& s);

struct ChargingRecord {
  int station_id = 0;
  long slot = 0;
  int charged = 0;         // Y
  int discount_given = 0;  // T
  double discount_rate = 0.0;

  bool operator==(const ChargingRecord&) const = default;
};

struct TraceSet {
  long start_slot = 0;
  std::vector<double> rtp;
  std::vector<double> wind_speed;
  std::vector<double> irradiance;
  std::vector<double> load_rate;
  std::vector<ChargingRecord> charging;  // sorted by (station_id, slot)

  std::size_t size() const { return rtp.size(); }
  // Throws ValidationError on unequal lengths or out-of-range values.
  void validate() const;

  bool operator==(const TraceSet&) const = default;
};

// ---- generation ---------------------------------------------------------------

struct RtpProfile {
  std::string name = "diurnal";  // "flat" or "diurnal"
  double base = 0.10;            // money per kWh
  double noise = 0.05;           // relative multiplicative noise scale (diurnal only)
  int slots_per_day = 24;
};

std::vector<double> gen_rtp(std::uint64_t seed, long n_slots, const RtpProfile& profile);

struct WeatherProfile {
  double mean_wind = 6.0;
  double wind_sd = 2.5;
  double peak_irradiance = 1000.0;
  int slots_per_day = 24;
};

struct Weather {
  std::vector<double> wind_speed;
  std::vector<double> irradiance;
};

Weather gen_weather(std::uint64_t seed, long n_slots, const WeatherProfile& profile);
std::vector<double> gen_load_rate(std::uint64_t seed, long n_slots, int slots_per_day = 24);

struct WindCurve {
  double cut_in = 3.0;
  double rated_speed = 12.0;
  double cut_out = 25.0;
};

double wt_power(double wind_speed, double capacity, const WindCurve& curve = {});
double pv_power(double irradiance, double capacity, double derate = 0.9);

// ---- charging population with planted strata ----------------------------------

struct StrataPriors {
  double no_charge = 0.30;
  double incentive = 0.40;
  double always = 0.30;
};

// Each (station, slot-of-day) cell is planted as follows. The incentive share
// P01 depends on the time of day only (evening-boosted). The remaining mass
// 1 - P01 splits between AlwaysCharge and NoCharge by an always-fraction q
// driven by station popularity and time of day:
//   P11 = (1 - P01) * q,  P00 = (1 - P01) * (1 - q).
// The global priors fix the baseline cell; the other knobs are odds multipliers
// (or a log-odds slope for popularity).
struct PopulationConfig {
  int n_stations = 12;
  long n_slots = 24 * 30;
  int slots_per_day = 24;
  StrataPriors priors{0.30, 0.45, 0.25};
  // Odds multiplier on the incentive share during 18:00-24:00.
  double evening_incentive_boost = 1.5;
  // Log-odds slope of the always-fraction in station popularity (uniform in [0,1], centred).
  double popularity_effect = 3.0;
  // Odds multiplier on the always-fraction during 06:00-18:00.
  double daytime_always_boost = 5.0;
  // Odds multiplier on the always-fraction during 00:00-06:00.
  double night_always_boost = 0.15;
  // Probability that the logged policy offered a discount.
  double logged_propensity = 0.5;
  // When set, the logged propensity depends on the slot of day (evening-heavy).
  bool confounded = false;
  double discount_rate = 0.2;

  // Every cell equals the global priors.
  void make_uniform() {
    evening_incentive_boost = 1.0;
    popularity_effect = 0.0;
    daytime_always_boost = 1.0;
    night_always_boost = 1.0;
  }
};

// One (station, slot) observation with its ground-truth stratum.
struct Item {
  int station_id = 0;
  long slot = 0;
  Stratum stratum = Stratum::NoCharge;

  bool operator==(const Item&) const = default;
};

struct Population {
  std::vector<Item> items;             // station-major, then slot
  std::vector<ChargingRecord> records; // aligned with items
  std::vector<std::string> warnings;
};

// Period bucket (0..3) of a slot-of-day: 00-06, 06-12, 12-18, 18-24.
int period_of(long slot, int slots_per_day = 24);

// Planted stratum distribution of a (station, slot-of-day) cell, as (P00, P01, P11).
struct CellPrior {
  double p[3];
};
std::vector<CellPrior> planted_cell_priors(std::uint64_t seed, const PopulationConfig& cfg);

double logged_propensity(const PopulationConfig& cfg, long slot);

Population gen_charging_population(std::uint64_t seed, const PopulationConfig& cfg);

// Labels records from NCF ratings: among Y=1 items, the higher-rated half
// (ceil for odd counts) becomes AlwaysCharge, the rest IncentiveCharge;
// Y=0 items are NoCharge. `ratings` is aligned with `records`.
std::vector<Stratum> ncf_label(std::span<const ChargingRecord> records, std::span<const double> ratings);

// ---- CSV ----------------------------------------------------------------------

enum class Schema { Rtp, Weather, Traffic, Charging };

std::string header_of(Schema schema);

// Parses one file into the matching fields of a TraceSet (others left empty).
TraceSet load_csv(const std::string& path, Schema schema);
void write_csv(const TraceSet& traces, const std::string& path, Schema schema);

// Reads rtp/weather/traffic/charging.csv from `dir` and validates alignment.
TraceSet load_trace_dir(const std::string& dir);
void write_trace_dir(const TraceSet& traces, const std::string& dir);

void write_strata_csv(std::span<const Item> items, const std::string& path);
std::vector<Item> load_strata_csv(const std::string& path);

}  // namespace ecthub::traces
