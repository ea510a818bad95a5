#include "ecthub/traces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <map>

#include <fmt/format.h>

#include "ecthub/errors.hpp"
#include "ecthub/random.hpp"

namespace ecthub::traces {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Independent RNG streams per series so adding one series never shifts another.
enum Stream : std::uint64_t { kRtpStream = 1, kWindStream, kCloudStream, kTrafficStream, kPopularityStream, kItemStream };

double hour_of(long slot, int slots_per_day) {
  return 24.0 * static_cast<double>(slot % slots_per_day) / slots_per_day;
}

// Diurnal multiplier: cheap early morning, flat daytime, evening peak.
double rtp_shape(double hour) {
  if (hour < 6.0) return 0.6;
  if (hour < 18.0) return 1.0;
  return 1.6;
}

// Shortest representation that parses back to the same double.
std::string fmt_double(double v) { return fmt::format("{}", v); }

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw ParseError("expected a number, got '" + s + "'", line);
  return v;
}

long parse_long(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) throw ParseError("expected an integer, got '" + s + "'", line);
  return v;
}

int parse_flag(const std::string& s, std::size_t line) {
  const long v = parse_long(s, line);
  if (v != 0 && v != 1) throw ValidationError(fmt::format("flag must be 0 or 1, got {} (line {})", v, line));
  return static_cast<int>(v);
}

// Slots must run 0..n-1 in order; reports the first missing one.
void check_contiguous(const std::vector<long>& slots, const std::string& what) {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] != static_cast<long>(i)) {
      if (slots[i] > static_cast<long>(i))
        throw ValidationError(fmt::format("{}: missing slot {}", what, i));
      throw ValidationError(fmt::format("{}: duplicate or out-of-order slot {}", what, slots[i]));
    }
  }
}

}  // namespace

std::string to_string(Stratum s) {
  switch (s) {
    case Stratum::NoCharge: return "no_charge";
    case Stratum::IncentiveCharge: return "incentive_charge";
    case Stratum::AlwaysCharge: return "always_charge";
  }
  return "no_charge";
}

Stratum stratum_from_string(const std::string& s) {
  if (s == "no_charge") return Stratum::NoCharge;
  if (s == "incentive_charge") return Stratum::IncentiveCharge;
  if (s == "always_charge") return Stratum::AlwaysCharge;
  throw ParseError("unknown stratum '" + s + "'");
}

void TraceSet::validate() const {
  const std::size_t n = rtp.size();
  if (wind_speed.size() != n || irradiance.size() != n || load_rate.size() != n)
    throw ValidationError(fmt::format("trace lengths differ: rtp={} wind={} irradiance={} load_rate={}", n,
                                      wind_speed.size(), irradiance.size(), load_rate.size()));
  for (std::size_t t = 0; t < n; ++t) {
    if (!(rtp[t] >= 0.0)) throw ValidationError(fmt::format("rtp[{}]={} is negative", t, rtp[t]));
    if (!(wind_speed[t] >= 0.0)) throw ValidationError(fmt::format("wind[{}]={} is negative", t, wind_speed[t]));
    if (!(irradiance[t] >= 0.0)) throw ValidationError(fmt::format("irradiance[{}]={} is negative", t, irradiance[t]));
    if (!(load_rate[t] >= 0.0 && load_rate[t] <= 1.0))
      throw ValidationError(fmt::format("load_rate[{}]={} outside [0,1]", t, load_rate[t]));
  }
  std::map<int, long> per_station;
  for (const auto& r : charging) {
    if (r.slot < 0 || static_cast<std::size_t>(r.slot) >= n)
      throw ValidationError(fmt::format("charging record at slot {} outside the trace horizon {}", r.slot, n));
    if (!(r.discount_rate >= 0.0 && r.discount_rate < 1.0))
      throw ValidationError(fmt::format("discount_rate {} outside [0,1)", r.discount_rate));
    ++per_station[r.station_id];
  }
  for (const auto& [station, count] : per_station)
    if (count != static_cast<long>(n))
      throw ValidationError(fmt::format("station {} has {} charging rows for {} slots", station, count, n));
}

// ---- generation -----------------------------------------------------------------

std::vector<double> gen_rtp(std::uint64_t seed, long n_slots, const RtpProfile& profile) {
  if (n_slots <= 0) throw DomainError("gen_rtp: n_slots must be positive");
  if (profile.name != "flat" && profile.name != "diurnal")
    throw DomainError("gen_rtp: unknown profile '" + profile.name + "'");
  std::vector<double> out(static_cast<std::size_t>(n_slots), profile.base);
  if (profile.name == "flat") return out;

  Rng rng = child_rng(seed, kRtpStream);
  for (long t = 0; t < n_slots; ++t) {
    // Bounded noise keeps the evening peak strictly above the early-morning trough.
    const double eps = std::clamp(normal(rng, 0.0, profile.noise), -0.15, 0.15);
    out[t] = profile.base * rtp_shape(hour_of(t, profile.slots_per_day)) * (1.0 + eps);
  }
  return out;
}

Weather gen_weather(std::uint64_t seed, long n_slots, const WeatherProfile& profile) {
  if (n_slots <= 0) throw DomainError("gen_weather: n_slots must be positive");
  Weather w;
  w.wind_speed.resize(n_slots);
  w.irradiance.resize(n_slots);
  Rng wind_rng = child_rng(seed, kWindStream);
  Rng cloud_rng = child_rng(seed, kCloudStream);
  constexpr double kPersistence = 0.9;
  const double innov = std::sqrt(1.0 - kPersistence * kPersistence);
  double wind_z = normal(wind_rng);
  double cloud_z = normal(cloud_rng);
  for (long t = 0; t < n_slots; ++t) {
    wind_z = kPersistence * wind_z + innov * normal(wind_rng);
    cloud_z = kPersistence * cloud_z + innov * normal(cloud_rng);
    w.wind_speed[t] = std::clamp(profile.mean_wind + profile.wind_sd * wind_z, 0.0, 30.0);
    const double hour = hour_of(t, profile.slots_per_day);
    const double sun = (hour > 6.0 && hour < 18.0) ? std::sin(kPi * (hour - 6.0) / 12.0) : 0.0;
    const double clearness = std::clamp(0.7 + 0.25 * cloud_z, 0.1, 1.0);
    w.irradiance[t] = profile.peak_irradiance * sun * clearness;
  }
  return w;
}

std::vector<double> gen_load_rate(std::uint64_t seed, long n_slots, int slots_per_day) {
  if (n_slots <= 0) throw DomainError("gen_load_rate: n_slots must be positive");
  std::vector<double> out(static_cast<std::size_t>(n_slots));
  Rng rng = child_rng(seed, kTrafficStream);
  for (long t = 0; t < n_slots; ++t) {
    const double hour = hour_of(t, slots_per_day);
    // Trough near 04:00, peak near 21:00.
    const double shape = 0.5 - 0.3 * std::cos(2.0 * kPi * (hour - 4.0) / 24.0) +
                         0.15 * std::exp(-0.5 * std::pow((hour - 21.0) / 2.0, 2));
    out[t] = std::clamp(shape + normal(rng, 0.0, 0.05), 0.0, 1.0);
  }
  return out;
}

double wt_power(double wind_speed, double capacity, const WindCurve& c) {
  if (wind_speed < c.cut_in || wind_speed > c.cut_out) return 0.0;
  if (wind_speed >= c.rated_speed) return capacity;
  const double v3 = wind_speed * wind_speed * wind_speed;
  const double ci3 = c.cut_in * c.cut_in * c.cut_in;
  const double r3 = c.rated_speed * c.rated_speed * c.rated_speed;
  return capacity * (v3 - ci3) / (r3 - ci3);
}

double pv_power(double irradiance, double capacity, double derate) {
  return std::min(capacity, capacity * derate * irradiance / 1000.0);
}

// ---- charging population ----------------------------------------------------------

int period_of(long slot, int slots_per_day) {
  const long sod = slot % slots_per_day;
  return static_cast<int>((4 * sod) / slots_per_day);
}

std::vector<CellPrior> planted_cell_priors(std::uint64_t seed, const PopulationConfig& cfg) {
  const auto& pr = cfg.priors;
  if (pr.no_charge < 0 || pr.incentive < 0 || pr.always < 0 ||
      std::abs(pr.no_charge + pr.incentive + pr.always - 1.0) > 1e-9)
    throw DomainError("strata priors must be nonnegative and sum to 1");
  if (cfg.n_stations <= 0 || cfg.slots_per_day <= 0) throw DomainError("population needs stations and slots");

  Rng rng = child_rng(seed, kPopularityStream);
  std::vector<double> popularity(cfg.n_stations);
  for (auto& u : popularity) u = uniform(rng);

  // Odds scaling that stays well defined at probabilities 0 and 1.
  auto scale_odds = [](double p, double m) {
    const double num = p * m;
    const double den = num + (1.0 - p);
    return den > 0.0 ? num / den : 0.0;
  };
  const double rest = pr.no_charge + pr.always;
  const double q0 = rest > 0.0 ? pr.always / rest : 0.0;

  std::vector<CellPrior> cells(static_cast<std::size_t>(cfg.n_stations) * cfg.slots_per_day);
  for (int s = 0; s < cfg.n_stations; ++s) {
    for (int h = 0; h < cfg.slots_per_day; ++h) {
      const int period = period_of(h, cfg.slots_per_day);
      const double incentive = period == 3 ? scale_odds(pr.incentive, cfg.evening_incentive_boost) : pr.incentive;
      double q = scale_odds(q0, std::exp(cfg.popularity_effect * (popularity[s] - 0.5)));
      if (period == 0) q = scale_odds(q, cfg.night_always_boost);
      if (period == 1 || period == 2) q = scale_odds(q, cfg.daytime_always_boost);
      auto& cell = cells[static_cast<std::size_t>(s) * cfg.slots_per_day + h];
      cell.p[1] = incentive;
      cell.p[2] = (1.0 - incentive) * q;
      cell.p[0] = (1.0 - incentive) * (1.0 - q);
    }
  }
  return cells;
}

double logged_propensity(const PopulationConfig& cfg, long slot) {
  if (!cfg.confounded) return cfg.logged_propensity;
  // Operators historically discounted more in the evening.
  static constexpr double kByPeriod[4] = {0.3, 0.4, 0.5, 0.75};
  return kByPeriod[period_of(slot, cfg.slots_per_day)];
}

Population gen_charging_population(std::uint64_t seed, const PopulationConfig& cfg) {
  if (cfg.n_slots <= 0) throw DomainError("population needs a positive slot count");
  if (!(cfg.discount_rate > 0.0 && cfg.discount_rate < 1.0)) throw DomainError("discount_rate must lie in (0,1)");
  const auto cells = planted_cell_priors(seed, cfg);

  Population pop;
  const auto& pr = cfg.priors;
  for (double p : {pr.no_charge, pr.incentive, pr.always})
    if (p == 1.0) pop.warnings.push_back("degenerate strata priors: a single stratum has prior 1");

  Rng rng = child_rng(seed, kItemStream);
  pop.items.reserve(static_cast<std::size_t>(cfg.n_stations) * cfg.n_slots);
  pop.records.reserve(pop.items.capacity());
  for (int s = 0; s < cfg.n_stations; ++s) {
    for (long t = 0; t < cfg.n_slots; ++t) {
      const auto& cell = cells[static_cast<std::size_t>(s) * cfg.slots_per_day + t % cfg.slots_per_day];
      const double u = uniform(rng);
      Stratum stratum = Stratum::AlwaysCharge;
      if (u < cell.p[0])
        stratum = Stratum::NoCharge;
      else if (u < cell.p[0] + cell.p[1])
        stratum = Stratum::IncentiveCharge;
      const int treated = bernoulli(rng, logged_propensity(cfg, t)) ? 1 : 0;
      int charged = 0;
      switch (stratum) {
        case Stratum::AlwaysCharge: charged = 1; break;
        case Stratum::NoCharge: charged = 0; break;
        case Stratum::IncentiveCharge: charged = treated; break;
      }
      pop.items.push_back({s, t, stratum});
      pop.records.push_back({s, t, charged, treated, treated ? cfg.discount_rate : 0.0});
    }
  }
  return pop;
}

std::vector<Stratum> ncf_label(std::span<const ChargingRecord> records, std::span<const double> ratings) {
  if (records.size() != ratings.size()) throw DomainError("ncf_label: ratings must align with records");
  std::vector<Stratum> labels(records.size(), Stratum::NoCharge);
  std::vector<std::size_t> positive;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].charged) positive.push_back(i);
  if (positive.empty()) {
    if (records.empty()) throw DomainError("ncf_label: no records");
    return labels;
  }
  std::stable_sort(positive.begin(), positive.end(),
                   [&](std::size_t a, std::size_t b) { return ratings[a] > ratings[b]; });
  const std::size_t n_always = (positive.size() + 1) / 2;
  for (std::size_t k = 0; k < positive.size(); ++k)
    labels[positive[k]] = k < n_always ? Stratum::AlwaysCharge : Stratum::IncentiveCharge;
  return labels;
}

// ---- CSV ------------------------------------------------------------------------

std::string header_of(Schema schema) {
  switch (schema) {
    case Schema::Rtp: return "slot,price";
    case Schema::Weather: return "slot,wind_mps,irradiance_wm2";
    case Schema::Traffic: return "slot,load_rate";
    case Schema::Charging: return "station_id,slot,charged,discount_given,discount_rate";
  }
  return {};
}

TraceSet load_csv(const std::string& path, Schema schema) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header_of(schema))
    throw ParseError(fmt::format("{}: header '{}' does not match '{}'", path, line, header_of(schema)), 1);

  const std::size_t expected_cols = split(header_of(schema)).size();
  TraceSet ts;
  std::vector<long> slots;
  std::map<int, std::vector<long>> station_slots;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = split(line);
    if (f.size() != expected_cols)
      throw ParseError(fmt::format("{}: expected {} fields, got {}", path, expected_cols, f.size()), line_no);
    auto range = [&](bool ok, const std::string& what) {
      if (!ok) throw ValidationError(fmt::format("{} line {}: {}", path, line_no, what));
    };
    switch (schema) {
      case Schema::Rtp: {
        slots.push_back(parse_long(f[0], line_no));
        const double price = parse_double(f[1], line_no);
        range(price >= 0.0, "price must be nonnegative");
        ts.rtp.push_back(price);
        break;
      }
      case Schema::Weather: {
        slots.push_back(parse_long(f[0], line_no));
        const double wind = parse_double(f[1], line_no);
        const double irr = parse_double(f[2], line_no);
        range(wind >= 0.0, "wind_mps must be nonnegative");
        range(irr >= 0.0, "irradiance_wm2 must be nonnegative");
        ts.wind_speed.push_back(wind);
        ts.irradiance.push_back(irr);
        break;
      }
      case Schema::Traffic: {
        slots.push_back(parse_long(f[0], line_no));
        const double a = parse_double(f[1], line_no);
        range(a >= 0.0 && a <= 1.0, fmt::format("load_rate {} outside [0,1]", a));
        ts.load_rate.push_back(a);
        break;
      }
      case Schema::Charging: {
        ChargingRecord r;
        r.station_id = static_cast<int>(parse_long(f[0], line_no));
        r.slot = parse_long(f[1], line_no);
        r.charged = parse_flag(f[2], line_no);
        r.discount_given = parse_flag(f[3], line_no);
        r.discount_rate = parse_double(f[4], line_no);
        range(r.discount_rate >= 0.0 && r.discount_rate < 1.0, "discount_rate outside [0,1)");
        station_slots[r.station_id].push_back(r.slot);
        ts.charging.push_back(r);
        break;
      }
    }
  }
  if (schema == Schema::Charging) {
    for (const auto& [station, s] : station_slots) check_contiguous(s, fmt::format("{} station {}", path, station));
    std::stable_sort(ts.charging.begin(), ts.charging.end(), [](const auto& a, const auto& b) {
      return a.station_id != b.station_id ? a.station_id < b.station_id : a.slot < b.slot;
    });
  } else {
    check_contiguous(slots, path);
  }
  return ts;
}

void write_csv(const TraceSet& traces, const std::string& path, Schema schema) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out << header_of(schema) << '\n';
  switch (schema) {
    case Schema::Rtp:
      for (std::size_t t = 0; t < traces.rtp.size(); ++t) out << t << ',' << fmt_double(traces.rtp[t]) << '\n';
      break;
    case Schema::Weather:
      for (std::size_t t = 0; t < traces.wind_speed.size(); ++t)
        out << t << ',' << fmt_double(traces.wind_speed[t]) << ',' << fmt_double(traces.irradiance[t]) << '\n';
      break;
    case Schema::Traffic:
      for (std::size_t t = 0; t < traces.load_rate.size(); ++t)
        out << t << ',' << fmt_double(traces.load_rate[t]) << '\n';
      break;
    case Schema::Charging:
      for (const auto& r : traces.charging)
        out << r.station_id << ',' << r.slot << ',' << r.charged << ',' << r.discount_given << ','
            << fmt_double(r.discount_rate) << '\n';
      break;
  }
  if (!out) throw ValidationError("failed writing " + path);
}

TraceSet load_trace_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path d(dir);
  TraceSet ts = load_csv((d / "rtp.csv").string(), Schema::Rtp);
  TraceSet w = load_csv((d / "weather.csv").string(), Schema::Weather);
  TraceSet tr = load_csv((d / "traffic.csv").string(), Schema::Traffic);
  TraceSet ch = load_csv((d / "charging.csv").string(), Schema::Charging);
  ts.wind_speed = std::move(w.wind_speed);
  ts.irradiance = std::move(w.irradiance);
  ts.load_rate = std::move(tr.load_rate);
  ts.charging = std::move(ch.charging);
  ts.validate();
  return ts;
}

void write_trace_dir(const TraceSet& traces, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path d(dir);
  write_csv(traces, (d / "rtp.csv").string(), Schema::Rtp);
  write_csv(traces, (d / "weather.csv").string(), Schema::Weather);
  write_csv(traces, (d / "traffic.csv").string(), Schema::Traffic);
  write_csv(traces, (d / "charging.csv").string(), Schema::Charging);
}

void write_strata_csv(std::span<const Item> items, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  out << "station_id,slot,stratum\n";
  for (const auto& it : items) out << it.station_id << ',' << it.slot << ',' << to_string(it.stratum) << '\n';
  if (!out) throw ValidationError("failed writing " + path);
}

std::vector<Item> load_strata_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || (line != "station_id,slot,stratum" && line != "station_id,slot,stratum\r"))
    throw ParseError(path + ": bad header", 1);
  std::vector<Item> items;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 3) throw ParseError(fmt::format("{}: expected 3 fields, got {}", path, f.size()), line_no);
    try {
      items.push_back({static_cast<int>(parse_long(f[0], line_no)), parse_long(f[1], line_no), stratum_from_string(f[2])});
    } catch (const ParseError& e) {
      if (e.line()) throw;
      throw ParseError(e.what(), line_no);
    }
  }
  return items;
}

}  // namespace ecthub::traces
