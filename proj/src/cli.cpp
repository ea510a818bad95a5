#include "ecthub/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ecthub/errors.hpp"
#include "ecthub/random.hpp"

namespace ecthub::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kPeriodLabels[] = {"00-06", "06-12", "12-18", "18-24"};

// Strict reader over one JSON object: unknown keys are rejected at finish().
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", path_));
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(fmt::format("config: '{}.{}' has the wrong type", path_, key));
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(fmt::format("config: unknown key '{}.{}'", path_, k));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

std::string metric_name(pricing::RewardMetric m) { return m == pricing::RewardMetric::Literal ? "literal" : "coherent"; }

pricing::RewardMetric metric_from(const std::string& s) {
  if (s == "coherent") return pricing::RewardMetric::Coherent;
  if (s == "literal") return pricing::RewardMetric::Literal;
  throw ConfigError("config: pricing.metric must be 'coherent' or 'literal', got '" + s + "'");
}

// ---- run directory ----------------------------------------------------------------

fs::path data_dir(const fs::path& run) { return run / "data"; }
fs::path models_dir(const fs::path& run) { return run / "models"; }
fs::path pricing_dir(const fs::path& run) { return run / "pricing"; }
fs::path drl_dir(const fs::path& run) { return run / "drl"; }
fs::path report_dir(const fs::path& run) { return run / "report"; }

std::string hub_file(int hub_id, PricingMethod m, const char* suffix) {
  std::string name = to_string(m);
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return c == '-' ? '_' : std::tolower(c); });
  return fmt::format("hub{}_{}{}", hub_id, name, suffix);
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw ValidationError("missing input file " + p.string());
}

// Refuses to clobber existing outputs unless forced; creates parent directories.
void prepare_outputs(const std::vector<fs::path>& outputs, bool force) {
  for (const auto& p : outputs)
    if (fs::exists(p) && !force)
      throw ConfigError(fmt::format("{} already exists; rerun with --force to overwrite", p.string()));
  for (const auto& p : outputs) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw ValidationError(fmt::format("cannot create {}: {}", p.parent_path().string(), ec.message()));
  }
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + p.string());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  auto out = open_out(p);
  out << text;
  if (!out) throw ValidationError("failed writing " + p.string());
}

// Records a command's outputs (relative paths and sizes) in manifest.json;
// with a config it also refreshes the seed and config.json snapshot.
void update_manifest(const fs::path& run, const RunConfig* cfg, const std::string& command,
                     const std::vector<fs::path>& outputs) {
  const fs::path path = run / "manifest.json";
  json m = json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    try {
      in >> m;
    } catch (const json::exception&) {
      m = json::object();
    }
  }
  json files = json::object();
  for (const auto& p : outputs) files[fs::relative(p, run).generic_string()] = fs::file_size(p);
  if (cfg) m["seed"] = cfg->seed;
  m["commands"][command] = {{"outputs", files}};
  write_text(path, m.dump(2) + "\n");
  if (cfg) write_text(run / "config.json", to_json(*cfg).dump(2) + "\n");
}

template <class F>
int guarded(const char* command, F&& body) {
  try {
    body();
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << command << ": configuration error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DomainError& e) {
    std::cerr << command << ": configuration error: " << e.what() << "\n";
    return kConfigError;
  } catch (const TrainingError& e) {
    std::cerr << command << ": training aborted: " << e.what() << "\n";
    return kTrainingAbort;
  } catch (const fs::filesystem_error& e) {
    std::cerr << command << ": data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::runtime_error& e) {
    std::cerr << command << ": data error: " << e.what() << "\n";
    return kDataError;
  }
}

struct LoadedData {
  traces::TraceSet traces;
  std::vector<traces::Item> items;
};

LoadedData load_data(const fs::path& run) {
  const fs::path d = data_dir(run);
  for (const char* f : {"rtp.csv", "weather.csv", "traffic.csv", "charging.csv", "strata.csv"}) require_file(d / f);
  LoadedData out;
  out.traces = traces::load_trace_dir(d.string());
  out.items = traces::load_strata_csv((d / "strata.csv").string());
  if (out.items.size() != out.traces.charging.size())
    throw ValidationError(fmt::format("strata.csv has {} rows, charging.csv has {}", out.items.size(),
                                      out.traces.charging.size()));
  for (std::size_t i = 0; i < out.items.size(); ++i)
    if (out.items[i].station_id != out.traces.charging[i].station_id || out.items[i].slot != out.traces.charging[i].slot)
      throw ValidationError(fmt::format("strata.csv row {} does not match charging.csv", i + 2));
  return out;
}

PricingModels load_models(const fs::path& run) {
  const fs::path m = models_dir(run);
  require_file(m / "cfmtl.ckpt");
  require_file(m / "uplift.ckpt");
  return {pricing::PricingModel::load((m / "cfmtl.ckpt").string()),
          pricing::UpliftModels::load((m / "uplift.ckpt").string())};
}

std::vector<pricing::Features> cell_features(const RunConfig& cfg) {
  std::vector<pricing::Features> x;
  for (int s = 0; s < cfg.data.population.n_stations; ++s)
    for (int h = 0; h < cfg.data.slots_per_day; ++h) x.push_back({s, h});
  return x;
}

pricing::UpliftMethod uplift_method(PricingMethod m) {
  switch (m) {
    case PricingMethod::IPS: return pricing::UpliftMethod::IPS;
    case PricingMethod::DR: return pricing::UpliftMethod::DR;
    default: return pricing::UpliftMethod::OR;
  }
}

}  // namespace

// ---- config -------------------------------------------------------------------------

std::string to_string(PricingMethod m) {
  switch (m) {
    case PricingMethod::CfMtl: return "CF-MTL";
    case PricingMethod::OR: return "OR";
    case PricingMethod::IPS: return "IPS";
    case PricingMethod::DR: return "DR";
  }
  return "CF-MTL";
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  Obj root(j, "config");
  root.get("seed", cfg.seed);
  if (const json* h = root.child("hub")) cfg.hub = hub::hub_config_from_json(*h);

  if (const json* dj = root.child("data")) {
    Obj d(*dj, root.path("data"));
    auto& dc = cfg.data;
    d.get("n_slots", dc.n_slots);
    d.get("slots_per_day", dc.slots_per_day);
    if (const json* rj = d.child("rtp")) {
      Obj r(*rj, d.path("rtp"));
      r.get("profile", dc.rtp.name);
      r.get("base", dc.rtp.base);
      r.get("noise", dc.rtp.noise);
      r.finish();
    }
    if (const json* wj = d.child("weather")) {
      Obj w(*wj, d.path("weather"));
      w.get("mean_wind", dc.weather.mean_wind);
      w.get("wind_sd", dc.weather.wind_sd);
      w.get("peak_irradiance", dc.weather.peak_irradiance);
      w.finish();
    }
    if (const json* pj = d.child("population")) {
      Obj p(*pj, d.path("population"));
      auto& pc = dc.population;
      p.get("n_stations", pc.n_stations);
      if (const json* sj = p.child("priors")) {
        std::vector<double> pr;
        try {
          pr = sj->get<std::vector<double>>();
        } catch (const json::exception&) {
          throw ConfigError("config: data.population.priors must be an array of three numbers");
        }
        require(pr.size() == 3, "data.population.priors must have three entries (no_charge, incentive, always)");
        pc.priors = {pr[0], pr[1], pr[2]};
      }
      p.get("evening_incentive_boost", pc.evening_incentive_boost);
      p.get("popularity_effect", pc.popularity_effect);
      p.get("daytime_always_boost", pc.daytime_always_boost);
      p.get("night_always_boost", pc.night_always_boost);
      p.get("logged_propensity", pc.logged_propensity);
      p.get("confounded", pc.confounded);
      p.get("discount_rate", pc.discount_rate);
      p.finish();
    }
    d.finish();
  }

  if (const json* pj = root.child("pricing")) {
    Obj p(*pj, root.path("pricing"));
    auto& t = cfg.pricing.train;
    p.get("epochs", t.epochs);
    p.get("batch_size", t.batch_size);
    p.get("learning_rate", t.learning_rate);
    p.get("weight_decay", t.weight_decay);
    p.get("holdout_fraction", t.holdout_fraction);
    p.get("embedding_dim", t.shape.embedding_dim);
    p.get("hidden", t.shape.hidden);
    p.get("discounts", cfg.pricing.discounts);
    std::string metric = metric_name(cfg.pricing.metric);
    p.get("metric", metric);
    cfg.pricing.metric = metric_from(metric);
    p.finish();
  }

  if (const json* rj = root.child("drl")) {
    Obj r(*rj, root.path("drl"));
    auto& dc = cfg.drl;
    auto& pp = dc.ppo;
    r.get("clip_eps", pp.clip_eps);
    r.get("value_coef", pp.value_coef);
    r.get("entropy_coef", pp.entropy_coef);
    r.get("gamma", pp.gamma);
    r.get("lambda", pp.lambda);
    r.get("epochs", pp.epochs);
    r.get("minibatch", pp.minibatch);
    r.get("learning_rate", pp.learning_rate);
    r.get("weight_decay", pp.weight_decay);
    r.get("episodes_train", pp.episodes_train);
    r.get("episodes_test", pp.episodes_test);
    r.get("reward_scale", pp.reward_scale);
    r.get("hidden", pp.hidden);
    r.get("mask_infeasible", pp.mask_infeasible);
    r.get("checkpoint_every", pp.checkpoint_every);
    r.get("discount", dc.discount);
    r.get("window", dc.window);
    r.get("episode_slots", dc.episode_slots);
    if (const json* hj = r.child("hubs")) {
      require(hj->is_array(), "drl.hubs must be an array");
      dc.hubs.clear();
      for (std::size_t i = 0; i < hj->size(); ++i) {
        Obj h((*hj)[i], fmt::format("{}[{}]", r.path("hubs"), i));
        HubSite site;
        h.get("station_id", site.station_id);
        h.get("wt_capacity", site.wt_capacity);
        h.get("pv_capacity", site.pv_capacity);
        h.finish();
        dc.hubs.push_back(site);
      }
    }
    r.finish();
  }
  root.finish();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const auto& d = cfg.data;
  const auto& pc = d.population;
  const auto& t = cfg.pricing.train;
  const auto& pp = cfg.drl.ppo;
  json hubs = json::array();
  for (const auto& h : cfg.drl.hubs)
    hubs.push_back({{"station_id", h.station_id}, {"wt_capacity", h.wt_capacity}, {"pv_capacity", h.pv_capacity}});
  return {
      {"seed", cfg.seed},
      {"hub", hub::to_json(cfg.hub)},
      {"data",
       {{"n_slots", d.n_slots},
        {"slots_per_day", d.slots_per_day},
        {"rtp", {{"profile", d.rtp.name}, {"base", d.rtp.base}, {"noise", d.rtp.noise}}},
        {"weather",
         {{"mean_wind", d.weather.mean_wind}, {"wind_sd", d.weather.wind_sd},
          {"peak_irradiance", d.weather.peak_irradiance}}},
        {"population",
         {{"n_stations", pc.n_stations},
          {"priors", {pc.priors.no_charge, pc.priors.incentive, pc.priors.always}},
          {"evening_incentive_boost", pc.evening_incentive_boost},
          {"popularity_effect", pc.popularity_effect},
          {"daytime_always_boost", pc.daytime_always_boost},
          {"night_always_boost", pc.night_always_boost},
          {"logged_propensity", pc.logged_propensity},
          {"confounded", pc.confounded},
          {"discount_rate", pc.discount_rate}}}}},
      {"pricing",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"weight_decay", t.weight_decay},
        {"holdout_fraction", t.holdout_fraction},
        {"embedding_dim", t.shape.embedding_dim},
        {"hidden", t.shape.hidden},
        {"discounts", cfg.pricing.discounts},
        {"metric", metric_name(cfg.pricing.metric)}}},
      {"drl",
       {{"clip_eps", pp.clip_eps},
        {"value_coef", pp.value_coef},
        {"entropy_coef", pp.entropy_coef},
        {"gamma", pp.gamma},
        {"lambda", pp.lambda},
        {"epochs", pp.epochs},
        {"minibatch", pp.minibatch},
        {"learning_rate", pp.learning_rate},
        {"weight_decay", pp.weight_decay},
        {"episodes_train", pp.episodes_train},
        {"episodes_test", pp.episodes_test},
        {"reward_scale", pp.reward_scale},
        {"hidden", pp.hidden},
        {"mask_infeasible", pp.mask_infeasible},
        {"checkpoint_every", pp.checkpoint_every},
        {"discount", cfg.drl.discount},
        {"window", cfg.drl.window},
        {"episode_slots", cfg.drl.episode_slots},
        {"hubs", hubs}}},
  };
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config {}: {}", path, e.what()));
  }
  return run_config_from_json(j);
}

std::uint64_t derived_seed(std::uint64_t seed, const std::string& purpose) {
  // FNV-1a of the purpose picks the stream.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return child_rng(seed, h)();
}

void finalize(RunConfig& cfg) {
  auto& pc = cfg.data.population;
  pc.n_slots = cfg.data.n_slots;
  pc.slots_per_day = cfg.data.slots_per_day;
  cfg.data.rtp.slots_per_day = cfg.data.slots_per_day;
  cfg.data.weather.slots_per_day = cfg.data.slots_per_day;
  auto& t = cfg.pricing.train;
  t.seed = derived_seed(cfg.seed, "pricing");
  t.shape.n_stations = pc.n_stations;
  t.shape.slots_per_day = cfg.data.slots_per_day;
  cfg.drl.ppo.seed = derived_seed(cfg.seed, "drl");
}

void validate(const RunConfig& cfg) {
  hub::validate(cfg.hub);
  const auto& d = cfg.data;
  require(d.n_slots > 0, fmt::format("data.n_slots={} must be positive", d.n_slots));
  require(d.slots_per_day > 0, "data.slots_per_day must be positive");
  require(d.rtp.name == "flat" || d.rtp.name == "diurnal", "data.rtp.profile must be 'flat' or 'diurnal'");
  require(d.rtp.base > 0.0, "data.rtp.base must be positive");
  require(d.rtp.noise >= 0.0, "data.rtp.noise must be >= 0");
  require(d.weather.mean_wind >= 0.0 && d.weather.wind_sd >= 0.0 && d.weather.peak_irradiance >= 0.0,
          "data.weather values must be >= 0");
  const auto& pc = d.population;
  require(pc.n_stations >= 1, "data.population.n_stations must be >= 1");
  const auto& pr = pc.priors;
  for (double p : {pr.no_charge, pr.incentive, pr.always})
    require(p >= 0.0 && p <= 1.0, "data.population.priors must lie in [0, 1]");
  require(std::abs(pr.no_charge + pr.incentive + pr.always - 1.0) < 1e-9, "data.population.priors must sum to 1");
  require(pc.evening_incentive_boost > 0.0 && pc.daytime_always_boost > 0.0 && pc.night_always_boost > 0.0,
          "data.population odds multipliers must be positive");
  require(pc.logged_propensity > 0.0 && pc.logged_propensity < 1.0,
          "data.population.logged_propensity must lie in (0, 1)");
  require(pc.discount_rate > 0.0 && pc.discount_rate < 1.0, "data.population.discount_rate must lie in (0, 1)");

  const auto& t = cfg.pricing.train;
  require(t.epochs >= 1, "pricing.epochs must be >= 1");
  require(t.batch_size >= 1, "pricing.batch_size must be >= 1");
  require(t.learning_rate > 0.0, "pricing.learning_rate must be positive");
  require(t.weight_decay >= 0.0, "pricing.weight_decay must be >= 0");
  require(t.holdout_fraction >= 0.0 && t.holdout_fraction < 1.0, "pricing.holdout_fraction must lie in [0, 1)");
  require(t.shape.embedding_dim >= 1, "pricing.embedding_dim must be >= 1");
  require(!t.shape.hidden.empty(), "pricing.hidden must name at least one layer");
  for (int h : t.shape.hidden) require(h >= 1, "pricing.hidden widths must be >= 1");
  require(!cfg.pricing.discounts.empty(), "pricing.discounts must not be empty");
  for (double c : cfg.pricing.discounts) require(c > 0.0 && c < 1.0, "pricing.discounts must lie in (0, 1)");

  const auto& r = cfg.drl;
  sched::validate(r.ppo);
  require(r.discount >= 0.0 && r.discount < 1.0, "drl.discount must lie in [0, 1)");
  require(r.window >= 0, "drl.window must be >= 0");
  require(r.episode_slots >= d.slots_per_day && r.episode_slots % d.slots_per_day == 0,
          "drl.episode_slots must be a positive whole number of days");
  require(r.window + r.episode_slots <= d.n_slots,
          fmt::format("data.n_slots={} is shorter than drl.window + drl.episode_slots = {}", d.n_slots,
                      r.window + r.episode_slots));
  require(!r.hubs.empty(), "drl.hubs must not be empty");
  std::set<int> ids;
  for (const auto& h : r.hubs) {
    require(h.station_id >= 0 && h.station_id < pc.n_stations,
            fmt::format("drl.hubs station_id {} outside [0, {})", h.station_id, pc.n_stations));
    require(ids.insert(h.station_id).second, fmt::format("drl.hubs lists station {} twice", h.station_id));
    require(h.wt_capacity >= 0.0 && h.pv_capacity >= 0.0, "drl.hubs capacities must be >= 0");
  }
}

std::string output_root() {
  const char* env = std::getenv("ECTHUB_OUT_ROOT");
  return env && *env ? env : "runs";
}

std::string resolve_run_dir(const std::string& out) {
  const fs::path p(out);
  return p.is_absolute() ? p.string() : (fs::path(output_root()) / p).string();
}

// ---- pipeline pieces -----------------------------------------------------------------------

GeneratedData generate_data(const RunConfig& cfg) {
  const auto& d = cfg.data;
  GeneratedData g;
  g.traces.start_slot = 0;
  g.traces.rtp = traces::gen_rtp(derived_seed(cfg.seed, "rtp"), d.n_slots, d.rtp);
  auto w = traces::gen_weather(derived_seed(cfg.seed, "weather"), d.n_slots, d.weather);
  g.traces.wind_speed = std::move(w.wind_speed);
  g.traces.irradiance = std::move(w.irradiance);
  g.traces.load_rate = traces::gen_load_rate(derived_seed(cfg.seed, "traffic"), d.n_slots, d.slots_per_day);
  auto pop = traces::gen_charging_population(derived_seed(cfg.seed, "population"), d.population);
  g.traces.charging = std::move(pop.records);
  g.items = std::move(pop.items);
  g.warnings = std::move(pop.warnings);
  g.traces.validate();
  return g;
}

traces::TraceSet test_exogenous(const RunConfig& cfg) {
  const auto& d = cfg.data;
  const long n = cfg.drl.window + cfg.drl.episode_slots;
  traces::TraceSet t;
  t.rtp = traces::gen_rtp(derived_seed(cfg.seed, "test-rtp"), n, d.rtp);
  auto w = traces::gen_weather(derived_seed(cfg.seed, "test-weather"), n, d.weather);
  t.wind_speed = std::move(w.wind_speed);
  t.irradiance = std::move(w.irradiance);
  t.load_rate = traces::gen_load_rate(derived_seed(cfg.seed, "test-traffic"), n, d.slots_per_day);
  return t;
}

PricingModels train_pricing(const RunConfig& cfg, std::span<const traces::ChargingRecord> records) {
  const auto items = pricing::observed_items(records, cfg.data.slots_per_day);
  PricingModels m;
  m.cfmtl = pricing::train_cfmtl(items, cfg.pricing.train);
  m.uplift = pricing::train_uplift_models(items, cfg.pricing.train);
  return m;
}

std::vector<PriceRow> evaluate_pricing(const RunConfig& cfg, const PricingModels& models,
                                       std::span<const traces::ChargingRecord> records,
                                       std::span<const traces::Item> truth) {
  const auto items = pricing::observed_items(records, cfg.data.slots_per_day);
  const auto x = pricing::features_of(items);
  std::vector<traces::Stratum> strata(truth.size());
  std::transform(truth.begin(), truth.end(), strata.begin(), [](const traces::Item& i) { return i.stratum; });

  std::vector<std::vector<double>> scores;
  for (PricingMethod m : {PricingMethod::OR, PricingMethod::IPS, PricingMethod::DR})
    scores.push_back(models.uplift.uplift(uplift_method(m), x));

  std::vector<PriceRow> rows;
  for (double c : cfg.pricing.discounts) {
    const auto cf = pricing::discount_policy(models.cfmtl, x, c);
    const auto k = static_cast<std::size_t>(
        std::count_if(cf.begin(), cf.end(), [](const pricing::DiscountDecision& d) { return d.give_discount; }));
    rows.push_back({to_string(PricingMethod::CfMtl), c, pricing::evaluate_policy(cf, strata, c, cfg.pricing.metric)});
    int b = 0;
    for (PricingMethod m : {PricingMethod::OR, PricingMethod::IPS, PricingMethod::DR}) {
      const auto dec = pricing::top_k_policy(scores[b++], k, c);
      rows.push_back({to_string(m), c, pricing::evaluate_policy(dec, strata, c, cfg.pricing.metric)});
    }
  }
  return rows;
}

std::vector<int> cell_discounts(const RunConfig& cfg, const PricingModels& models, PricingMethod m) {
  const auto x = cell_features(cfg);
  const auto cf = pricing::discount_policy(models.cfmtl, x, cfg.drl.discount);
  std::vector<int> out(x.size(), 0);
  if (m == PricingMethod::CfMtl) {
    for (const auto& d : cf) out[d.item] = d.give_discount ? 1 : 0;
    return out;
  }
  const auto k = static_cast<std::size_t>(
      std::count_if(cf.begin(), cf.end(), [](const pricing::DiscountDecision& d) { return d.give_discount; }));
  const auto scores = models.uplift.uplift(uplift_method(m), x);
  for (const auto& d : pricing::top_k_policy(scores, k, cfg.drl.discount)) out[d.item] = d.give_discount ? 1 : 0;
  return out;
}

sched::HubTraces hub_traces(const RunConfig& cfg, const traces::TraceSet& exo, std::span<const traces::Item> truth,
                            const HubSite& site, std::span<const int> discounted_cells) {
  const int spd = cfg.data.slots_per_day;
  const long n = cfg.drl.window + cfg.drl.episode_slots;
  if (static_cast<long>(exo.rtp.size()) < n)
    throw ValidationError(fmt::format("hub traces need {} slots, have {}", n, exo.rtp.size()));

  // Empirical stratum frequencies of this station per slot of day.
  std::vector<std::array<double, 3>> freq(static_cast<std::size_t>(spd), {0.0, 0.0, 0.0});
  std::vector<double> count(static_cast<std::size_t>(spd), 0.0);
  for (const auto& it : truth) {
    if (it.station_id != site.station_id) continue;
    const auto h = static_cast<std::size_t>(it.slot % spd);
    freq[h][static_cast<int>(it.stratum)] += 1.0;
    count[h] += 1.0;
  }

  sched::HubTraces t;
  for (long i = 0; i < n; ++i) {
    const auto h = static_cast<std::size_t>(i % spd);
    const bool disc = discounted_cells[static_cast<std::size_t>(site.station_id) * spd + h] != 0;
    const double total = count[h] > 0.0 ? count[h] : 1.0;
    const double p_always = freq[h][2] / total;
    const double p_incentive = freq[h][1] / total;
    t.rtp.push_back(exo.rtp[i]);
    t.wind_speed.push_back(exo.wind_speed[i]);
    t.irradiance.push_back(exo.irradiance[i]);
    t.load_rate.push_back(exo.load_rate[i]);
    t.discount.push_back(disc ? cfg.drl.discount : 0.0);
    t.charge_prob.push_back(std::clamp(p_always + (disc ? p_incentive : 0.0), 0.0, 1.0));
  }
  t.validate();
  return t;
}

sched::EnvConfig env_config(const RunConfig& cfg, const HubSite& site) {
  sched::EnvConfig e;
  e.hub = cfg.hub;
  e.hub.wt_capacity = site.wt_capacity;
  e.hub.pv_capacity = site.pv_capacity;
  e.window = cfg.drl.window;
  e.episode_slots = cfg.drl.episode_slots;
  e.slots_per_day = cfg.data.slots_per_day;
  return e;
}

// ---- commands -------------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const CommandOptions& opt) {
  return guarded("gen-data", [&] {
    validate(cfg);
    const fs::path run(opt.run_dir);
    const fs::path d = data_dir(run);
    const std::vector<fs::path> outputs{d / "rtp.csv", d / "weather.csv", d / "traffic.csv", d / "charging.csv",
                                        d / "strata.csv"};
    const GeneratedData g = generate_data(cfg);
    prepare_outputs(outputs, opt.force);
    for (const auto& w : g.warnings) std::cerr << "gen-data: warning: " << w << "\n";
    traces::write_trace_dir(g.traces, d.string());
    traces::write_strata_csv(g.items, (d / "strata.csv").string());
    update_manifest(run, &cfg, "gen-data", outputs);
  });
}

int cmd_train_price(const RunConfig& cfg, const CommandOptions& opt) {
  return guarded("train-price", [&] {
    validate(cfg);
    const fs::path run(opt.run_dir);
    const LoadedData data = load_data(run);
    const fs::path m = models_dir(run);
    const std::vector<fs::path> outputs{m / "cfmtl.ckpt", m / "uplift.ckpt"};
    prepare_outputs(outputs, opt.force);
    const PricingModels models = train_pricing(cfg, data.traces.charging);
    for (const auto& w : models.uplift.warnings) std::cerr << "train-price: warning: " << w << "\n";
    models.cfmtl.save(outputs[0].string());
    models.uplift.save(outputs[1].string());
    update_manifest(run, &cfg, "train-price", outputs);
  });
}

int cmd_eval_price(const RunConfig& cfg, const CommandOptions& opt) {
  return guarded("eval-price", [&] {
    validate(cfg);
    const fs::path run(opt.run_dir);
    const LoadedData data = load_data(run);
    const PricingModels models = load_models(run);
    const fs::path p = pricing_dir(run);
    const std::vector<fs::path> outputs{p / "eval_price.csv", p / "strata_by_period.csv"};
    prepare_outputs(outputs, opt.force);

    const auto rows = evaluate_pricing(cfg, models, data.traces.charging, data.items);
    std::string csv = "method,discount,none_count,incentive_count,always_count,reward\n";
    for (const auto& r : rows)
      csv += fmt::format("{},{},{},{},{},{}\n", r.method, r.discount, r.eval.none_count,
                         r.eval.incentive_count, r.eval.always_count, r.eval.reward);
    write_text(outputs[0], csv);

    const auto x = pricing::features_of(pricing::observed_items(data.traces.charging, cfg.data.slots_per_day));
    const auto shares = pricing::strata_by_period(models.cfmtl, x);
    std::string sp = "period,stratum,share\n";
    for (int per = 0; per < 4; ++per)
      for (int s = 0; s < 3; ++s)
        sp += fmt::format("{},{},{}\n", kPeriodLabels[per], traces::to_string(static_cast<traces::Stratum>(s)),
                          shares[per][s]);
    write_text(outputs[1], sp);
    update_manifest(run, &cfg, "eval-price", outputs);
  });
}

int cmd_train_drl(const RunConfig& cfg, const CommandOptions& opt) {
  return guarded("train-drl", [&] {
    validate(cfg);
    const fs::path run(opt.run_dir);
    const LoadedData data = load_data(run);
    const PricingModels models = load_models(run);
    const fs::path dd = drl_dir(run);
    std::vector<fs::path> outputs;
    for (const auto& site : cfg.drl.hubs)
      for (PricingMethod m : kAllMethods) {
        outputs.push_back(dd / hub_file(site.station_id, m, ".ckpt"));
        outputs.push_back(dd / hub_file(site.station_id, m, "_curve.csv"));
      }
    prepare_outputs(outputs, opt.force);

    for (const auto& site : cfg.drl.hubs) {
      for (PricingMethod m : kAllMethods) {
        const auto cells = cell_discounts(cfg, models, m);
        auto train_traces = hub_traces(cfg, data.traces, data.items, site, cells);
        const auto env_cfg = env_config(cfg, site);
        const auto norm = sched::fit_normalizer(train_traces, env_cfg.hub);
        sched::HubEnv env(env_cfg, std::move(train_traces), norm);
        // Every method of a hub shares initialization and rollout seeds.
        auto ppo = cfg.drl.ppo;
        ppo.seed = derived_seed(cfg.drl.ppo.seed, fmt::format("hub{}", site.station_id));
        Rng init = child_rng(ppo.seed, 1);
        sched::PolicyBundle bundle(sched::observation_dim(env_cfg), ppo, init);
        sched::TrainOptions topt;
        if (ppo.checkpoint_every > 0)
          topt.checkpoint_dir = (dd / hub_file(site.station_id, m, "_checkpoints")).string();
        const auto curve = sched::train(env, bundle, ppo, topt);
        bundle.save((dd / hub_file(site.station_id, m, ".ckpt")).string());
        sched::write_learning_curve(curve, (dd / hub_file(site.station_id, m, "_curve.csv")).string());
      }
    }
    update_manifest(run, &cfg, "train-drl", outputs);
  });
}

int cmd_eval_drl(const RunConfig& cfg, const CommandOptions& opt) {
  return guarded("eval-drl", [&] {
    validate(cfg);
    const fs::path run(opt.run_dir);
    const LoadedData data = load_data(run);
    const PricingModels models = load_models(run);
    const fs::path dd = drl_dir(run);
    for (const auto& site : cfg.drl.hubs)
      for (PricingMethod m : kAllMethods) require_file(dd / hub_file(site.station_id, m, ".ckpt"));
    const std::vector<fs::path> outputs{dd / "eval_drl.csv"};
    prepare_outputs(outputs, opt.force);

    const traces::TraceSet test = test_exogenous(cfg);
    const std::uint64_t test_seed = derived_seed(cfg.seed, "drl-test");
    std::string csv = "hub_id,method,avg_daily_reward\n";
    for (const auto& site : cfg.drl.hubs) {
      for (PricingMethod m : kAllMethods) {
        const auto cells = cell_discounts(cfg, models, m);
        const auto env_cfg = env_config(cfg, site);
        // Observations are standardized with the training-trace statistics.
        const auto norm = sched::fit_normalizer(hub_traces(cfg, data.traces, data.items, site, cells), env_cfg.hub);
        sched::HubEnv env(env_cfg, hub_traces(cfg, test, data.items, site, cells), norm);
        const auto bundle =
            sched::PolicyBundle::load((dd / hub_file(site.station_id, m, ".ckpt")).string(), cfg.drl.ppo);
        const double r = sched::evaluate(env, bundle, cfg.drl.ppo.episodes_test, test_seed, cfg.drl.ppo.mask_infeasible);
        csv += fmt::format("{},{},{}\n", site.station_id, to_string(m), r);
      }
    }
    write_text(outputs[0], csv);
    update_manifest(run, &cfg, "eval-drl", outputs);
  });
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p, const std::string& header) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open " + p.string());
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw ParseError(fmt::format("{}: expected header '{}'", p.string(), header), 1);
  std::vector<std::vector<std::string>> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() != static_cast<std::size_t>(std::count(header.begin(), header.end(), ',') + 1))
      throw ParseError(fmt::format("{}: wrong column count", p.string()), n);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

int cmd_report(const CommandOptions& opt) {
  return guarded("report", [&] {
    const fs::path run(opt.run_dir);
    const fs::path price_csv = pricing_dir(run) / "eval_price.csv";
    const fs::path drl_csv = drl_dir(run) / "eval_drl.csv";
    const bool have_price = fs::is_regular_file(price_csv);
    const bool have_drl = fs::is_regular_file(drl_csv);
    if (!have_price && !have_drl)
      throw ValidationError(fmt::format("{} holds no pricing or DRL results to report", run.string()));

    std::vector<fs::path> outputs;
    if (have_price) outputs.push_back(report_dir(run) / "pricing_long.csv");
    if (have_drl) outputs.push_back(report_dir(run) / "drl_long.csv");
    prepare_outputs(outputs, opt.force);

    if (have_price) {
      const auto rows = read_csv_rows(price_csv, "method,discount,none_count,incentive_count,always_count,reward");
      std::string out = "method,discount,metric,value\n";
      const char* metrics[] = {"none_count", "incentive_count", "always_count", "reward"};
      for (const auto& r : rows)
        for (int k = 0; k < 4; ++k) out += fmt::format("{},{},{},{}\n", r[0], r[1], metrics[k], r[2 + k]);
      write_text(report_dir(run) / "pricing_long.csv", out);
    } else {
      std::cerr << "report: warning: no pricing results; writing the DRL table only\n";
    }

    if (have_drl) {
      const auto rows = read_csv_rows(drl_csv, "hub_id,method,avg_daily_reward");
      std::string out = "hub_id,method,metric,value\n";
      for (const auto& r : rows) {
        out += fmt::format("{},{},avg_daily_reward,{}\n", r[0], r[1], r[2]);
        PricingMethod m = PricingMethod::CfMtl;
        for (PricingMethod c : kAllMethods)
          if (to_string(c) == r[1]) m = c;
        const fs::path curve = drl_dir(run) / hub_file(std::stoi(r[0]), m, "_curve.csv");
        if (!fs::is_regular_file(curve)) continue;
        const auto pts = read_csv_rows(curve, "episode,total_reward,mean_daily_reward");
        const std::size_t tail = std::min<std::size_t>(50, pts.size());
        double sum = 0.0;
        for (std::size_t i = pts.size() - tail; i < pts.size(); ++i) sum += std::stod(pts[i][2]);
        if (tail > 0) out += fmt::format("{},{},train_final_mean_daily_reward,{}\n", r[0], r[1], sum / tail);
      }
      write_text(report_dir(run) / "drl_long.csv", out);
    } else {
      std::cerr << "report: warning: no DRL results; writing the pricing table only\n";
    }
    update_manifest(run, nullptr, "report", outputs);
  });
}

}  // namespace ecthub::cli
