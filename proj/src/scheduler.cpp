#include "ecthub/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "ecthub/errors.hpp"
#include "ecthub/traces.hpp"

namespace ecthub::sched {

namespace {

constexpr double kLatticeSlack = 1e-9;
constexpr int kMaxConsecutiveAborts = 3;

void require_range(const std::vector<double>& v, double lo, double hi, const char* name) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]) || v[i] < lo || v[i] > hi)
      throw ValidationError(fmt::format("{}[{}]={} outside [{}, {}]", name, i, v[i], lo, hi));
}

double sell_price(const hub::HubConfig& cfg, double discount) { return cfg.base_sell_price * (1.0 - discount); }

// Log-probabilities of a 3 x B logit block with masked entries at -inf.
nn::Matrix masked_log_softmax(const nn::Matrix& logits, const std::vector<std::array<bool, kNumActions>>& masks) {
  if (masks.empty()) return nn::log_softmax(logits);
  nn::Matrix out(logits.rows(), logits.cols());
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    double m = ninf;
    for (int a = 0; a < kNumActions; ++a)
      if (masks[b][a]) m = std::max(m, logits(a, b));
    double z = 0.0;
    for (int a = 0; a < kNumActions; ++a)
      if (masks[b][a]) z += std::exp(logits(a, b) - m);
    const double lse = m + std::log(z);
    for (int a = 0; a < kNumActions; ++a) out(a, b) = masks[b][a] ? logits(a, b) - lse : ninf;
  }
  return out;
}

int sample_action(const std::array<double, kNumActions>& p, Rng& rng) {
  const double u = uniform(rng);
  double acc = 0.0;
  for (int a = 0; a < kNumActions; ++a) {
    acc += p[a];
    if (u < acc && p[a] > 0.0) return a;
  }
  for (int a = kNumActions - 1; a >= 0; --a)
    if (p[a] > 0.0) return a;
  return kIdle;
}

void push_window(std::vector<double>& w, const std::vector<double>& src, long end, int window) {
  w.assign(src.begin() + (end - window), src.begin() + end + 1);
}

}  // namespace

hub::BatteryAction to_battery_action(int action) {
  switch (action) {
    case kCharge: return hub::BatteryAction::Charge;
    case kDischarge: return hub::BatteryAction::Discharge;
    case kIdle: return hub::BatteryAction::Idle;
  }
  throw DomainError(fmt::format("action {} is not one of 0 (charge), 1 (discharge), 2 (idle)", action));
}

int from_battery_action(hub::BatteryAction a) {
  switch (a) {
    case hub::BatteryAction::Charge: return kCharge;
    case hub::BatteryAction::Discharge: return kDischarge;
    case hub::BatteryAction::Idle: return kIdle;
  }
  return kIdle;
}

void HubTraces::validate() const {
  const std::size_t n = rtp.size();
  const auto check_len = [n](const std::vector<double>& v, const char* name) {
    if (v.size() != n) throw ValidationError(fmt::format("{} has {} slots, rtp has {}", name, v.size(), n));
  };
  check_len(wind_speed, "wind_speed");
  check_len(irradiance, "irradiance");
  check_len(load_rate, "load_rate");
  check_len(discount, "discount");
  check_len(charge_prob, "charge_prob");
  const double inf = std::numeric_limits<double>::infinity();
  require_range(rtp, 0.0, inf, "rtp");
  require_range(wind_speed, 0.0, inf, "wind_speed");
  require_range(irradiance, 0.0, inf, "irradiance");
  require_range(load_rate, 0.0, 1.0, "load_rate");
  require_range(discount, 0.0, 1.0, "discount");
  require_range(charge_prob, 0.0, 1.0, "charge_prob");
}

Normalizer fit_normalizer(const HubTraces& traces, const hub::HubConfig& cfg) {
  Normalizer n;
  std::vector<double> srtp(traces.size());
  for (std::size_t i = 0; i < srtp.size(); ++i) srtp[i] = sell_price(cfg, traces.discount[i]);
  const std::array<const std::vector<double>*, 5> ch{&traces.rtp, &traces.wind_speed, &traces.irradiance,
                                                     &traces.load_rate, &srtp};
  for (std::size_t c = 0; c < ch.size(); ++c) {
    const auto& v = *ch[c];
    if (v.empty()) continue;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    n.mean[c] = mean;
    n.stddev[c] = sd > 1e-12 ? sd : 1.0;
  }
  return n;
}

int observation_dim(const EnvConfig& cfg) { return 5 * (cfg.window + 1) + 1; }

nn::Vector observation(const EnvState& s, const Normalizer& norm) {
  const std::array<const std::vector<double>*, 5> ch{&s.rtp_window, &s.wind_window, &s.irradiance_window,
                                                     &s.traffic_window, &s.srtp_window};
  const std::size_t w = s.rtp_window.size();
  nn::Vector obs(static_cast<Eigen::Index>(5 * w + 1));
  Eigen::Index k = 0;
  for (std::size_t c = 0; c < ch.size(); ++c)
    for (double x : *ch[c]) obs(k++) = (x - norm.mean[c]) / norm.stddev[c];
  obs(k) = s.soc;
  return obs;
}

hub::SlotInputs slot_inputs(const hub::HubConfig& cfg, const HubTraces& traces, long slot, int cs_active) {
  hub::SlotInputs in;
  const auto i = static_cast<std::size_t>(slot);
  in.load_rate = traces.load_rate[i];
  in.cs_active = cs_active;
  in.p_wt = traces::wt_power(traces.wind_speed[i], cfg.wt_capacity);
  in.p_pv = traces::pv_power(traces.irradiance[i], cfg.pv_capacity);
  in.rtp = traces.rtp[i];
  in.srtp = sell_price(cfg, traces.discount[i]);
  return in;
}

HubEnv::HubEnv(EnvConfig cfg, HubTraces traces, Normalizer norm)
    : cfg_(std::move(cfg)), traces_(std::move(traces)), norm_(norm) {
  hub::validate(cfg_.hub);
  traces_.validate();
  if (cfg_.window < 0 || cfg_.episode_slots <= 0 || cfg_.slots_per_day <= 0)
    throw DomainError("env: window must be >= 0 and episode length and slots per day positive");
  const long need = cfg_.window + cfg_.episode_slots;
  if (static_cast<long>(traces_.size()) < need)
    throw DomainError(fmt::format("env: traces have {} slots, an episode needs {} (window {} + episode {})",
                                  traces_.size(), need, cfg_.window, cfg_.episode_slots));
  const auto& b = cfg_.hub.battery;
  if (!cfg_.random_initial_soc && (cfg_.initial_soc < b.soc_min || cfg_.initial_soc > b.soc_max))
    throw DomainError(fmt::format("env: initial_soc={} outside [{}, {}]", cfg_.initial_soc, b.soc_min, b.soc_max));
}

const EnvState& HubEnv::reset(std::uint64_t seed) {
  rng_ = child_rng(seed, 0x454E56);
  const auto& b = cfg_.hub.battery;
  const double u = uniform(rng_);
  battery_.soc = cfg_.random_initial_soc ? std::clamp(b.soc_min + u * (b.soc_max - b.soc_min), b.soc_min, b.soc_max)
                                         : cfg_.initial_soc;
  t_ = 0;
  done_ = false;
  fill_state();
  return state_;
}

void HubEnv::fill_state() {
  const long slot = cfg_.window + t_;
  state_.slot = slot;
  push_window(state_.rtp_window, traces_.rtp, slot, cfg_.window);
  push_window(state_.wind_window, traces_.wind_speed, slot, cfg_.window);
  push_window(state_.irradiance_window, traces_.irradiance, slot, cfg_.window);
  push_window(state_.traffic_window, traces_.load_rate, slot, cfg_.window);
  state_.srtp_window.resize(static_cast<std::size_t>(cfg_.window) + 1);
  for (int k = 0; k <= cfg_.window; ++k)
    state_.srtp_window[k] = sell_price(cfg_.hub, traces_.discount[static_cast<std::size_t>(slot - cfg_.window + k)]);
  state_.soc = battery_.soc / cfg_.hub.battery.capacity;
}

std::array<bool, kNumActions> HubEnv::feasible() const {
  const auto set = hub::feasible_actions(battery_, cfg_.hub.battery, cfg_.hub.slot_hours);
  return {set.contains(hub::BatteryAction::Charge), set.contains(hub::BatteryAction::Discharge), true};
}

StepResult HubEnv::step(int action) {
  if (done_) throw DomainError("env: step after the episode ended; call reset first");
  auto ba = to_battery_action(action);
  const auto set = hub::feasible_actions(battery_, cfg_.hub.battery, cfg_.hub.slot_hours);
  if (!set.contains(ba)) ba = hub::BatteryAction::Idle;

  const long slot = cfg_.window + t_;
  const int cs_active = uniform(rng_) < traces_.charge_prob[static_cast<std::size_t>(slot)] ? 1 : 0;
  StepResult r;
  r.outcome = hub::step(cfg_.hub, battery_, slot_inputs(cfg_.hub, traces_, slot, cs_active), ba);
  r.reward = r.outcome.profit;
  r.applied_action = from_battery_action(ba);
  battery_.soc = r.outcome.soc_after;
  ++t_;
  r.done = t_ >= cfg_.episode_slots;
  done_ = r.done;
  if (!done_) fill_state();
  else state_.soc = battery_.soc / cfg_.hub.battery.capacity;
  return r;
}

// ---- advantages ---------------------------------------------------------------------

Advantages compute_advantages(const std::vector<Transition>& traj, double last_value, double gamma, double lambda,
                              bool normalize) {
  const std::size_t n = traj.size();
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.targets.assign(n, 0.0);
  double gae = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double next_value = k + 1 < n ? traj[k + 1].value : last_value;
    const double live = traj[k].done ? 0.0 : 1.0;
    const double delta = traj[k].reward + gamma * next_value * live - traj[k].value;
    gae = delta + gamma * lambda * live * gae;
    out.advantages[k] = gae;
    out.targets[k] = gae + traj[k].value;
  }
  if (normalize && n > 0) {
    const double mean = std::accumulate(out.advantages.begin(), out.advantages.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double a : out.advantages) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (double& a : out.advantages) a = sd > 1e-12 ? (a - mean) / sd : 0.0;
  }
  return out;
}

double ppo_clip_term(double new_log_prob, double old_log_prob, double advantage, double eps) {
  const double r = std::exp(new_log_prob - old_log_prob);
  return std::min(r * advantage, std::clamp(r, 1.0 - eps, 1.0 + eps) * advantage);
}

void validate(const PpoConfig& c) {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("ppo: " + what);
  };
  require(c.clip_eps > 0.0 && c.clip_eps < 1.0, fmt::format("clip_eps={} must lie in (0, 1)", c.clip_eps));
  require(c.gamma > 0.0 && c.gamma <= 1.0, fmt::format("gamma={} must lie in (0, 1]", c.gamma));
  require(c.lambda >= 0.0 && c.lambda <= 1.0, fmt::format("lambda={} must lie in [0, 1]", c.lambda));
  require(c.value_coef >= 0.0, "value_coef must be >= 0");
  require(c.entropy_coef >= 0.0, "entropy_coef must be >= 0");
  require(c.epochs >= 1, "epochs must be >= 1");
  require(c.minibatch >= 1, "minibatch must be >= 1");
  require(c.learning_rate > 0.0, "learning_rate must be > 0");
  require(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(c.episodes_train >= 1, "episodes_train must be >= 1");
  require(c.episodes_test >= 1, "episodes_test must be >= 1");
  require(c.reward_scale > 0.0, "reward_scale must be > 0");
  require(!c.hidden.empty(), "hidden must name at least one layer");
  for (int h : c.hidden) require(h >= 1, "hidden layer widths must be >= 1");
  require(c.checkpoint_every >= 0, "checkpoint_every must be >= 0");
}

// ---- policy bundle ---------------------------------------------------------------------

void PolicyBundle::Grads::set_zero() {
  trunk.set_zero();
  actor.set_zero();
  critic.set_zero();
}

nn::ParamList PolicyBundle::Grads::params() {
  nn::ParamList out = trunk.params();
  for (auto p : actor.params()) out.push_back(p);
  for (auto p : critic.params()) out.push_back(p);
  return out;
}

PolicyBundle::PolicyBundle(int obs_dim, const PpoConfig& cfg, Rng& rng) {
  validate(cfg);
  std::vector<int> dims{obs_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  trunk_ = nn::DenseNet(dims, std::vector<nn::Activation>(cfg.hidden.size(), nn::Activation::Tanh), rng);
  actor_ = nn::DenseNet({cfg.hidden.back(), kNumActions}, {nn::Activation::Identity}, rng);
  critic_ = nn::DenseNet({cfg.hidden.back(), 1}, {nn::Activation::Identity}, rng);
  adam_ = nn::Adam(nn::AdamConfig{cfg.learning_rate, cfg.weight_decay});
}

PolicyBundle::Output PolicyBundle::forward(const nn::Matrix& obs, Cache* cache) const {
  const nn::Matrix h = trunk_.forward(obs, cache ? &cache->trunk : nullptr);
  return {actor_.forward(h, cache ? &cache->actor : nullptr), critic_.forward(h, cache ? &cache->critic : nullptr)};
}

void PolicyBundle::backward(const Cache& cache, const nn::Matrix& d_logits, const nn::Matrix& d_values,
                            Grads& grads) const {
  nn::Matrix dh = actor_.backward(cache.actor, d_logits, grads.actor);
  dh += critic_.backward(cache.critic, d_values, grads.critic);
  trunk_.backward(cache.trunk, dh, grads.trunk);
}

std::array<double, kNumActions> PolicyBundle::action_probs(const nn::Vector& obs,
                                                           const std::array<bool, kNumActions>& mask) const {
  const nn::Matrix lp = masked_log_softmax(forward(nn::Matrix(obs)).logits, {mask});
  std::array<double, kNumActions> p{};
  for (int a = 0; a < kNumActions; ++a) p[a] = std::exp(lp(a, 0));
  return p;
}

double PolicyBundle::value(const nn::Vector& obs) const { return forward(nn::Matrix(obs)).values(0, 0); }

PolicyBundle::Grads PolicyBundle::make_grads() const {
  return {trunk_.make_grads(), actor_.make_grads(), critic_.make_grads()};
}

nn::ParamList PolicyBundle::params() {
  nn::ParamList out = trunk_.params();
  for (auto p : actor_.params()) out.push_back(p);
  for (auto p : critic_.params()) out.push_back(p);
  return out;
}

void PolicyBundle::save(const std::string& path) const {
  nn::Checkpoint ckpt;
  ckpt.meta["kind"] = "ppo_policy";
  nn::add_dense_net(ckpt, "trunk", trunk_);
  nn::add_dense_net(ckpt, "actor", actor_);
  nn::add_dense_net(ckpt, "critic", critic_);
  nn::save_checkpoint(ckpt, path);
}

PolicyBundle PolicyBundle::load(const std::string& path, const PpoConfig& cfg) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  // The input width comes from the file; every other shape from cfg.
  const int obs_dim = nn::read_dense_net(ckpt, "trunk").input_dim();
  Rng rng = child_rng(0, 0);
  PolicyBundle b(obs_dim, cfg, rng);
  nn::load_dense_net_into(ckpt, "trunk", b.trunk_);
  nn::load_dense_net_into(ckpt, "actor", b.actor_);
  nn::load_dense_net_into(ckpt, "critic", b.critic_);
  return b;
}

// ---- objective --------------------------------------------------------------------------

PpoLoss total_loss(const PolicyBundle& bundle, const PpoBatch& batch, const PpoConfig& cfg,
                   PolicyBundle::Grads* grads) {
  const auto n = static_cast<Eigen::Index>(batch.actions.size());
  if (n == 0) throw DomainError("total_loss: empty batch");
  if (batch.obs.cols() != n || static_cast<Eigen::Index>(batch.old_log_prob.size()) != n ||
      static_cast<Eigen::Index>(batch.advantages.size()) != n || static_cast<Eigen::Index>(batch.targets.size()) != n ||
      (!batch.masks.empty() && static_cast<Eigen::Index>(batch.masks.size()) != n))
    throw ShapeError("total_loss: batch fields have different lengths");

  PolicyBundle::Cache cache;
  const auto out = bundle.forward(batch.obs, grads ? &cache : nullptr);
  const nn::Matrix logp = masked_log_softmax(out.logits, batch.masks);
  const double inv_n = 1.0 / static_cast<double>(n);

  PpoLoss loss;
  nn::Matrix d_logits = nn::Matrix::Zero(kNumActions, n);
  nn::Matrix d_values = nn::Matrix::Zero(1, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const int a = batch.actions[b];
    const double adv = batch.advantages[b];
    const double r = std::exp(logp(a, b) - batch.old_log_prob[b]);
    const double unclipped = r * adv;
    const double clipped = std::clamp(r, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
    loss.clip += std::min(unclipped, clipped) * inv_n;
    // The min follows the unclipped branch, or the clipped one whose slope in r vanishes outside the band.
    const bool unclipped_active = unclipped <= clipped;
    const double d_logp = unclipped_active ? unclipped * inv_n : 0.0;

    double h = 0.0;
    for (int k = 0; k < kNumActions; ++k) {
      const double p = std::exp(logp(k, b));
      if (p > 0.0) h -= p * logp(k, b);
    }
    loss.entropy += h * inv_n;

    const double err = out.values(0, b) - batch.targets[b];
    loss.value_mse += err * err * inv_n;

    if (grads) {
      for (int k = 0; k < kNumActions; ++k) {
        const double p = std::exp(logp(k, b));
        // d logp_a / d z_k = 1[k=a] - p_k ; d H / d z_k = -p_k (log p_k + H)
        double g = d_logp * ((k == a ? 1.0 : 0.0) - p);
        if (p > 0.0) g += cfg.entropy_coef * inv_n * (-p * (logp(k, b) + h));
        d_logits(k, b) = g;
      }
      d_values(0, b) = -cfg.value_coef * 2.0 * err * inv_n;
    }
  }
  loss.objective = loss.clip - cfg.value_coef * loss.value_mse + cfg.entropy_coef * loss.entropy;
  if (grads) bundle.backward(cache, d_logits, d_values, *grads);
  return loss;
}

bool ppo_update(PolicyBundle& bundle, const PpoBatch& batch, const PpoConfig& cfg) {
  auto grads = bundle.make_grads();
  grads.set_zero();
  const PpoLoss loss = total_loss(bundle, batch, cfg, &grads);
  if (!std::isfinite(loss.objective)) return false;
  auto gp = grads.params();
  for (auto& g : gp)
    for (double& v : g) v = -v;  // ascent through a minimizing optimizer
  const PolicyBundle backup = bundle;
  try {
    bundle.optimizer().step(bundle.params(), gp);
  } catch (const TrainingError&) {
    bundle = backup;
    return false;
  }
  if (!nn::all_finite(bundle.params())) {
    bundle = backup;
    return false;
  }
  return true;
}

// ---- training and evaluation -----------------------------------------------------------

namespace {

std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t stream) { return child_rng(seed, stream)(); }

std::vector<Transition> rollout(HubEnv& env, const PolicyBundle& bundle, const PpoConfig& cfg, std::uint64_t seed,
                                Rng& rng, double* total_reward) {
  env.reset(seed);
  std::vector<Transition> traj;
  traj.reserve(static_cast<std::size_t>(env.config().episode_slots));
  *total_reward = 0.0;
  for (;;) {
    Transition tr;
    tr.obs = env.observation();
    if (cfg.mask_infeasible) tr.mask = env.feasible();
    const nn::Matrix obs(tr.obs);
    const auto out = bundle.forward(obs);
    const nn::Matrix lp = masked_log_softmax(out.logits, {tr.mask});
    std::array<double, kNumActions> p{};
    for (int a = 0; a < kNumActions; ++a) p[a] = std::exp(lp(a, 0));
    tr.action = sample_action(p, rng);
    tr.old_log_prob = lp(tr.action, 0);
    tr.value = out.values(0, 0);
    const StepResult r = env.step(tr.action);
    tr.reward = r.reward;
    tr.done = r.done;
    *total_reward += r.reward;
    traj.push_back(std::move(tr));
    if (r.done) break;
  }
  return traj;
}

}  // namespace

std::vector<EpisodeRecord> train(HubEnv& env, PolicyBundle& bundle, const PpoConfig& cfg, const TrainOptions& opt) {
  validate(cfg);
  if (bundle.obs_dim() != observation_dim(env.config()))
    throw ShapeError(fmt::format("train: policy expects {} inputs, the environment yields {}", bundle.obs_dim(),
                                 observation_dim(env.config())));
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  Rng rng = child_rng(cfg.seed, 0x505030);
  const double days = static_cast<double>(env.days_per_episode());
  std::vector<EpisodeRecord> curve;
  curve.reserve(static_cast<std::size_t>(cfg.episodes_train));
  int consecutive_aborts = 0;

  for (int ep = 0; ep < cfg.episodes_train; ++ep) {
    double total = 0.0;
    const auto traj = rollout(env, bundle, cfg, episode_seed(cfg.seed, static_cast<std::uint64_t>(ep)), rng, &total);
    curve.push_back({ep + 1, total, days > 0 ? total / days : total});

    auto scaled = traj;
    for (auto& tr : scaled) tr.reward *= cfg.reward_scale;
    const Advantages adv = compute_advantages(scaled, 0.0, cfg.gamma, cfg.lambda, true);
    std::vector<std::size_t> order(traj.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch));
        PpoBatch batch;
        batch.obs.resize(bundle.obs_dim(), static_cast<Eigen::Index>(end - start));
        for (std::size_t j = start; j < end; ++j) {
          const auto& tr = traj[order[j]];
          batch.obs.col(static_cast<Eigen::Index>(j - start)) = tr.obs;
          batch.actions.push_back(tr.action);
          batch.old_log_prob.push_back(tr.old_log_prob);
          batch.advantages.push_back(adv.advantages[order[j]]);
          batch.targets.push_back(adv.targets[order[j]]);
          if (cfg.mask_infeasible) batch.masks.push_back(tr.mask);
        }
        if (ppo_update(bundle, batch, cfg)) {
          consecutive_aborts = 0;
        } else if (++consecutive_aborts >= kMaxConsecutiveAborts) {
          throw TrainingError(fmt::format("ppo: {} consecutive updates aborted on non-finite values (episode {})",
                                          consecutive_aborts, ep + 1));
        }
      }
    }
    if (!opt.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (ep + 1) % cfg.checkpoint_every == 0)
      bundle.save((std::filesystem::path(opt.checkpoint_dir) / fmt::format("policy_ep{:05d}.ckpt", ep + 1)).string());
  }
  return curve;
}

Policy greedy_policy(const PolicyBundle& bundle, bool mask_infeasible) {
  return [&bundle, mask_infeasible](const HubEnv& env) {
    const auto mask = mask_infeasible ? env.feasible() : std::array<bool, kNumActions>{true, true, true};
    const auto p = bundle.action_probs(env.observation(), mask);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  };
}

Policy constant_policy(int action) {
  to_battery_action(action);
  return [action](const HubEnv&) { return action; };
}

double evaluate(HubEnv& env, const Policy& policy, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw DomainError("evaluate: episodes must be >= 1");
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    env.reset(seed + static_cast<std::uint64_t>(e));
    for (;;) {
      const StepResult r = env.step(policy(env));
      total += r.reward;
      if (r.done) break;
    }
  }
  const double days = static_cast<double>(env.days_per_episode());
  return total / (static_cast<double>(episodes) * (days > 0 ? days : 1.0));
}

double evaluate(HubEnv& env, const PolicyBundle& bundle, int episodes, std::uint64_t seed, bool mask_infeasible) {
  return evaluate(env, greedy_policy(bundle, mask_infeasible), episodes, seed);
}

void write_learning_curve(const std::vector<EpisodeRecord>& curve, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DomainError("cannot write " + path);
  out << "episode,total_reward,mean_daily_reward\n";
  for (const auto& r : curve) out << fmt::format("{},{},{}\n", r.episode, r.total_reward, r.mean_daily_reward);
}

// ---- oracle -------------------------------------------------------------------------------

double replay_profit(const hub::HubConfig& cfg, const std::vector<hub::SlotInputs>& inputs, double initial_soc,
                     const std::vector<int>& actions) {
  if (actions.size() != inputs.size()) throw DomainError("replay_profit: one action per slot required");
  hub::BatteryState s{initial_soc};
  double profit = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto a = to_battery_action(actions[t]);
    if (!hub::feasible_actions(s, cfg.battery, cfg.slot_hours).contains(a)) a = hub::BatteryAction::Idle;
    const auto o = hub::step(cfg, s, inputs[t], a);
    profit += o.profit;
    s.soc = o.soc_after;
  }
  return profit;
}

DpResult dp_oracle(const hub::HubConfig& cfg, const std::vector<hub::SlotInputs>& inputs, double initial_soc,
                   double resolution) {
  hub::validate(cfg);
  const auto& b = cfg.battery;
  if (!(resolution > 0.0)) throw ConfigError("dp_oracle: resolution must be > 0");
  const auto cells = [&](double amount, const char* what) {
    const double k = amount / resolution;
    const double r = std::round(k);
    if (std::abs(k - r) > kLatticeSlack * std::max(1.0, k))
      throw ConfigError(fmt::format("dp_oracle: {}={} is not a whole number of {}-wide SoC cells", what, amount,
                                    resolution));
    return static_cast<long>(r);
  };
  const long up = cells(b.eta_ch * b.r_ch * cfg.slot_hours, "charge step");
  const long down = cells(b.r_dch * cfg.slot_hours, "discharge step");
  const long start = cells(initial_soc - b.soc_min, "initial SoC offset");
  const long n = static_cast<long>(std::floor((b.soc_max - b.soc_min) / resolution + kLatticeSlack)) + 1;
  if (start < 0 || start >= n) throw ConfigError(fmt::format("dp_oracle: initial SoC {} outside the lattice", initial_soc));

  const std::size_t T = inputs.size();
  const auto soc_at = [&](long i) { return b.soc_min + static_cast<double>(i) * resolution; };
  // value[t][i]: best profit from slot t onward at lattice point i.
  std::vector<std::vector<double>> value(T + 1, std::vector<double>(static_cast<std::size_t>(n), 0.0));
  std::vector<std::vector<int>> choice(T, std::vector<int>(static_cast<std::size_t>(n), kIdle));
  for (std::size_t t = T; t-- > 0;) {
    for (long i = 0; i < n; ++i) {
      const hub::BatteryState s{soc_at(i)};
      const auto feas = hub::feasible_actions(s, b, cfg.slot_hours);
      double best = -std::numeric_limits<double>::infinity();
      int best_a = kIdle;
      for (int a : {kIdle, kCharge, kDischarge}) {
        const auto ba = to_battery_action(a);
        if (!feas.contains(ba)) continue;
        const long j = i + (a == kCharge ? up : a == kDischarge ? -down : 0);
        if (j < 0 || j >= n) continue;
        const double v = hub::step(cfg, s, inputs[t], ba).profit + value[t + 1][static_cast<std::size_t>(j)];
        if (v > best) {
          best = v;
          best_a = a;
        }
      }
      value[t][static_cast<std::size_t>(i)] = best;
      choice[t][static_cast<std::size_t>(i)] = best_a;
    }
  }

  DpResult res;
  long i = start;
  for (std::size_t t = 0; t < T; ++t) {
    const int a = choice[t][static_cast<std::size_t>(i)];
    res.actions.push_back(a);
    i += a == kCharge ? up : a == kDischarge ? -down : 0;
  }
  res.profit = replay_profit(cfg, inputs, initial_soc, res.actions);
  return res;
}

}  // namespace ecthub::sched
