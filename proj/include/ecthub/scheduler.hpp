#pragma once

// Battery scheduling for one hub: the hub as an episodic environment, a PPO
// actor-critic over a shared fully connected trunk, and a backward-induction
// oracle on a discretized state-of-charge lattice.
//
// Action encoding: 0 = charge, 1 = discharge, 2 = idle.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ecthub/hub.hpp"
#include "ecthub/neural.hpp"
#include "ecthub/random.hpp"

namespace ecthub::sched {

inline constexpr int kCharge = 0;
inline constexpr int kDischarge = 1;
inline constexpr int kIdle = 2;
inline constexpr int kNumActions = 3;

hub::BatteryAction to_battery_action(int action);
int from_battery_action(hub::BatteryAction a);

// Exogenous per-slot series for one hub. `charge_prob` is the probability that
// the charging station is occupied in the slot; `discount` is the discount rate
// offered there (the sell price is base_sell_price * (1 - discount)).
struct HubTraces {
  std::vector<double> rtp;
  std::vector<double> wind_speed;
  std::vector<double> irradiance;
  std::vector<double> load_rate;
  std::vector<double> discount;
  std::vector<double> charge_prob;

  std::size_t size() const { return rtp.size(); }
  // Throws ValidationError on unequal lengths or out-of-range values.
  void validate() const;
};

struct EnvConfig {
  hub::HubConfig hub;
  int window = 24;  // history slots in each window, in addition to the current slot
  long episode_slots = 30 * 24;
  int slots_per_day = 24;
  // When false every episode starts at `initial_soc` instead of a uniform draw.
  bool random_initial_soc = true;
  double initial_soc = 10.0;
};

// Raw windows end at the current slot (oldest first). soc is a fraction of capacity.
struct EnvState {
  std::vector<double> rtp_window;
  std::vector<double> wind_window;
  std::vector<double> irradiance_window;
  std::vector<double> traffic_window;
  std::vector<double> srtp_window;
  double soc = 0.0;
  long slot = 0;  // trace index of the current slot
};

// Per-channel standardization (rtp, wind, irradiance, traffic, srtp).
struct Normalizer {
  std::array<double, 5> mean{0, 0, 0, 0, 0};
  std::array<double, 5> stddev{1, 1, 1, 1, 1};
};

// Channels with zero spread keep unit scale.
Normalizer fit_normalizer(const HubTraces& traces, const hub::HubConfig& cfg);

int observation_dim(const EnvConfig& cfg);
nn::Vector observation(const EnvState& state, const Normalizer& norm);

struct StepResult {
  double reward = 0.0;
  bool done = false;
  int applied_action = kIdle;  // after the infeasible-to-idle remap
  hub::SlotOutcome outcome;
};

class HubEnv {
 public:
  // Throws DomainError when the traces are shorter than window + episode.
  HubEnv(EnvConfig cfg, HubTraces traces, Normalizer norm);

  const EnvConfig& config() const { return cfg_; }
  const HubTraces& traces() const { return traces_; }
  const Normalizer& normalizer() const { return norm_; }

  // Starts an episode at trace index `window`. Occupancy draws and the initial
  // SoC come from `seed` alone, so equal seeds give equal episodes.
  const EnvState& reset(std::uint64_t seed);
  // Infeasible actions are applied as idle. Throws DomainError for an action
  // outside {0,1,2} or a step after the episode ended.
  StepResult step(int action);

  const EnvState& state() const { return state_; }
  nn::Vector observation() const { return sched::observation(state_, norm_); }
  double soc_kwh() const { return battery_.soc; }
  // Actions whose battery move stays inside the SoC bounds.
  std::array<bool, kNumActions> feasible() const;
  long days_per_episode() const { return cfg_.episode_slots / cfg_.slots_per_day; }

 private:
  void fill_state();
  hub::SlotInputs inputs_at(long slot, int cs_active) const;

  EnvConfig cfg_;
  HubTraces traces_;
  Normalizer norm_;
  EnvState state_;
  hub::BatteryState battery_;
  Rng rng_;
  long t_ = 0;
  bool done_ = true;
};

// Hub inputs of trace slot `slot` with a given charging occupancy.
hub::SlotInputs slot_inputs(const hub::HubConfig& cfg, const HubTraces& traces, long slot, int cs_active);

// ---- advantages and the PPO objective -------------------------------------------

struct Transition {
  nn::Vector obs;
  int action = kIdle;
  double reward = 0.0;
  bool done = false;
  double old_log_prob = 0.0;
  double value = 0.0;
  std::array<bool, kNumActions> mask{true, true, true};
};

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> targets;  // un-normalized advantages + values
};

// GAE(gamma, lambda). `last_value` bootstraps the slot after the final
// transition unless it is terminal. With `normalize` the advantages are
// standardized to zero mean and unit variance (targets are not).
Advantages compute_advantages(const std::vector<Transition>& trajectory, double last_value, double gamma,
                              double lambda, bool normalize = true);

// min(r * A, clip(r, 1 - eps, 1 + eps) * A) with r = exp(new - old).
double ppo_clip_term(double new_log_prob, double old_log_prob, double advantage, double eps);

struct PpoConfig {
  double clip_eps = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  double gamma = 0.99;
  double lambda = 0.95;
  int epochs = 4;
  int minibatch = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int episodes_train = 500;
  int episodes_test = 100;
  // Multiplies rewards before advantages and value targets are formed; the learning curve stays in money.
  double reward_scale = 1.0;
  std::vector<int> hidden = {64, 64};
  // Masks infeasible actions in the policy head instead of remapping them.
  bool mask_infeasible = false;
  int checkpoint_every = 0;  // episodes; 0 disables
  std::uint64_t seed = 1;
};

// Throws ConfigError on out-of-range hyperparameters.
void validate(const PpoConfig& cfg);

class PolicyBundle {
 public:
  PolicyBundle() = default;
  PolicyBundle(int obs_dim, const PpoConfig& cfg, Rng& rng);

  struct Output {
    nn::Matrix logits;  // 3 x B
    nn::Matrix values;  // 1 x B
  };
  struct Cache {
    nn::DenseNet::Cache trunk;
    nn::DenseNet::Cache actor;
    nn::DenseNet::Cache critic;
  };
  struct Grads {
    nn::DenseGrads trunk;
    nn::DenseGrads actor;
    nn::DenseGrads critic;
    void set_zero();
    nn::ParamList params();
  };

  Output forward(const nn::Matrix& obs, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const nn::Matrix& d_logits, const nn::Matrix& d_values, Grads& grads) const;

  // Action distribution for one observation; masked actions get probability 0.
  std::array<double, kNumActions> action_probs(const nn::Vector& obs,
                                               const std::array<bool, kNumActions>& mask = {true, true, true}) const;
  double value(const nn::Vector& obs) const;

  Grads make_grads() const;
  nn::ParamList params();
  int obs_dim() const { return trunk_.input_dim(); }
  nn::Adam& optimizer() { return adam_; }

  void save(const std::string& path) const;
  // Restores weights into a bundle of matching shape; optimizer state starts fresh.
  static PolicyBundle load(const std::string& path, const PpoConfig& cfg);

 private:
  nn::DenseNet trunk_;
  nn::DenseNet actor_;
  nn::DenseNet critic_;
  nn::Adam adam_;
};

struct PpoBatch {
  nn::Matrix obs;  // obs_dim x B
  std::vector<int> actions;
  std::vector<double> old_log_prob;
  std::vector<double> advantages;
  std::vector<double> targets;
  std::vector<std::array<bool, kNumActions>> masks;  // empty means all feasible
};

struct PpoLoss {
  double objective = 0.0;  // clip - value_coef * value_mse + entropy_coef * entropy
  double clip = 0.0;
  double value_mse = 0.0;
  double entropy = 0.0;
};

// Objective to be ascended. When `grads` is given it receives d objective / d params (accumulated).
PpoLoss total_loss(const PolicyBundle& bundle, const PpoBatch& batch, const PpoConfig& cfg,
                   PolicyBundle::Grads* grads = nullptr);

// One Adam ascent step on the batch. A non-finite loss, gradient or resulting
// parameter leaves the bundle as it was and returns false.
bool ppo_update(PolicyBundle& bundle, const PpoBatch& batch, const PpoConfig& cfg);

// ---- training and evaluation ---------------------------------------------------------

struct EpisodeRecord {
  int episode = 0;
  double total_reward = 0.0;
  double mean_daily_reward = 0.0;
};

struct TrainOptions {
  std::string checkpoint_dir;  // empty disables checkpoints
};

// Trains in place; throws TrainingError after 3 consecutive aborted updates.
std::vector<EpisodeRecord> train(HubEnv& env, PolicyBundle& bundle, const PpoConfig& cfg,
                                 const TrainOptions& opt = {});

using Policy = std::function<int(const HubEnv& env)>;

Policy greedy_policy(const PolicyBundle& bundle, bool mask_infeasible = false);
Policy constant_policy(int action);

// Total reward over `episodes` episodes (seeds seed, seed+1, ...) divided by
// episodes * days per episode.
double evaluate(HubEnv& env, const Policy& policy, int episodes, std::uint64_t seed);
double evaluate(HubEnv& env, const PolicyBundle& bundle, int episodes, std::uint64_t seed,
                bool mask_infeasible = false);

void write_learning_curve(const std::vector<EpisodeRecord>& curve, const std::string& path);

// ---- oracle ------------------------------------------------------------------------------

struct DpResult {
  double profit = 0.0;
  std::vector<int> actions;
};

// Profit-maximizing action sequence over the lattice soc_min + i * resolution,
// with full knowledge of the inputs. Throws ConfigError when a battery move or
// the initial SoC is not a whole number of lattice cells.
DpResult dp_oracle(const hub::HubConfig& cfg, const std::vector<hub::SlotInputs>& inputs, double initial_soc,
                   double resolution);

// Profit of an action sequence with the infeasible-to-idle remap, summed in slot order.
double replay_profit(const hub::HubConfig& cfg, const std::vector<hub::SlotInputs>& inputs, double initial_soc,
                     const std::vector<int>& actions);

}  // namespace ecthub::sched
