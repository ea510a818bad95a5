#pragma once

// Discount pricing by counterfactual stratification.
//
// Each item (charging station, slot of day) belongs to one of three response
// strata: NoCharge, IncentiveCharge (charges only when discounted) and
// AlwaysCharge. A shared NCF-style representation feeds a 3-way softmax
// stratification head (f00, f01, f11) and a sigmoid propensity head g. Both
// heads are fit jointly from logged (T, Y) pairs by matching the joint
// probabilities each observation cell implies:
//
//   (Y=0, T=1): f00 * g          (Y=1, T=0): f11 * (1 - g)
//   (Y=1, T=1): (f01 + f11) * g  (Y=0, T=0): (f00 + f01) * (1 - g)
//
// plus a propensity term on T. Discounts go only to items whose most likely
// stratum is IncentiveCharge. OR / IPS / DR uplift estimators on the same
// base architecture serve as baselines.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ecthub/neural.hpp"
#include "ecthub/traces.hpp"

namespace ecthub::pricing {

using traces::Stratum;

struct Features {
  int station_id = 0;
  int slot_of_day = 0;
};

struct ObservedItem {
  Features x;
  int t = 0;
  int y = 0;
};

std::vector<ObservedItem> observed_items(std::span<const traces::ChargingRecord> records, int slots_per_day = 24);

// Shape of the shared base: per-feature embeddings, concatenated, then an MLP trunk.
struct BaseShape {
  int n_stations = 12;
  int slots_per_day = 24;
  int embedding_dim = 16;
  std::vector<int> hidden = {64, 32};
};

// Embedding lookup + MLP trunk shared by every pricing network.
class NcfBase {
 public:
  struct Cache {
    std::vector<Features> x;
    nn::DenseNet::Cache trunk;
  };
  struct Grads {
    nn::Matrix station;
    nn::Matrix slot;
    nn::DenseGrads trunk;
    void set_zero();
    nn::ParamList params();
  };

  NcfBase() = default;
  NcfBase(const BaseShape& shape, Rng& rng);

  const BaseShape& shape() const { return shape_; }
  int output_dim() const { return trunk_.output_dim(); }

  nn::Matrix forward(std::span<const Features> x, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const nn::Matrix& grad_out, Grads& grads) const;

  Grads make_grads() const;
  nn::ParamList params();

  void save(nn::Checkpoint& ckpt, const std::string& prefix) const;
  void load(const nn::Checkpoint& ckpt, const std::string& prefix);

 private:
  BaseShape shape_;
  nn::EmbeddingTable station_;
  nn::EmbeddingTable slot_;
  nn::DenseNet trunk_;
};

// ---- stratification model ------------------------------------------------------

struct StratumProbs {
  double p00 = 0.0;  // NoCharge
  double p01 = 0.0;  // IncentiveCharge
  double p11 = 0.0;  // AlwaysCharge

  // Observable conditionals implied by the strata.
  double p_y0_given_t1() const { return p00; }
  double p_y1_given_t0() const { return p11; }
  double p_y1_given_t1() const { return p01 + p11; }
  double p_y0_given_t0() const { return p00 + p01; }
};

// Most likely stratum; exact ties resolve NoCharge, then AlwaysCharge, then IncentiveCharge.
Stratum predicted_stratum(const StratumProbs& p);

class PricingModel {
 public:
  PricingModel() = default;
  PricingModel(const BaseShape& shape, Rng& rng);

  struct Output {
    nn::Matrix strata;      // 3 x B softmax probabilities
    nn::Matrix propensity;  // 1 x B
  };
  struct Cache {
    NcfBase::Cache base;
    nn::Matrix hidden;
    nn::DenseNet::Cache strata_head;
    nn::DenseNet::Cache propensity_head;
  };
  struct Grads {
    NcfBase::Grads base;
    nn::DenseGrads strata_head;
    nn::DenseGrads propensity_head;
    void set_zero();
    nn::ParamList params();
  };

  Output forward(std::span<const Features> x, Cache* cache = nullptr) const;
  // Backpropagates gradients w.r.t. the softmax probabilities and the propensity.
  void backward(const Cache& cache, const Output& out, const nn::Matrix& d_strata, const nn::Matrix& d_propensity,
                Grads& grads) const;

  Grads make_grads() const;
  nn::ParamList params();
  const BaseShape& shape() const { return base_.shape(); }

  void save(const std::string& path) const;
  static PricingModel load(const std::string& path);

 private:
  NcfBase base_;
  nn::DenseNet strata_head_;
  nn::DenseNet propensity_head_;
};

std::vector<StratumProbs> stratum_probs(const PricingModel& model, std::span<const Features> x);

struct CfmtlLoss {
  double l1 = 0.0;  // (Y=0, T=1) cell
  double l2 = 0.0;  // (Y=1, T=0) cell
  double l3 = 0.0;  // (Y=1, T=1) cell
  double l4 = 0.0;  // (Y=0, T=0) cell
  double lp = 0.0;  // propensity
  double total = 0.0;
};

struct CfmtlLossGrad {
  CfmtlLoss loss;
  nn::Matrix d_strata;      // 3 x B
  nn::Matrix d_propensity;  // 1 x B
};

// Loss from head outputs; every term is the batch-mean squared error.
CfmtlLossGrad cfmtl_loss_from_outputs(const nn::Matrix& strata, const nn::Matrix& propensity,
                                      std::span<const ObservedItem> batch);
CfmtlLoss cfmtl_loss(const PricingModel& model, std::span<const ObservedItem> batch);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 1;
  BaseShape shape;
};

struct TrainReport {
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
  std::vector<double> epoch_train_loss;
};

// Throws TrainingError when either treatment arm is absent.
PricingModel train_cfmtl(std::span<const ObservedItem> items, const TrainConfig& cfg, TrainReport* report = nullptr);

// ---- decisions and evaluation --------------------------------------------------------

struct DiscountDecision {
  std::size_t item = 0;
  bool give_discount = false;
  double discount_rate = 0.0;
};

std::vector<DiscountDecision> discount_policy(const PricingModel& model, std::span<const Features> x, double c);

enum class RewardMetric {
  // Discounted Incentive earns 1-c; Always earns 1, less c if discounted; NoCharge earns 0.
  Coherent,
  // Always earns 1; discounted Incentive earns -c; NoCharge earns 0.
  Literal,
};

struct PolicyEvaluation {
  long none_count = 0;       // true NoCharge among discounted items
  long incentive_count = 0;  // true IncentiveCharge among discounted items
  long always_count = 0;     // true AlwaysCharge among discounted items
  double reward = 0.0;
};

PolicyEvaluation evaluate_policy(std::span<const DiscountDecision> decisions, std::span<const Stratum> truth, double c,
                                 RewardMetric metric = RewardMetric::Coherent);

// Discount the k highest-scoring items (ties keep item order).
std::vector<DiscountDecision> top_k_policy(std::span<const double> scores, std::size_t k, double c);

// Share of items per predicted stratum, per period of day (00-06, 06-12, 12-18, 18-24).
using PeriodShares = std::array<std::array<double, 3>, 4>;
PeriodShares strata_by_period(const PricingModel& model, std::span<const Features> x);

// ---- uplift baselines -----------------------------------------------------------------

// NCF base with a single-output head. Sigmoid heads are fit by log-likelihood,
// identity heads by MSE.
class NcfRegressor {
 public:
  NcfRegressor() = default;
  NcfRegressor(const BaseShape& shape, nn::Activation head, Rng& rng);

  std::vector<double> predict(std::span<const Features> x) const;
  void fit(std::span<const Features> x, std::span<const double> target, const TrainConfig& cfg);

  void save(nn::Checkpoint& ckpt, const std::string& prefix) const;
  void load(const nn::Checkpoint& ckpt, const std::string& prefix);
  nn::Activation head_activation() const { return head_.layer(0).act; }

 private:
  NcfBase base_;
  nn::DenseNet head_;
};

double clip_propensity(double g);

// Pseudo-outcomes whose regression on X yields the uplift estimate.
double ips_pseudo_outcome(int t, int y, double g);
double dr_pseudo_outcome(int t, int y, double g, double mu1, double mu0);

enum class UpliftMethod { OR, IPS, DR };
std::string to_string(UpliftMethod m);

struct UpliftModels {
  NcfRegressor mu1;         // P(Y=1 | T=1, X)
  NcfRegressor mu0;         // P(Y=1 | T=0, X)
  NcfRegressor propensity;  // P(T=1 | X)
  NcfRegressor ips;         // regression of IPS pseudo-outcomes
  NcfRegressor dr;          // regression of DR pseudo-outcomes
  BaseShape shape_hint;
  std::vector<std::string> warnings;

  std::vector<double> uplift(UpliftMethod m, std::span<const Features> x) const;
  void save(const std::string& path) const;
  static UpliftModels load(const std::string& path);
};

UpliftModels train_uplift_models(std::span<const ObservedItem> items, const TrainConfig& cfg);

// Per-item uplift scores from the individual estimators.
std::vector<double> or_estimator(const UpliftModels& m, std::span<const Features> x);
std::vector<double> ips_estimator(const UpliftModels& m, std::span<const Features> x);
std::vector<double> dr_estimator(const UpliftModels& m, std::span<const Features> x);

// Trains an NCF rating model on Y and labels items by the median split.
std::vector<Stratum> label_with_ncf(std::span<const traces::ChargingRecord> records, const TrainConfig& cfg);

std::vector<Features> features_of(std::span<const ObservedItem> items);

}  // namespace ecthub::pricing
