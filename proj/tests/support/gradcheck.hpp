#pragma once

// Central finite-difference checks shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ecthub/neural.hpp"
#include "ecthub/pricing.hpp"
#include "ecthub/random.hpp"
#include "ecthub/scheduler.hpp"

namespace gradcheck {

using ecthub::Rng;
namespace nn = ecthub::nn;

// Norm-wise relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-10) {
  double diff = 0.0, na = 0.0, nn_ = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn_ += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn_), floor});
}

inline std::vector<double> flatten(const nn::ParamList& list) {
  std::vector<double> out;
  for (const auto& s : list) out.insert(out.end(), s.begin(), s.end());
  return out;
}

// Central differences of `loss` over every entry of `params`.
inline std::vector<double> numeric(const nn::ParamList& params, const std::function<double()>& loss, double h = 1e-5) {
  std::vector<double> out;
  for (const auto& s : params) {
    for (double& v : s) {
      const double keep = v;
      v = keep + h;
      const double up = loss();
      v = keep - h;
      const double down = loss();
      v = keep;
      out.push_back((up - down) / (2.0 * h));
    }
  }
  return out;
}

struct Outcome {
  std::string name;
  double error = 0.0;
};

inline nn::Activation random_activation(Rng& rng, bool smooth_only) {
  static const nn::Activation all[] = {nn::Activation::Identity, nn::Activation::Tanh, nn::Activation::Sigmoid,
                                       nn::Activation::Relu};
  return all[ecthub::uniform_int(rng, 0, smooth_only ? 2 : 3)];
}

// Random dense net with a random loss; checks parameter and input gradients together.
inline Outcome dense_config(std::uint64_t seed) {
  Rng rng = ecthub::child_rng(seed, 0x4743);
  const int depth = ecthub::uniform_int(rng, 1, 3);
  std::vector<int> dims{ecthub::uniform_int(rng, 1, 6)};
  std::vector<nn::Activation> acts;
  for (int i = 0; i < depth; ++i) {
    dims.push_back(ecthub::uniform_int(rng, 1, 6));
    acts.push_back(random_activation(rng, false));
  }
  const int loss_kind = ecthub::uniform_int(rng, 0, 2);
  if (loss_kind == 2) dims.back() = std::max(dims.back(), 2);
  nn::DenseNet net(dims, acts, rng);
  const int batch = ecthub::uniform_int(rng, 1, 5);
  nn::Matrix x(dims.front(), batch);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = ecthub::normal(rng);
  nn::Matrix target(dims.back(), batch);
  std::vector<int> labels(batch);
  for (Eigen::Index i = 0; i < target.size(); ++i)
    target.data()[i] = loss_kind == 1 ? (ecthub::bernoulli(rng, 0.5) ? 1.0 : 0.0) : ecthub::normal(rng);
  for (auto& l : labels) l = ecthub::uniform_int(rng, 0, dims.back() - 1);

  auto eval = [&](const nn::Matrix& out) {
    switch (loss_kind) {
      case 0: return nn::mse(out, target);
      case 1: return nn::bce_with_logits(out, target);
      default: return nn::categorical_nll(out, labels);
    }
  };
  nn::DenseNet::Cache cache;
  const nn::Matrix out = net.forward(x, &cache);
  auto grads = net.make_grads();
  const nn::Matrix dx = net.backward(cache, eval(out).grad, grads);

  std::vector<double> analytic = flatten(grads.params());
  analytic.insert(analytic.end(), dx.data(), dx.data() + dx.size());
  auto loss = [&] { return eval(net.forward(x)).value; };
  std::vector<double> num = numeric(net.params(), loss);
  const auto num_x = numeric({std::span<double>(x.data(), static_cast<std::size_t>(x.size()))}, loss);
  num.insert(num.end(), num_x.begin(), num_x.end());
  static const char* loss_names[] = {"mse", "bce", "nll"};
  return {std::string("dense/") + loss_names[loss_kind], relative_error(analytic, num)};
}

// Pricing model (embeddings, trunk, both heads) under the factored strata loss.
inline Outcome pricing_config(std::uint64_t seed) {
  Rng rng = ecthub::child_rng(seed, 0x5052);
  ecthub::pricing::BaseShape shape;
  shape.n_stations = ecthub::uniform_int(rng, 1, 4);
  shape.slots_per_day = ecthub::uniform_int(rng, 2, 6);
  shape.embedding_dim = ecthub::uniform_int(rng, 1, 4);
  shape.hidden = {ecthub::uniform_int(rng, 2, 6), ecthub::uniform_int(rng, 2, 5)};
  ecthub::pricing::PricingModel model(shape, rng);
  std::vector<ecthub::pricing::ObservedItem> batch(ecthub::uniform_int(rng, 1, 8));
  for (auto& it : batch) {
    it.x = {ecthub::uniform_int(rng, 0, shape.n_stations - 1), ecthub::uniform_int(rng, 0, shape.slots_per_day - 1)};
    it.t = ecthub::bernoulli(rng, 0.5);
    it.y = ecthub::bernoulli(rng, 0.5);
  }
  const auto feats = ecthub::pricing::features_of(batch);
  ecthub::pricing::PricingModel::Cache cache;
  const auto out = model.forward(feats, &cache);
  const auto lg = ecthub::pricing::cfmtl_loss_from_outputs(out.strata, out.propensity, batch);
  auto grads = model.make_grads();
  grads.set_zero();
  model.backward(cache, out, lg.d_strata, lg.d_propensity, grads);
  const auto analytic = flatten(grads.params());
  const auto num = numeric(model.params(), [&] { return ecthub::pricing::cfmtl_loss(model, batch).total; });
  return {"pricing/cfmtl", relative_error(analytic, num)};
}

// Actor-critic bundle under the full PPO objective, with masks and an entropy bonus.
inline Outcome ppo_config(std::uint64_t seed) {
  namespace sched = ecthub::sched;
  Rng rng = ecthub::child_rng(seed, 0x5050);
  sched::PpoConfig cfg;
  cfg.hidden = {ecthub::uniform_int(rng, 2, 6), ecthub::uniform_int(rng, 2, 6)};
  cfg.entropy_coef = ecthub::bernoulli(rng, 0.5) ? ecthub::uniform(rng, 0.0, 0.1) : 0.0;
  cfg.value_coef = ecthub::uniform(rng, 0.1, 1.0);
  cfg.mask_infeasible = ecthub::bernoulli(rng, 0.5);
  const int dim = ecthub::uniform_int(rng, 1, 6);
  sched::PolicyBundle bundle(dim, cfg, rng);

  const int n = ecthub::uniform_int(rng, 2, 8);
  sched::PpoBatch batch;
  batch.obs.resize(dim, n);
  for (Eigen::Index i = 0; i < batch.obs.size(); ++i) batch.obs.data()[i] = ecthub::normal(rng);
  for (int b = 0; b < n; ++b) {
    std::array<bool, sched::kNumActions> mask{true, true, true};
    if (cfg.mask_infeasible) mask[ecthub::uniform_int(rng, 0, 1)] = ecthub::bernoulli(rng, 0.5);
    int a = ecthub::uniform_int(rng, 0, 2);
    while (!mask[a]) a = ecthub::uniform_int(rng, 0, 2);
    const auto p = bundle.action_probs(batch.obs.col(b), mask);
    batch.actions.push_back(a);
    // Old log-probs spread around the current ones so both clip branches occur.
    batch.old_log_prob.push_back(std::log(p[a]) + ecthub::uniform(rng, -0.5, 0.5));
    batch.advantages.push_back(ecthub::normal(rng));
    batch.targets.push_back(ecthub::normal(rng));
    if (cfg.mask_infeasible) batch.masks.push_back(mask);
  }
  auto grads = bundle.make_grads();
  grads.set_zero();
  sched::total_loss(bundle, batch, cfg, &grads);
  const auto analytic = flatten(grads.params());
  const auto num = numeric(bundle.params(), [&] { return sched::total_loss(bundle, batch, cfg).objective; });
  return {"ppo/objective", relative_error(analytic, num)};
}

// Every configuration family in turn: dense, pricing, ppo, dense, ...
inline std::vector<Outcome> run(int count, std::uint64_t seed0 = 1) {
  std::vector<Outcome> out;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seed0 + static_cast<std::uint64_t>(i);
    switch (i % 3) {
      case 0: out.push_back(dense_config(s)); break;
      case 1: out.push_back(pricing_config(s)); break;
      default: out.push_back(ppo_config(s)); break;
    }
  }
  return out;
}

}  // namespace gradcheck
