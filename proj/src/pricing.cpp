#include "ecthub/pricing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "ecthub/errors.hpp"

namespace ecthub::pricing {

namespace {

constexpr double kPropensityLo = 0.01;
constexpr double kPropensityHi = 0.99;

std::string hidden_to_string(const std::vector<int>& hidden) {
  std::string s;
  for (std::size_t i = 0; i < hidden.size(); ++i) s += (i ? "x" : "") + std::to_string(hidden[i]);
  return s;
}

std::vector<int> hidden_from_string(const std::string& s) {
  std::vector<int> out;
  std::size_t start = 0;
  while (start < s.size()) {
    const auto end = s.find('x', start);
    out.push_back(std::stoi(s.substr(start, end - start)));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

void put_shape(nn::Checkpoint& ckpt, const BaseShape& shape) {
  ckpt.meta["shape.n_stations"] = std::to_string(shape.n_stations);
  ckpt.meta["shape.slots_per_day"] = std::to_string(shape.slots_per_day);
  ckpt.meta["shape.embedding_dim"] = std::to_string(shape.embedding_dim);
  ckpt.meta["shape.hidden"] = hidden_to_string(shape.hidden);
}

BaseShape get_shape(const nn::Checkpoint& ckpt) {
  auto get = [&](const std::string& k) {
    auto it = ckpt.meta.find(k);
    if (it == ckpt.meta.end()) throw ShapeError("checkpoint is missing " + k);
    return it->second;
  };
  BaseShape s;
  s.n_stations = std::stoi(get("shape.n_stations"));
  s.slots_per_day = std::stoi(get("shape.slots_per_day"));
  s.embedding_dim = std::stoi(get("shape.embedding_dim"));
  s.hidden = hidden_from_string(get("shape.hidden"));
  return s;
}

nn::ParamList concat(nn::ParamList a, const nn::ParamList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Splits [0, n) into a shuffled train part and a held-out tail.
void split_indices(std::size_t n, double holdout_fraction, Rng& rng, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& holdout) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(n)));
  holdout.assign(idx.end() - static_cast<std::ptrdiff_t>(n_hold), idx.end());
  train.assign(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_hold));
}

template <typename T>
std::vector<T> gather(std::span<const T> src, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(src[i]);
  return out;
}

}  // namespace

std::vector<ObservedItem> observed_items(std::span<const traces::ChargingRecord> records, int slots_per_day) {
  std::vector<ObservedItem> out;
  out.reserve(records.size());
  for (const auto& r : records)
    out.push_back({{r.station_id, static_cast<int>(r.slot % slots_per_day)}, r.discount_given, r.charged});
  return out;
}

std::vector<Features> features_of(std::span<const ObservedItem> items) {
  std::vector<Features> x;
  x.reserve(items.size());
  for (const auto& it : items) x.push_back(it.x);
  return x;
}

// ---- NcfBase ------------------------------------------------------------------------

void NcfBase::Grads::set_zero() {
  station.setZero();
  slot.setZero();
  trunk.set_zero();
}

nn::ParamList NcfBase::Grads::params() {
  nn::ParamList p{{station.data(), static_cast<std::size_t>(station.size())},
                  {slot.data(), static_cast<std::size_t>(slot.size())}};
  return concat(std::move(p), trunk.params());
}

NcfBase::NcfBase(const BaseShape& shape, Rng& rng)
    : shape_(shape),
      station_(shape.n_stations, shape.embedding_dim, rng),
      slot_(shape.slots_per_day, shape.embedding_dim, rng) {
  std::vector<int> dims{2 * shape.embedding_dim};
  dims.insert(dims.end(), shape.hidden.begin(), shape.hidden.end());
  trunk_ = nn::DenseNet(dims, std::vector<nn::Activation>(shape.hidden.size(), nn::Activation::Relu), rng);
}

nn::Matrix NcfBase::forward(std::span<const Features> x, Cache* cache) const {
  const int d = shape_.embedding_dim;
  nn::Matrix in(2 * d, static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    in.col(c).head(d) = station_.lookup(x[i].station_id);
    in.col(c).tail(d) = slot_.lookup(x[i].slot_of_day);
  }
  if (cache) cache->x.assign(x.begin(), x.end());
  return trunk_.forward(in, cache ? &cache->trunk : nullptr);
}

void NcfBase::backward(const Cache& cache, const nn::Matrix& grad_out, Grads& grads) const {
  const nn::Matrix d_in = trunk_.backward(cache.trunk, grad_out, grads.trunk);
  const int d = shape_.embedding_dim;
  for (std::size_t i = 0; i < cache.x.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    station_.accumulate(cache.x[i].station_id, d_in.col(c).head(d), grads.station);
    slot_.accumulate(cache.x[i].slot_of_day, d_in.col(c).tail(d), grads.slot);
  }
}

NcfBase::Grads NcfBase::make_grads() const { return {station_.make_grad(), slot_.make_grad(), trunk_.make_grads()}; }

nn::ParamList NcfBase::params() {
  nn::ParamList p{station_.params(), slot_.params()};
  return concat(std::move(p), trunk_.params());
}

void NcfBase::save(nn::Checkpoint& ckpt, const std::string& prefix) const {
  nn::add_embedding(ckpt, prefix + ".station_embedding", station_);
  nn::add_embedding(ckpt, prefix + ".slot_embedding", slot_);
  nn::add_dense_net(ckpt, prefix + ".trunk", trunk_);
}

void NcfBase::load(const nn::Checkpoint& ckpt, const std::string& prefix) {
  nn::load_embedding_into(ckpt, prefix + ".station_embedding", station_);
  nn::load_embedding_into(ckpt, prefix + ".slot_embedding", slot_);
  nn::load_dense_net_into(ckpt, prefix + ".trunk", trunk_);
}

// ---- PricingModel ---------------------------------------------------------------------

Stratum predicted_stratum(const StratumProbs& p) {
  if (p.p01 > p.p00 && p.p01 > p.p11) return Stratum::IncentiveCharge;
  return p.p11 > p.p00 ? Stratum::AlwaysCharge : Stratum::NoCharge;
}

void PricingModel::Grads::set_zero() {
  base.set_zero();
  strata_head.set_zero();
  propensity_head.set_zero();
}

nn::ParamList PricingModel::Grads::params() {
  return concat(concat(base.params(), strata_head.params()), propensity_head.params());
}

PricingModel::PricingModel(const BaseShape& shape, Rng& rng) : base_(shape, rng) {
  const int h = base_.output_dim();
  strata_head_ = nn::DenseNet({h, 3}, {nn::Activation::Identity}, rng);
  propensity_head_ = nn::DenseNet({h, 1}, {nn::Activation::Sigmoid}, rng);
}

PricingModel::Output PricingModel::forward(std::span<const Features> x, Cache* cache) const {
  nn::Matrix hidden = base_.forward(x, cache ? &cache->base : nullptr);
  Output out;
  out.strata = nn::softmax(strata_head_.forward(hidden, cache ? &cache->strata_head : nullptr));
  out.propensity = propensity_head_.forward(hidden, cache ? &cache->propensity_head : nullptr);
  if (cache) cache->hidden = std::move(hidden);
  return out;
}

void PricingModel::backward(const Cache& cache, const Output& out, const nn::Matrix& d_strata,
                            const nn::Matrix& d_propensity, Grads& grads) const {
  // Softmax Jacobian-vector product: dz = p * (dp - <p, dp>).
  nn::Matrix d_logits(d_strata.rows(), d_strata.cols());
  for (Eigen::Index c = 0; c < d_strata.cols(); ++c) {
    const double dot = out.strata.col(c).dot(d_strata.col(c));
    d_logits.col(c) = out.strata.col(c).cwiseProduct(d_strata.col(c).array().matrix() -
                                                     nn::Vector::Constant(d_strata.rows(), dot));
  }
  nn::Matrix d_hidden = strata_head_.backward(cache.strata_head, d_logits, grads.strata_head);
  d_hidden += propensity_head_.backward(cache.propensity_head, d_propensity, grads.propensity_head);
  base_.backward(cache.base, d_hidden, grads.base);
}

PricingModel::Grads PricingModel::make_grads() const {
  return {base_.make_grads(), strata_head_.make_grads(), propensity_head_.make_grads()};
}

nn::ParamList PricingModel::params() {
  return concat(concat(base_.params(), strata_head_.params()), propensity_head_.params());
}

void PricingModel::save(const std::string& path) const {
  nn::Checkpoint ckpt;
  ckpt.meta["model"] = "cfmtl";
  put_shape(ckpt, base_.shape());
  base_.save(ckpt, "base");
  nn::add_dense_net(ckpt, "strata_head", strata_head_);
  nn::add_dense_net(ckpt, "propensity_head", propensity_head_);
  nn::save_checkpoint(ckpt, path);
}

PricingModel PricingModel::load(const std::string& path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  Rng scratch(0);
  PricingModel m(get_shape(ckpt), scratch);
  m.base_.load(ckpt, "base");
  nn::load_dense_net_into(ckpt, "strata_head", m.strata_head_);
  nn::load_dense_net_into(ckpt, "propensity_head", m.propensity_head_);
  return m;
}

std::vector<StratumProbs> stratum_probs(const PricingModel& model, std::span<const Features> x) {
  const auto out = model.forward(x);
  std::vector<StratumProbs> probs(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    probs[i] = {out.strata(0, c), out.strata(1, c), out.strata(2, c)};
  }
  return probs;
}

// ---- loss ---------------------------------------------------------------------------------

CfmtlLossGrad cfmtl_loss_from_outputs(const nn::Matrix& strata, const nn::Matrix& propensity,
                                      std::span<const ObservedItem> batch) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (n == 0) throw DomainError("cfmtl_loss on an empty batch");
  if (strata.rows() != 3 || strata.cols() != n || propensity.rows() != 1 || propensity.cols() != n)
    throw ShapeError("cfmtl_loss: head outputs do not match the batch");

  CfmtlLossGrad r;
  r.d_strata = nn::Matrix::Zero(3, n);
  r.d_propensity = nn::Matrix::Zero(1, n);
  const double inv = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& it = batch[static_cast<std::size_t>(i)];
    const double f00 = strata(0, i), f01 = strata(1, i), f11 = strata(2, i);
    const double g = propensity(0, i);
    const double e1 = f00 * g - ((it.y == 0 && it.t == 1) ? 1.0 : 0.0);
    const double e2 = f11 * (1.0 - g) - ((it.y == 1 && it.t == 0) ? 1.0 : 0.0);
    const double e3 = (f01 + f11) * g - ((it.y == 1 && it.t == 1) ? 1.0 : 0.0);
    const double e4 = (f00 + f01) * (1.0 - g) - ((it.y == 0 && it.t == 0) ? 1.0 : 0.0);
    const double ep = g - (it.t == 1 ? 1.0 : 0.0);
    r.loss.l1 += e1 * e1;
    r.loss.l2 += e2 * e2;
    r.loss.l3 += e3 * e3;
    r.loss.l4 += e4 * e4;
    r.loss.lp += ep * ep;

    const double k = 2.0 * inv;
    r.d_strata(0, i) = k * (e1 * g + e4 * (1.0 - g));
    r.d_strata(1, i) = k * (e3 * g + e4 * (1.0 - g));
    r.d_strata(2, i) = k * (e2 * (1.0 - g) + e3 * g);
    r.d_propensity(0, i) = k * (e1 * f00 - e2 * f11 + e3 * (f01 + f11) - e4 * (f00 + f01) + ep);
  }
  r.loss.l1 *= inv;
  r.loss.l2 *= inv;
  r.loss.l3 *= inv;
  r.loss.l4 *= inv;
  r.loss.lp *= inv;
  r.loss.total = r.loss.l1 + r.loss.l2 + r.loss.l3 + r.loss.l4 + r.loss.lp;
  return r;
}

CfmtlLoss cfmtl_loss(const PricingModel& model, std::span<const ObservedItem> batch) {
  const auto x = features_of(batch);
  const auto out = model.forward(x);
  return cfmtl_loss_from_outputs(out.strata, out.propensity, batch).loss;
}

PricingModel train_cfmtl(std::span<const ObservedItem> items, const TrainConfig& cfg, TrainReport* report) {
  bool treated = false, control = false;
  for (const auto& it : items) (it.t ? treated : control) = true;
  if (!treated || !control)
    throw TrainingError("train_cfmtl needs both discounted and undiscounted items; strata are unidentifiable");
  if (cfg.batch_size <= 0 || cfg.epochs < 0) throw ConfigError("train_cfmtl: bad batch size or epoch count");

  Rng init = child_rng(cfg.seed, 11);
  Rng shuffle = child_rng(cfg.seed, 12);
  PricingModel model(cfg.shape, init);
  std::vector<std::size_t> train_idx, hold_idx;
  split_indices(items.size(), cfg.holdout_fraction, shuffle, train_idx, hold_idx);
  const auto holdout = gather(items, std::span<const std::size_t>(hold_idx));

  TrainReport rep;
  if (!holdout.empty()) rep.initial_holdout_loss = cfmtl_loss(model, holdout).total;

  nn::Adam adam({cfg.learning_rate, cfg.weight_decay});
  auto grads = model.make_grads();
  PricingModel::Cache cache;
  std::vector<ObservedItem> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(train_idx.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t k = start; k < end; ++k) batch.push_back(items[train_idx[k]]);
      const auto x = features_of(batch);
      const auto out = model.forward(x, &cache);
      const auto lg = cfmtl_loss_from_outputs(out.strata, out.propensity, batch);
      grads.set_zero();
      model.backward(cache, out, lg.d_strata, lg.d_propensity, grads);
      adam.step(model.params(), grads.params());
      epoch_loss += lg.loss.total;
      ++n_batches;
    }
    rep.epoch_train_loss.push_back(n_batches ? epoch_loss / static_cast<double>(n_batches) : 0.0);
  }
  if (!holdout.empty()) rep.final_holdout_loss = cfmtl_loss(model, holdout).total;
  if (report) *report = std::move(rep);
  return model;
}

// ---- decisions and evaluation ---------------------------------------------------------------

std::vector<DiscountDecision> discount_policy(const PricingModel& model, std::span<const Features> x, double c) {
  const auto probs = stratum_probs(model, x);
  std::vector<DiscountDecision> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool give = predicted_stratum(probs[i]) == Stratum::IncentiveCharge;
    out[i] = {i, give, give ? c : 0.0};
  }
  return out;
}

PolicyEvaluation evaluate_policy(std::span<const DiscountDecision> decisions, std::span<const Stratum> truth, double c,
                                 RewardMetric metric) {
  if (decisions.size() != truth.size())
    throw DomainError(fmt::format("evaluate_policy: {} decisions for {} items", decisions.size(), truth.size()));
  PolicyEvaluation ev;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (decisions[i].item != i) throw DomainError("evaluate_policy: decisions must cover items in order");
    const Stratum s = truth[i];
    const bool disc = decisions[i].give_discount;
    if (disc) {
      switch (s) {
        case Stratum::NoCharge: ++ev.none_count; break;
        case Stratum::IncentiveCharge: ++ev.incentive_count; break;
        case Stratum::AlwaysCharge: ++ev.always_count; break;
      }
    }
    if (metric == RewardMetric::Coherent) {
      if (s == Stratum::AlwaysCharge) ev.reward += disc ? 1.0 - c : 1.0;
      if (s == Stratum::IncentiveCharge && disc) ev.reward += 1.0 - c;
    } else {
      if (s == Stratum::AlwaysCharge) ev.reward += 1.0;
      if (s == Stratum::IncentiveCharge && disc) ev.reward -= c;
    }
  }
  return ev;
}

std::vector<DiscountDecision> top_k_policy(std::span<const double> scores, std::size_t k, double c) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<DiscountDecision> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {i, false, 0.0};
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r) out[order[r]] = {order[r], true, c};
  return out;
}

PeriodShares strata_by_period(const PricingModel& model, std::span<const Features> x) {
  const auto probs = stratum_probs(model, x);
  const int spd = model.shape().slots_per_day;
  std::array<std::array<double, 3>, 4> counts{};
  std::array<double, 4> totals{};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int p = traces::period_of(x[i].slot_of_day, spd);
    counts[p][static_cast<int>(predicted_stratum(probs[i]))] += 1.0;
    totals[p] += 1.0;
  }
  PeriodShares shares{};
  for (int p = 0; p < 4; ++p)
    for (int s = 0; s < 3; ++s) shares[p][s] = totals[p] > 0 ? counts[p][s] / totals[p] : 0.0;
  return shares;
}

// ---- NcfRegressor ------------------------------------------------------------------------------

NcfRegressor::NcfRegressor(const BaseShape& shape, nn::Activation head, Rng& rng) : base_(shape, rng) {
  if (head != nn::Activation::Sigmoid && head != nn::Activation::Identity)
    throw ConfigError("NcfRegressor head must be sigmoid or identity");
  head_ = nn::DenseNet({base_.output_dim(), 1}, {head}, rng);
}

std::vector<double> NcfRegressor::predict(std::span<const Features> x) const {
  const nn::Matrix out = head_.forward(base_.forward(x));
  return {out.data(), out.data() + out.size()};
}

void NcfRegressor::fit(std::span<const Features> x, std::span<const double> target, const TrainConfig& cfg) {
  if (x.size() != target.size()) throw ShapeError("NcfRegressor::fit: targets must align with features");
  if (x.empty()) throw TrainingError("NcfRegressor::fit on an empty set");
  const bool logistic = head_activation() == nn::Activation::Sigmoid;

  // Sigmoid heads train on logits, so evaluate the head linearly here.
  nn::DenseNet linear_head = head_;
  linear_head.layer(0).act = nn::Activation::Identity;

  Rng shuffle = child_rng(cfg.seed, 21);
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  nn::Adam adam({cfg.learning_rate, cfg.weight_decay});
  auto base_grads = base_.make_grads();
  auto head_grads = linear_head.make_grads();
  NcfBase::Cache base_cache;
  nn::DenseNet::Cache head_cache;
  std::vector<Features> bx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), shuffle);
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
      bx.clear();
      nn::Matrix y(1, static_cast<Eigen::Index>(end - start));
      for (std::size_t k = start; k < end; ++k) {
        bx.push_back(x[idx[k]]);
        y(0, static_cast<Eigen::Index>(k - start)) = target[idx[k]];
      }
      const nn::Matrix h = base_.forward(bx, &base_cache);
      const nn::Matrix z = linear_head.forward(h, &head_cache);
      const auto loss = logistic ? nn::bce_with_logits(z, y) : nn::mse(z, y);
      base_grads.set_zero();
      head_grads.set_zero();
      const nn::Matrix dh = linear_head.backward(head_cache, loss.grad, head_grads);
      base_.backward(base_cache, dh, base_grads);
      adam.step(concat(base_.params(), linear_head.params()), concat(base_grads.params(), head_grads.params()));
    }
  }
  head_.layer(0).weight = linear_head.layer(0).weight;
  head_.layer(0).bias = linear_head.layer(0).bias;
}

void NcfRegressor::save(nn::Checkpoint& ckpt, const std::string& prefix) const {
  base_.save(ckpt, prefix + ".base");
  nn::add_dense_net(ckpt, prefix + ".head", head_);
}

void NcfRegressor::load(const nn::Checkpoint& ckpt, const std::string& prefix) {
  base_.load(ckpt, prefix + ".base");
  nn::load_dense_net_into(ckpt, prefix + ".head", head_);
}

double clip_propensity(double g) { return std::clamp(g, kPropensityLo, kPropensityHi); }

double ips_pseudo_outcome(int t, int y, double g) {
  return t ? y / g : -static_cast<double>(y) / (1.0 - g);
}

double dr_pseudo_outcome(int t, int y, double g, double mu1, double mu0) {
  const double correction = t ? (y - mu1) / g : -(y - mu0) / (1.0 - g);
  return mu1 - mu0 + correction;
}

std::string to_string(UpliftMethod m) {
  switch (m) {
    case UpliftMethod::OR: return "OR";
    case UpliftMethod::IPS: return "IPS";
    case UpliftMethod::DR: return "DR";
  }
  return "OR";
}

std::vector<double> UpliftModels::uplift(UpliftMethod m, std::span<const Features> x) const {
  switch (m) {
    case UpliftMethod::OR: {
      auto a = mu1.predict(x);
      const auto b = mu0.predict(x);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
      return a;
    }
    case UpliftMethod::IPS: return ips.predict(x);
    case UpliftMethod::DR: return dr.predict(x);
  }
  return {};
}

std::vector<double> or_estimator(const UpliftModels& m, std::span<const Features> x) {
  return m.uplift(UpliftMethod::OR, x);
}
std::vector<double> ips_estimator(const UpliftModels& m, std::span<const Features> x) {
  return m.uplift(UpliftMethod::IPS, x);
}
std::vector<double> dr_estimator(const UpliftModels& m, std::span<const Features> x) {
  return m.uplift(UpliftMethod::DR, x);
}

void UpliftModels::save(const std::string& path) const {
  nn::Checkpoint ckpt;
  ckpt.meta["model"] = "uplift";
  put_shape(ckpt, shape_hint);
  mu1.save(ckpt, "mu1");
  mu0.save(ckpt, "mu0");
  propensity.save(ckpt, "propensity");
  ips.save(ckpt, "ips");
  dr.save(ckpt, "dr");
  nn::save_checkpoint(ckpt, path);
}

UpliftModels UpliftModels::load(const std::string& path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  const BaseShape shape = get_shape(ckpt);
  Rng scratch(0);
  UpliftModels m;
  m.shape_hint = shape;
  m.mu1 = NcfRegressor(shape, nn::Activation::Sigmoid, scratch);
  m.mu0 = NcfRegressor(shape, nn::Activation::Sigmoid, scratch);
  m.propensity = NcfRegressor(shape, nn::Activation::Sigmoid, scratch);
  m.ips = NcfRegressor(shape, nn::Activation::Identity, scratch);
  m.dr = NcfRegressor(shape, nn::Activation::Identity, scratch);
  m.mu1.load(ckpt, "mu1");
  m.mu0.load(ckpt, "mu0");
  m.propensity.load(ckpt, "propensity");
  m.ips.load(ckpt, "ips");
  m.dr.load(ckpt, "dr");
  return m;
}

UpliftModels train_uplift_models(std::span<const ObservedItem> items, const TrainConfig& cfg) {
  std::vector<Features> x_all, x_t1, x_t0;
  std::vector<double> t_all, y_t1, y_t0;
  for (const auto& it : items) {
    x_all.push_back(it.x);
    t_all.push_back(it.t);
    (it.t ? x_t1 : x_t0).push_back(it.x);
    (it.t ? y_t1 : y_t0).push_back(it.y);
  }
  if (x_t1.empty() || x_t0.empty()) throw TrainingError("uplift baselines need both treatment arms");

  UpliftModels m;
  m.shape_hint = cfg.shape;
  auto sub = [&](std::uint64_t k) {
    TrainConfig c = cfg;
    c.seed = cfg.seed * 1000003ULL + k;
    return c;
  };
  Rng r1 = child_rng(cfg.seed, 31), r2 = child_rng(cfg.seed, 32), r3 = child_rng(cfg.seed, 33),
      r4 = child_rng(cfg.seed, 34), r5 = child_rng(cfg.seed, 35);
  m.mu1 = NcfRegressor(cfg.shape, nn::Activation::Sigmoid, r1);
  m.mu0 = NcfRegressor(cfg.shape, nn::Activation::Sigmoid, r2);
  m.propensity = NcfRegressor(cfg.shape, nn::Activation::Sigmoid, r3);
  m.ips = NcfRegressor(cfg.shape, nn::Activation::Identity, r4);
  m.dr = NcfRegressor(cfg.shape, nn::Activation::Identity, r5);

  m.mu1.fit(x_t1, y_t1, sub(1));
  m.mu0.fit(x_t0, y_t0, sub(2));
  m.propensity.fit(x_all, t_all, sub(3));

  const auto g_raw = m.propensity.predict(x_all);
  const auto mu1 = m.mu1.predict(x_all);
  const auto mu0 = m.mu0.predict(x_all);
  std::size_t clipped = 0;
  std::vector<double> z_ips(items.size()), z_dr(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double g = clip_propensity(g_raw[i]);
    if (g != g_raw[i]) ++clipped;
    z_ips[i] = ips_pseudo_outcome(items[i].t, items[i].y, g);
    z_dr[i] = dr_pseudo_outcome(items[i].t, items[i].y, g, mu1[i], mu0[i]);
  }
  if (clipped)
    m.warnings.push_back(fmt::format("propensity clipped to [{}, {}] on {} items", kPropensityLo, kPropensityHi, clipped));
  m.ips.fit(x_all, z_ips, sub(4));
  m.dr.fit(x_all, z_dr, sub(5));
  return m;
}

std::vector<Stratum> label_with_ncf(std::span<const traces::ChargingRecord> records, const TrainConfig& cfg) {
  const auto items = observed_items(records, cfg.shape.slots_per_day);
  const auto x = features_of(items);
  std::vector<double> y;
  y.reserve(items.size());
  for (const auto& it : items) y.push_back(it.y);
  Rng init = child_rng(cfg.seed, 41);
  NcfRegressor scorer(cfg.shape, nn::Activation::Sigmoid, init);
  scorer.fit(x, y, cfg);
  const auto ratings = scorer.predict(x);
  return traces::ncf_label(records, ratings);
}

}  // namespace ecthub::pricing
