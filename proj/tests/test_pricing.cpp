#include <filesystem>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "doctest.h"
#include "ecthub/errors.hpp"
#include "ecthub/pricing.hpp"
#include "ecthub/traces.hpp"

using namespace ecthub;
using namespace ecthub::pricing;
using traces::Stratum;

namespace {

traces::Population population(std::uint64_t seed, int stations, long slots, traces::StrataPriors priors,
                              bool uniform_cells = false) {
  traces::PopulationConfig cfg;
  cfg.n_stations = stations;
  cfg.n_slots = slots;
  cfg.priors = priors;
  if (uniform_cells) cfg.make_uniform();
  return traces::gen_charging_population(seed, cfg);
}

TrainConfig small_train(int stations, std::uint64_t seed = 3) {
  TrainConfig t;
  t.seed = seed;
  t.epochs = 10;
  t.shape.n_stations = stations;
  return t;
}

// Oracle for the factored loss: straight per-item arithmetic from the four cell probabilities.
CfmtlLoss oracle_loss(const std::vector<std::array<double, 3>>& f, const std::vector<double>& g,
                      const std::vector<ObservedItem>& batch) {
  CfmtlLoss l;
  const double n = static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int t = batch[i].t, y = batch[i].y;
    auto sq = [](double a, double b) { return (a - b) * (a - b); };
    l.l1 += sq(f[i][0] * g[i], (y == 0 && t == 1) ? 1.0 : 0.0) / n;
    l.l2 += sq(f[i][2] * (1 - g[i]), (y == 1 && t == 0) ? 1.0 : 0.0) / n;
    l.l3 += sq((f[i][1] + f[i][2]) * g[i], (y == 1 && t == 1) ? 1.0 : 0.0) / n;
    l.l4 += sq((f[i][0] + f[i][1]) * (1 - g[i]), (y == 0 && t == 0) ? 1.0 : 0.0) / n;
    l.lp += sq(g[i], t) / n;
  }
  l.total = l.l1 + l.l2 + l.l3 + l.l4 + l.lp;
  return l;
}

// Pearson chi-square test of independence; columns with no mass are dropped.
double chi_square_p(const std::vector<std::vector<double>>& table) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < table[0].size(); ++c) {
    double s = 0.0;
    for (const auto& row : table) s += row[c];
    if (s > 0.0) cols.push_back(c);
  }
  if (cols.size() < 2) return 1.0;
  double total = 0.0;
  std::vector<double> row_sum(table.size(), 0.0), col_sum(cols.size(), 0.0);
  for (std::size_t r = 0; r < table.size(); ++r)
    for (std::size_t k = 0; k < cols.size(); ++k) {
      row_sum[r] += table[r][cols[k]];
      col_sum[k] += table[r][cols[k]];
      total += table[r][cols[k]];
    }
  double stat = 0.0;
  for (std::size_t r = 0; r < table.size(); ++r)
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const double e = row_sum[r] * col_sum[k] / total;
      stat += (table[r][cols[k]] - e) * (table[r][cols[k]] - e) / e;
    }
  const double dof = static_cast<double>((table.size() - 1) * (cols.size() - 1));
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(dof), stat));
}

}  // namespace

TEST_CASE("implied conditionals") {
  const StratumProbs p{0.2, 0.3, 0.5};
  CHECK(p.p_y1_given_t1() == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(p.p_y0_given_t1() + p.p_y1_given_t1() == doctest::Approx(1.0));
  CHECK(p.p_y0_given_t0() + p.p_y1_given_t0() == doctest::Approx(1.0));
  const StratumProbs q{0.4, 0.0, 0.6};
  CHECK(q.p_y1_given_t1() == q.p_y1_given_t0());
}

TEST_CASE("model outputs are distributions") {
  Rng rng = child_rng(1, 0);
  BaseShape shape;
  shape.n_stations = 3;
  PricingModel model(shape, rng);
  std::vector<Features> x;
  for (int s = 0; s < 3; ++s)
    for (int h = 0; h < 24; ++h) x.push_back({s, h});
  for (const auto& p : stratum_probs(model, x)) {
    CHECK(std::abs(p.p00 + p.p01 + p.p11 - 1.0) <= 1e-9);
    CHECK(p.p00 > 0.0);
    CHECK(p.p01 > 0.0);
    CHECK(p.p11 > 0.0);
  }
  for (int i = 0; i < static_cast<int>(x.size()); ++i) {
    const double g = model.forward(std::span(x).subspan(i, 1)).propensity(0, 0);
    CHECK((g > 0.0 && g < 1.0));
  }
}

TEST_CASE("factored loss examples") {
  nn::Matrix f(3, 1);
  f << 0.5, 0.3, 0.2;
  nn::Matrix g(1, 1);
  g << 0.4;
  const std::vector<ObservedItem> one{{{0, 0}, 1, 0}};
  const auto l = cfmtl_loss_from_outputs(f, g, one).loss;
  CHECK((0.5 * 0.4 - 1.0) * (0.5 * 0.4 - 1.0) == doctest::Approx(0.64));
  CHECK(l.l1 == doctest::Approx(0.64).epsilon(1e-14));

  // Propensity term with g = 0.5 on a half-treated batch.
  nn::Matrix f4(3, 4);
  f4.setConstant(1.0 / 3.0);
  nn::Matrix g4 = nn::Matrix::Constant(1, 4, 0.5);
  const std::vector<ObservedItem> half{{{0, 0}, 1, 0}, {{0, 1}, 0, 0}, {{0, 2}, 1, 1}, {{0, 3}, 0, 1}};
  CHECK(cfmtl_loss_from_outputs(f4, g4, half).loss.lp == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("factored loss matches the oracle and decomposes exactly") {
  Rng rng = child_rng(4, 0);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = uniform_int(rng, 1, 20);
    nn::Matrix f(3, n), g(1, n);
    std::vector<std::array<double, 3>> fv(n);
    std::vector<double> gv(n);
    std::vector<ObservedItem> batch(n);
    for (int i = 0; i < n; ++i) {
      const double a = uniform(rng), b = uniform(rng), c = uniform(rng), s = a + b + c;
      fv[i] = {a / s, b / s, c / s};
      for (int k = 0; k < 3; ++k) f(k, i) = fv[i][k];
      gv[i] = g(0, i) = uniform(rng);
      batch[i] = {{0, 0}, bernoulli(rng, 0.5), bernoulli(rng, 0.5)};
    }
    const auto got = cfmtl_loss_from_outputs(f, g, batch).loss;
    const auto want = oracle_loss(fv, gv, batch);
    CHECK(got.l1 == doctest::Approx(want.l1).epsilon(1e-12));
    CHECK(got.l2 == doctest::Approx(want.l2).epsilon(1e-12));
    CHECK(got.l3 == doctest::Approx(want.l3).epsilon(1e-12));
    CHECK(got.l4 == doctest::Approx(want.l4).epsilon(1e-12));
    CHECK(got.lp == doctest::Approx(want.lp).epsilon(1e-12));
    CHECK(std::abs(got.total - (got.l1 + got.l2 + got.l3 + got.l4 + got.lp)) <= 1e-9);
  }
}

TEST_CASE("perfectly matched outputs give zero loss") {
  // Items whose cell probabilities equal their indicators: (Y=0,T=1) with f00=1, g=1 and so on.
  nn::Matrix f(3, 2), g(1, 2);
  f << 1.0, 0.0, 0.0, 0.0, 0.0, 1.0;
  g << 1.0, 0.0;
  const std::vector<ObservedItem> b{{{0, 0}, 1, 0}, {{0, 1}, 0, 1}};
  CHECK(cfmtl_loss_from_outputs(f, g, b).loss.total == 0.0);
}

TEST_CASE("training lowers the held-out loss and is deterministic") {
  const auto pop = population(2, 7, 720, {0.30, 0.45, 0.25});
  REQUIRE(pop.records.size() >= 5000);
  const auto items = observed_items(pop.records);
  TrainConfig cfg = small_train(7);
  TrainReport r1, r2;
  train_cfmtl(items, cfg, &r1);
  train_cfmtl(items, cfg, &r2);
  CHECK(r1.final_holdout_loss < r1.initial_holdout_loss);
  CHECK(r1.final_holdout_loss == r2.final_holdout_loss);
  CHECK(r1.epoch_train_loss == r2.epoch_train_loss);
}

TEST_CASE("always-only population drives P11 toward 1") {
  const auto pop = population(5, 3, 24 * 20, {0.0, 0.0, 1.0});
  const auto items = observed_items(pop.records);
  const auto model = train_cfmtl(items, small_train(3));
  const auto probs = stratum_probs(model, features_of(items));
  double mean = 0.0;
  for (const auto& p : probs) mean += p.p11 / static_cast<double>(probs.size());
  CHECK(mean > 0.9);
}

TEST_CASE("single-arm data is rejected") {
  std::vector<ObservedItem> items(50);
  for (std::size_t i = 0; i < items.size(); ++i) items[i] = {{0, static_cast<int>(i % 24)}, 1, 1};
  CHECK_THROWS_AS(train_cfmtl(items, small_train(1)), TrainingError);
}

TEST_CASE("decision rule and tie-break") {
  CHECK(predicted_stratum({0.1, 0.7, 0.2}) == Stratum::IncentiveCharge);
  CHECK(predicted_stratum({0.1, 0.2, 0.7}) == Stratum::AlwaysCharge);
  CHECK(predicted_stratum({0.2, 0.4, 0.4}) == Stratum::AlwaysCharge);
  CHECK(predicted_stratum({0.4, 0.4, 0.2}) == Stratum::NoCharge);
  CHECK(predicted_stratum({0.4, 0.2, 0.4}) == Stratum::NoCharge);
}

TEST_CASE("reward metric examples") {
  const std::vector<Stratum> truth{Stratum::AlwaysCharge, Stratum::AlwaysCharge, Stratum::IncentiveCharge,
                                   Stratum::NoCharge};
  std::vector<DiscountDecision> none(4);
  for (std::size_t i = 0; i < 4; ++i) none[i].item = i;
  CHECK(evaluate_policy(none, truth, 0.1).reward == 2.0);

  auto inc = none;
  inc[2].give_discount = true;
  inc[2].discount_rate = 0.1;
  const auto e1 = evaluate_policy(inc, truth, 0.1);
  CHECK(e1.reward - 2.0 == doctest::Approx(0.9));
  CHECK(e1.incentive_count == 1);

  auto alw = none;
  alw[0].give_discount = true;
  alw[0].discount_rate = 0.1;
  const auto e2 = evaluate_policy(alw, truth, 0.1);
  CHECK(e2.reward == doctest::Approx(1.9));
  CHECK(e2.always_count == 1);

  const auto lit = evaluate_policy(inc, truth, 0.1, RewardMetric::Literal);
  CHECK(lit.reward == doctest::Approx(2.0 - 0.1));

  CHECK_THROWS(evaluate_policy(none, std::vector<Stratum>(3), 0.1));
}

TEST_CASE("reward is nonincreasing in the discount") {
  Rng rng = child_rng(6, 0);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 40;
    std::vector<Stratum> truth(n);
    std::vector<bool> give(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<Stratum>(uniform_int(rng, 0, 2));
      give[i] = bernoulli(rng, 0.5);
    }
    double prev = 1e300;
    for (double c : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}) {
      std::vector<DiscountDecision> d(n);
      for (std::size_t i = 0; i < n; ++i) d[i] = {i, give[i], give[i] ? c : 0.0};
      const double r = evaluate_policy(d, truth, c).reward;
      CHECK(r <= prev);
      prev = r;
    }
  }
}

TEST_CASE("top-k policy") {
  const std::vector<double> scores{0.1, 0.9, 0.5, 0.9, -0.2};
  const auto d = top_k_policy(scores, 2, 0.3);
  REQUIRE(d.size() == 5);
  CHECK(d[1].give_discount);
  CHECK(d[3].give_discount);
  CHECK_FALSE(d[2].give_discount);
  CHECK(d[1].discount_rate == 0.3);
}

TEST_CASE("propensity clipping and pseudo-outcomes") {
  CHECK(clip_propensity(0.0) == 0.01);
  CHECK(clip_propensity(1.0) == 0.99);
  CHECK(clip_propensity(0.3) == 0.3);
  // With zero residuals the correction vanishes and DR reduces to OR.
  CHECK(dr_pseudo_outcome(1, 1, 0.3, 1.0, 0.4) == doctest::Approx(1.0 - 0.4));
  CHECK(dr_pseudo_outcome(0, 0, 0.7, 0.8, 0.0) == doctest::Approx(0.8));
}

TEST_CASE("IPS pseudo-outcomes average to 1 on an incentive-only universe") {
  const auto pop = population(8, 4, 24 * 30, {0.0, 1.0, 0.0});
  double mean = 0.0;
  for (const auto& r : pop.records) mean += ips_pseudo_outcome(r.discount_given, r.charged, 0.5);
  mean /= static_cast<double>(pop.records.size());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));

  const auto items = observed_items(pop.records);
  const auto models = train_uplift_models(items, small_train(4));
  const auto est = ips_estimator(models, features_of(items));
  CHECK(std::accumulate(est.begin(), est.end(), 0.0) / static_cast<double>(est.size()) ==
        doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("outcome regression uplift vanishes when Y ignores T") {
  const auto pop = population(9, 3, 24 * 20, {0.0, 0.0, 1.0});
  const auto items = observed_items(pop.records);
  const auto models = train_uplift_models(items, small_train(3));
  for (double u : or_estimator(models, features_of(items))) CHECK(std::abs(u) < 0.05);
}

TEST_CASE("strata by period") {
  const auto pop = population(10, 8, 24 * 30, {0.30, 0.45, 0.25});
  const auto items = observed_items(pop.records);
  const auto model = train_cfmtl(items, small_train(8));
  const auto shares = strata_by_period(model, features_of(items));
  for (const auto& per : shares) CHECK(per[0] + per[1] + per[2] == doctest::Approx(1.0).epsilon(1e-12));
  const double evening = shares[3][static_cast<int>(Stratum::IncentiveCharge)];
  for (int p = 0; p < 3; ++p) CHECK(evening > shares[p][static_cast<int>(Stratum::IncentiveCharge)]);
}

TEST_CASE("uniform strata give period-independent predictions") {
  const auto pop = population(11, 8, 24 * 30, {0.30, 0.45, 0.25}, true);
  const auto items = observed_items(pop.records);
  const auto model = train_cfmtl(items, small_train(8));
  // Items of one (station, slot-of-day) cell share features, so the cell is the unit of observation.
  std::vector<Features> cells;
  for (int s = 0; s < 8; ++s)
    for (int h = 0; h < 24; ++h) cells.push_back({s, h});
  const auto probs = stratum_probs(model, cells);
  std::vector<std::vector<double>> table(4, std::vector<double>(3, 0.0));
  for (std::size_t i = 0; i < cells.size(); ++i)
    table[traces::period_of(cells[i].slot_of_day)][static_cast<int>(predicted_stratum(probs[i]))] += 1.0;
  CHECK(chi_square_p(table) > 0.01);
}

TEST_CASE("model save and load reproduce predictions") {
  const auto pop = population(12, 2, 24 * 10, {0.3, 0.4, 0.3});
  const auto items = observed_items(pop.records);
  const auto model = train_cfmtl(items, small_train(2));
  const auto path = (std::filesystem::temp_directory_path() / "ecthub_pricing.ckpt").string();
  model.save(path);
  const auto back = PricingModel::load(path);
  const auto x = features_of(items);
  const auto a = stratum_probs(model, x), b = stratum_probs(back, x);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].p00 == b[i].p00);
    CHECK(a[i].p11 == b[i].p11);
  }
  std::filesystem::remove(path);
}
