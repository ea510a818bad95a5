// Command-line entry point: ecthub <subcommand> [--config PATH] [--seed N] [--out DIR] [--force]

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ecthub/cli.hpp"
#include "ecthub/errors.hpp"

namespace cli = ecthub::cli;

int main(int argc, char** argv) {
  CLI::App app{"Energy-and-charging hub experiments: data generation, pricing, battery scheduling"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;

  const auto add_common = [&](CLI::App* sub, bool needs_config) {
    if (needs_config) {
      sub->add_option("--config", config_path, "JSON run configuration (defaults when omitted)");
      sub->add_option("--seed", seed, "global seed; overrides the config");
    }
    sub->add_option("--out", out, "run directory; relative paths resolve against $ECTHUB_OUT_ROOT");
    sub->add_flag("--force", force, "overwrite existing outputs");
  };

  auto* gen = app.add_subcommand("gen-data", "write rtp, weather, traffic, charging and strata CSVs");
  auto* train_price = app.add_subcommand("train-price", "train CF-MTL and the OR/IPS/DR baselines");
  auto* eval_price = app.add_subcommand("eval-price", "evaluate pricing policies over the discount grid");
  auto* train_drl = app.add_subcommand("train-drl", "train one PPO scheduler per hub and pricing method");
  auto* eval_drl = app.add_subcommand("eval-drl", "evaluate the schedulers on held-out traces");
  auto* report = app.add_subcommand("report", "merge run results into long-format tables");
  for (auto* s : {gen, train_price, eval_price, train_drl, eval_drl}) add_common(s, true);
  add_common(report, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kConfigError;
  }

  cli::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = cli::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    cli::finalize(cfg);
  } catch (const ecthub::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return cli::kConfigError;
  }

  cli::CommandOptions opt;
  opt.run_dir = cli::resolve_run_dir(out.empty() ? "seed-" + std::to_string(cfg.seed) : out);
  opt.force = force;

  if (*gen) return cli::cmd_gen_data(cfg, opt);
  if (*train_price) return cli::cmd_train_price(cfg, opt);
  if (*eval_price) return cli::cmd_eval_price(cfg, opt);
  if (*train_drl) return cli::cmd_train_drl(cfg, opt);
  if (*eval_drl) return cli::cmd_eval_drl(cfg, opt);
  if (*report) {
    if (out.empty()) {
      std::cerr << "report: --out is required\n";
      return cli::kConfigError;
    }
    return cli::cmd_report(opt);
  }
  return cli::kConfigError;
}
