// fedppd command-line front end.
//
//   fedppd gen-data --config cfg.json --out dir
//   fedppd train    --config cfg.json --out dir [--seed N] [--threads N]
//   fedppd active   --config cfg.json --out dir [--seed N] [--threads N]
//   fedppd eval     --checkpoint ck.json --config cfg.json --out dir [--model student|teacher]
//
// Exit codes: 0 success, 2 config validation, 3 IO/format, 4 numeric/protocol failure.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedppd/experiment.hpp"

namespace {

fedppd::ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  nlohmann::json j = fedppd::read_json(path);
  fedppd::ExperimentConfig cfg = fedppd::parse_config(j);
  if (seed) cfg.seed = *seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedPPD federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string checkpoint;
  std::string model;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--threads", threads, "worker threads for client updates")->check(CLI::PositiveNumber);
  };
  auto* gen = app.add_subcommand("gen-data", "write the dataset CSV and partition plan");
  add_common(gen);
  auto* train = app.add_subcommand("train", "run federated training");
  add_common(train);
  auto* active = app.add_subcommand("active", "run federated active learning");
  add_common(active);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--model", model, "student or teacher (default: student if present)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(fedppd::ExitCode::config);
  }

  try {
    const fedppd::ExperimentConfig cfg = load_config(config_path, seed);
    if (gen->parsed()) {
      fedppd::cmd_gen_data(cfg, out_dir);
    } else if (train->parsed()) {
      const auto o = fedppd::cmd_train(cfg, out_dir, threads);
      std::printf("final accuracy %.4f  ece %.4f  brier %.4f\n", o.metrics.accuracy, o.metrics.calibration.ece,
                  o.metrics.brier);
    } else if (active->parsed()) {
      const auto r = fedppd::cmd_active(cfg, out_dir, threads);
      for (const auto& p : r.curve) {
        std::printf("active round %zu  labeled/client %.1f  accuracy %.4f\n", p.active_round, p.labeled_per_client,
                    p.test_accuracy);
      }
    } else if (eval->parsed()) {
      const auto r = fedppd::cmd_eval(checkpoint, cfg, out_dir, model);
      std::printf("accuracy %.4f  ece %.4f  mce %.4f  brier %.4f\n", r.accuracy, r.calibration.ece,
                  r.calibration.mce, r.brier);
    }
  } catch (const fedppd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(fedppd::ExitCode::failure);
  }
  return 0;
}
